#pragma once

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "attribute_model.hpp"
#include "detail/parallel.hpp"
#include "detail/text.hpp"
#include "error.hpp"
#include "model_gateway.hpp"
#include "prompt_forge.hpp"
#include "reid_eval.hpp"
#include "semantic_metric.hpp"
#include "tv_denoise.hpp"

namespace mugshot {

/// Input combinations for generation, one confusion-matrix pair each.
enum class ExperimentArm { OriginalOnly, OriginalEnhanced, OriginalGenerated };

inline constexpr std::string_view arm_key(ExperimentArm a) {
    switch (a) {
        case ExperimentArm::OriginalOnly: return "original_only";
        case ExperimentArm::OriginalEnhanced: return "original_enhanced";
        case ExperimentArm::OriginalGenerated: return "original_generated";
    }
    return "";
}

inline ExperimentArm parse_arm(std::string_view s) {
    for (auto a : {ExperimentArm::OriginalOnly, ExperimentArm::OriginalEnhanced, ExperimentArm::OriginalGenerated})
        if (arm_key(a) == s) return a;
    throw ConfigError("unknown experiment arm '" + std::string(s) + "'");
}

struct ReidSettings {
    std::optional<double> threshold;             // distance matrices
    std::optional<double> similarity_threshold;  // similarity matrices
    bool sweep = false;
    Aggregation aggregation = Aggregation::Mean;
};

struct AgingSettings {
    std::optional<double> target_age;
    AgingDirection direction = AgingDirection::Age;
};

struct PipelineConfig {
    fs::path dataset;
    fs::path output_dir = "out";
    std::vector<EnhanceMethod> enhancements;
    MetricConfig metric;
    std::string describer_label = "accuracy";

    FeatureRules prompt_rules;
    std::size_t prompt_max_length = kDefaultMaxPromptChars;
    std::optional<fs::path> template_file;

    int sample_steps = kDefaultSampleSteps;
    int style_strength = kDefaultStyleStrength;
    int count = 4;
    std::vector<ExperimentArm> arms = {ExperimentArm::OriginalOnly, ExperimentArm::OriginalGenerated};
    std::optional<fs::path> prior_manifest;

    ReidSettings reid;
    AgingSettings aging;
    DenoiseParams denoise;

    std::map<BackendKind, BackendEndpoint> endpoints;
    std::optional<fs::path> replay_journal;
    std::optional<fs::path> record_fixtures;
    int workers = 4;
    std::size_t max_image_bytes = kDefaultMaxImageBytes;

    /// Points every backend kind at one fixture root.
    void use_fixtures(const fs::path& root) {
        for (auto k : kAllBackendKinds) {
            auto& ep = endpoints[k];
            ep.kind = k;
            ep.url.clear();
            ep.fixture_dir = root.string();
        }
    }

    void validate() const {
        if (dataset.empty()) throw ValidationError("no dataset configured");
        if (!fs::is_regular_file(dataset)) throw ValidationError("dataset not found: " + dataset.string());
        if (output_dir.empty()) throw ValidationError("no output directory configured");
        if (workers < 1) throw ConfigError("workers must be >= 1");
        if (count < 1) throw ConfigError("generation count must be >= 1");
        if (sample_steps < 1) throw ConfigError("sample_steps must be >= 1");
        if (style_strength < 0 || style_strength > 100) throw ConfigError("style_strength must be within 0..100");
        if (std::find(arms.begin(), arms.end(), ExperimentArm::OriginalEnhanced) != arms.end() && enhancements.empty())
            throw ConfigError("arm original_enhanced needs at least one enhancement method");
        if (prior_manifest && !fs::is_regular_file(*prior_manifest))
            throw ValidationError("prior manifest not found: " + prior_manifest->string());
        if (template_file && !fs::is_regular_file(*template_file))
            throw ValidationError("template file not found: " + template_file->string());
        if (replay_journal && !fs::is_regular_file(*replay_journal))
            throw ValidationError("replay journal not found: " + replay_journal->string());
        if (aging.target_age && !(*aging.target_age > 0.0)) throw ConfigError("target age must be > 0");
        for (const auto& [k, ep] : endpoints) {
            ep.validate();
            if (!ep.fixture_dir.empty() && !fs::is_directory(ep.fixture_dir))
                throw ValidationError("fixture directory not found: " + ep.fixture_dir);
        }
        denoise.validate();
        prompt_rules.validate();
    }
};

namespace detail {

inline const std::set<std::string>& known_config_keys() {
    static const std::set<std::string> keys = {"dataset", "output_dir", "enhancements", "metric", "describer_label",
                                               "prompt",  "generation", "reid",        "aging",  "denoise",
                                               "endpoints", "fixtures", "workers",     "max_image_bytes"};
    return keys;
}

inline fs::path resolve(const fs::path& base, const fs::path& p) {
    if (p.empty() || p.is_absolute()) return p;
    return base / p;
}

inline BackendEndpoint parse_endpoint(BackendKind kind, const nlohmann::json& j, const fs::path& base) {
    BackendEndpoint ep;
    ep.kind = kind;
    ep.url = j.value("url", "");
    if (j.contains("fixtures")) ep.fixture_dir = resolve(base, j.at("fixtures").get<std::string>()).string();
    ep.timeout_s = j.value("timeout", ep.timeout_s);
    ep.max_retries = j.value("max_retries", ep.max_retries);
    ep.max_in_flight = j.value("max_in_flight", ep.max_in_flight);
    ep.retry_backoff_ms = j.value("retry_backoff_ms", ep.retry_backoff_ms);
    ep.bearer_token = j.value("bearer_token", "");
    return ep;
}

inline std::string upper(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return out;
}

}  // namespace detail

/// Relative paths inside the config resolve against `base_dir` (the config file's directory).
inline PipelineConfig parse_pipeline_config(const nlohmann::json& j, const fs::path& base_dir = ".") {
    PipelineConfig cfg;
    if (!j.is_object()) throw ConfigError("pipeline config must be a JSON object");
    for (const auto& [k, _] : j.items())
        if (!detail::known_config_keys().count(k)) throw ConfigError("unknown config key '" + k + "'");
    try {
        if (j.contains("dataset")) cfg.dataset = detail::resolve(base_dir, j.at("dataset").get<std::string>());
        if (j.contains("output_dir")) cfg.output_dir = detail::resolve(base_dir, j.at("output_dir").get<std::string>());
        for (const auto& m : j.value("enhancements", std::vector<std::string>{})) cfg.enhancements.push_back(parse_method(m));
        if (j.contains("metric")) cfg.metric = parse_metric_config(j.at("metric"));
        cfg.describer_label = j.value("describer_label", cfg.describer_label);
        if (j.contains("prompt")) {
            const auto& p = j.at("prompt");
            if (p.contains("exclude_terms")) cfg.prompt_rules.exclude_terms = p.at("exclude_terms").get<std::vector<std::string>>();
            for (const auto& t : p.value("exclude_terms_add", std::vector<std::string>{}))
                cfg.prompt_rules.exclude_terms.push_back(t);
            if (p.contains("include_categories")) {
                cfg.prompt_rules.include.clear();
                for (const auto& f : p.at("include_categories")) cfg.prompt_rules.include.insert(parse_feature(f.get<std::string>()));
            }
            cfg.prompt_max_length = p.value("max_length", cfg.prompt_max_length);
            if (p.contains("templates")) cfg.template_file = detail::resolve(base_dir, p.at("templates").get<std::string>());
        }
        if (j.contains("generation")) {
            const auto& g = j.at("generation");
            cfg.sample_steps = g.value("sample_steps", cfg.sample_steps);
            cfg.style_strength = g.value("style_strength", cfg.style_strength);
            cfg.count = g.value("count", cfg.count);
            if (g.contains("arms")) {
                cfg.arms.clear();
                for (const auto& a : g.at("arms")) cfg.arms.push_back(parse_arm(a.get<std::string>()));
            }
            if (g.contains("prior_manifest"))
                cfg.prior_manifest = detail::resolve(base_dir, g.at("prior_manifest").get<std::string>());
        }
        if (j.contains("reid")) {
            const auto& r = j.at("reid");
            if (r.contains("threshold")) cfg.reid.threshold = r.at("threshold").get<double>();
            if (r.contains("similarity_threshold")) cfg.reid.similarity_threshold = r.at("similarity_threshold").get<double>();
            cfg.reid.sweep = r.value("sweep", false);
            if (r.contains("aggregation")) cfg.reid.aggregation = parse_aggregation(r.at("aggregation").get<std::string>());
        }
        if (j.contains("aging")) {
            const auto& a = j.at("aging");
            if (a.contains("target_age")) cfg.aging.target_age = a.at("target_age").get<double>();
            if (a.contains("direction")) cfg.aging.direction = parse_direction(a.at("direction").get<std::string>());
        }
        if (j.contains("denoise")) {
            const auto& d = j.at("denoise");
            cfg.denoise.iterations = d.value("iterations", cfg.denoise.iterations);
            cfg.denoise.lambda = d.value("lambda", cfg.denoise.lambda);
            cfg.denoise.epsilon = d.value("epsilon", cfg.denoise.epsilon);
            cfg.denoise.step = d.value("step", cfg.denoise.step);
        }
        if (j.contains("fixtures")) cfg.use_fixtures(detail::resolve(base_dir, j.at("fixtures").get<std::string>()));
        if (j.contains("endpoints")) {
            for (const auto& [k, v] : j.at("endpoints").items()) {
                const auto kind = parse_kind(k);
                cfg.endpoints[kind] = detail::parse_endpoint(kind, v, base_dir);
            }
        }
        cfg.workers = j.value("workers", cfg.workers);
        cfg.max_image_bytes = j.value("max_image_bytes", cfg.max_image_bytes);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("pipeline config: ") + e.what());
    }
    return cfg;
}

inline PipelineConfig load_pipeline_config(const fs::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(detail::read_file(path.string()));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": malformed JSON: " + e.what());
    }
    return parse_pipeline_config(j, path.has_parent_path() ? path.parent_path() : fs::path("."));
}

/// MUGSHOT_FIXTURES, MUGSHOT_<KIND>_URL, MUGSHOT_<KIND>_FIXTURES, MUGSHOT_BEARER_TOKEN.
inline void apply_env_overrides(PipelineConfig& cfg) {
    if (const char* f = std::getenv("MUGSHOT_FIXTURES"); f && *f) cfg.use_fixtures(f);
    for (auto k : kAllBackendKinds) {
        const auto prefix = "MUGSHOT_" + detail::upper(kind_key(k));
        if (const char* u = std::getenv((prefix + "_URL").c_str()); u && *u) {
            auto& ep = cfg.endpoints[k];
            ep.kind = k;
            ep.url = u;
            ep.fixture_dir.clear();
        }
        if (const char* f = std::getenv((prefix + "_FIXTURES").c_str()); f && *f) {
            auto& ep = cfg.endpoints[k];
            ep.kind = k;
            ep.fixture_dir = f;
            ep.url.clear();
        }
    }
    if (const char* t = std::getenv("MUGSHOT_BEARER_TOKEN"); t && *t)
        for (auto& [_, ep] : cfg.endpoints) ep.bearer_token = t;
}

// ---- manifests -----------------------------------------------------------------

struct ManifestImage {
    std::string path;  // relative to the manifest directory
    std::string sha256;
};

struct Skip {
    std::string subject_id;
    std::string arm;
    std::string reason;
};

/// Generated images keyed by arm label, then subject id.
struct AugmentManifest {
    fs::path base_dir;
    std::map<std::string, std::map<std::string, std::vector<ManifestImage>>> arms;
    std::map<std::string, std::pair<std::string, std::string>> prompts;  // subject -> (positive, negative)
    std::vector<Skip> skipped;
    std::map<std::string, std::string> failed_arms;

    fs::path resolve(const ManifestImage& img) const { return base_dir / img.path; }

    std::size_t image_count() const {
        std::size_t n = 0;
        for (const auto& [_, subjects] : arms)
            for (const auto& [__, imgs] : subjects) n += imgs.size();
        return n;
    }

    nlohmann::json to_json() const {
        nlohmann::json a = nlohmann::json::object();
        for (const auto& [arm, subjects] : arms) {
            nlohmann::json s = nlohmann::json::object();
            for (const auto& [id, imgs] : subjects) {
                nlohmann::json list = nlohmann::json::array();
                for (const auto& i : imgs) list.push_back({{"path", i.path}, {"sha256", i.sha256}});
                s[id] = std::move(list);
            }
            a[arm] = std::move(s);
        }
        nlohmann::json p = nlohmann::json::object();
        for (const auto& [id, pr] : prompts) p[id] = {{"positive", pr.first}, {"negative", pr.second}};
        nlohmann::json sk = nlohmann::json::array();
        for (const auto& s : skipped) sk.push_back({{"subject_id", s.subject_id}, {"arm", s.arm}, {"reason", s.reason}});
        return {{"version", 1}, {"arms", a}, {"prompts", p}, {"skipped", sk}, {"failed_arms", failed_arms}};
    }

    void save(const fs::path& path) const {
        fs::create_directories(path.parent_path());
        detail::write_file(path.string(), to_json().dump(2) + "\n");
    }

    static AugmentManifest load(const fs::path& path) {
        AugmentManifest m;
        m.base_dir = path.parent_path();
        try {
            const auto j = nlohmann::json::parse(detail::read_file(path.string()));
            for (const auto& [arm, subjects] : j.at("arms").items())
                for (const auto& [id, imgs] : subjects.items())
                    for (const auto& i : imgs)
                        m.arms[arm][id].push_back({i.at("path").get<std::string>(), i.at("sha256").get<std::string>()});
            const auto prompts = j.value("prompts", nlohmann::json::object());
            for (const auto& [id, pr] : prompts.items())
                m.prompts[id] = {pr.at("positive").get<std::string>(), pr.at("negative").get<std::string>()};
            for (const auto& s : j.value("skipped", nlohmann::json::array()))
                m.skipped.push_back({s.at("subject_id"), s.at("arm"), s.at("reason")});
            m.failed_arms = j.value("failed_arms", std::map<std::string, std::string>{});
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("malformed manifest " + path.string() + ": " + e.what());
        }
        return m;
    }
};

// ---- stage outcomes ----------------------------------------------------------------

struct Failure {
    std::string subject_id;
    std::string arm;
    std::string image;
    std::string error;
    int exit_code;
};

struct DescribeOutcome {
    std::vector<DistanceReport> reports;
    std::optional<CohortTable> cohort;
    std::vector<Failure> failures;
};

struct MatrixSummary {
    ConfusionMatrix matrix;
    double identification_accuracy = 0.0;
    double mean_genuine = 0.0;
    std::optional<VerificationMetrics> verification;
    std::vector<VerificationMetrics> sweep;
};

struct ArmEvaluation {
    std::string arm;
    MatrixSummary distance;
    MatrixSummary similarity;
};

struct ReidOutcome {
    std::vector<ArmEvaluation> arms;
    std::map<std::string, std::string> failed_arms;
};

struct AgeOutcome {
    AugmentManifest manifest;
    ReidOutcome reid;
};

// ---- pipeline ------------------------------------------------------------------

/// Wires enhancement, description, scoring, generation and re-identification.
/// Report files contain no timestamps and no absolute paths, so fixture runs
/// reproduce them byte for byte.
class Pipeline {
public:
    /// `transports` replaces the configured endpoint for a backend kind; record
    /// and replay settings still apply on top of it.
    explicit Pipeline(PipelineConfig cfg, std::map<BackendKind, std::shared_ptr<Transport>> transports = {})
        : cfg_(std::move(cfg)) {
        cfg_.validate();
        dataset_dir_ = cfg_.dataset.has_parent_path() ? cfg_.dataset.parent_path() : fs::path(".");
        subjects_ = load_subject_records(cfg_.dataset.string(), cfg_.metric.synonyms);
        if (subjects_.empty()) throw ValidationError("dataset " + cfg_.dataset.string() + " has no subjects");
        for (const auto& s : subjects_) {
            for (const auto& p : s.reference_images)
                if (!fs::is_regular_file(image_path(p)))
                    throw ValidationError("subject '" + s.subject_id + "': reference image not found: " + p);
            for (const auto& p : s.target_images)
                if (!fs::is_regular_file(image_path(p)))
                    throw ValidationError("subject '" + s.subject_id + "': target image not found: " + p);
        }
        templates_ = cfg_.template_file ? PromptTemplates::load(cfg_.template_file->string()) : PromptTemplates::defaults();

        fs::create_directories(cfg_.output_dir);
        GatewayOptions opts;
        opts.journal_path = cfg_.output_dir / "journal.jsonl";
        opts.denoise = cfg_.denoise;
        opts.synonyms = cfg_.metric.synonyms;
        opts.max_image_bytes = cfg_.max_image_bytes;
        gateway_ = std::make_unique<ModelGateway>(opts);

        std::shared_ptr<Transport> replay;
        if (cfg_.replay_journal) replay = std::make_shared<ReplayTransport>(*cfg_.replay_journal);
        for (auto k : kAllBackendKinds) {
            auto it = cfg_.endpoints.find(k);
            if (replay) {
                gateway_->attach(k, replay, it != cfg_.endpoints.end() ? it->second.max_in_flight : 4);
                continue;
            }
            const int in_flight = it != cfg_.endpoints.end() ? it->second.max_in_flight : 4;
            std::shared_ptr<Transport> transport;
            bool live = false;
            if (auto o = transports.find(k); o != transports.end()) {
                transport = o->second;
                live = true;
            } else if (it != cfg_.endpoints.end()) {
                transport = make_transport(it->second);
                live = !it->second.url.empty();
            }
            if (!transport) continue;
            if (cfg_.record_fixtures && live)
                transport = std::make_shared<RecordingTransport>(transport, *cfg_.record_fixtures);
            gateway_->attach(k, transport, in_flight);
        }
    }

    const PipelineConfig& config() const { return cfg_; }
    const std::vector<SubjectRecord>& subjects() const { return subjects_; }
    ModelGateway& gateway() { return *gateway_; }

    DescribeOutcome run_describe() {
        require(BackendKind::Describe);
        const auto questions = build_vlm_questions(templates_);
        std::vector<std::optional<EnhanceMethod>> variants = {std::nullopt};
        for (auto m : {EnhanceMethod::Maxim, EnhanceMethod::Srgan, EnhanceMethod::TvDenoise})
            if (std::find(cfg_.enhancements.begin(), cfg_.enhancements.end(), m) != cfg_.enhancements.end())
                variants.push_back(m);

        struct Slot {
            std::vector<DistanceReport> reports;
            std::vector<Failure> failures;
        };
        std::vector<Slot> slots(subjects_.size());
        detail::parallel_for(subjects_.size(), cfg_.workers, [&](std::size_t i) {
            const auto& s = subjects_[i];
            for (const auto& variant : variants) {
                const auto prov = variant ? provenance_of(*variant) : Provenance::Original;
                for (const auto& ref : s.reference_images) {
                    try {
                        auto img = variant ? enhanced(ref, *variant) : image_path(ref).string();
                        auto d = gateway_->describe(img, questions, s.subject_id, prov);
                        d.source_image = variant ? relative_to_out(img) : ref;
                        slots[i].reports.push_back(
                            score_description(s, d, cfg_.metric.thresholds, cfg_.metric.equivalence));
                    } catch (const Error& e) {
                        slots[i].failures.push_back({s.subject_id, std::string(provenance_key(prov)), ref, e.what(),
                                                     exit_code_for(e)});
                    }
                }
            }
        });

        DescribeOutcome out;
        for (auto& s : slots) {
            for (auto& r : s.reports) out.reports.push_back(std::move(r));
            for (auto& f : s.failures) out.failures.push_back(std::move(f));
        }
        std::stable_sort(out.reports.begin(), out.reports.end(),
                         [](const auto& a, const auto& b) { return a.provenance < b.provenance; });
        if (out.reports.empty()) {
            if (!out.failures.empty()) rethrow_as(out.failures.front());
            throw ValidationError("no subject has reference images to describe");
        }
        out.cohort = score_cohort(out.reports);

        const auto dir = cfg_.output_dir / "describe";
        fs::create_directories(dir);
        nlohmann::json reports = nlohmann::json::array();
        for (const auto& r : out.reports) reports.push_back(to_json(r));
        nlohmann::json failures = nlohmann::json::array();
        for (const auto& f : out.failures)
            failures.push_back({{"subject_id", f.subject_id}, {"arm", f.arm}, {"image", f.image}, {"error", f.error}});
        detail::write_file((dir / "reports.json").string(),
                           nlohmann::json{{"reports", reports}, {"failures", failures}}.dump(2) + "\n");
        detail::write_file((dir / "reports.csv").string(), reports_to_csv(out.reports));
        detail::write_file((dir / "cohort.csv").string(), cohort_to_csv(*out.cohort, cfg_.describer_label));
        detail::write_file((dir / "cohort.json").string(), to_json(*out.cohort, cfg_.describer_label).dump(2) + "\n");
        return out;
    }

    AugmentManifest run_augment() {
        require(BackendKind::Generate);
        std::optional<AugmentManifest> prior;
        if (cfg_.prior_manifest) prior = AugmentManifest::load(*cfg_.prior_manifest);

        std::vector<ExperimentArm> arms;
        for (auto a : {ExperimentArm::OriginalOnly, ExperimentArm::OriginalEnhanced, ExperimentArm::OriginalGenerated})
            if (std::find(cfg_.arms.begin(), cfg_.arms.end(), a) != cfg_.arms.end()) arms.push_back(a);
        if (arms.empty()) throw ConfigError("no experiment arms configured");

        const auto manifest_dir = cfg_.output_dir / "augment";
        AugmentManifest manifest;
        manifest.base_dir = manifest_dir;

        struct Slot {
            std::map<std::string, std::vector<ManifestImage>> by_arm;
            std::optional<std::pair<std::string, std::string>> prompt;
            std::vector<Skip> skipped;
            std::map<std::string, std::string> protocol_errors;
        };
        std::vector<Slot> slots(subjects_.size());
        detail::parallel_for(subjects_.size(), cfg_.workers, [&](std::size_t i) {
            const auto& s = subjects_[i];
            auto& slot = slots[i];
            if (s.reference_images.empty()) {
                slot.skipped.push_back({s.subject_id, "*", "no reference images"});
                return;
            }
            PromptSpec prompt;
            try {
                prompt = build_generation_prompt(s, cfg_.prompt_rules, templates_, cfg_.prompt_max_length);
            } catch (const PromptError& e) {
                slot.skipped.push_back({s.subject_id, "*", e.what()});
                return;
            }
            slot.prompt = std::make_pair(prompt.rendered_positive(), prompt.rendered_negative());
            std::vector<std::string> originals;
            for (const auto& r : s.reference_images) originals.push_back(image_path(r).string());

            for (auto arm : arms) {
                const std::string key(arm_key(arm));
                try {
                    GenerationRequest req = make_request(prompt);
                    req.input_images = originals;
                    if (arm == ExperimentArm::OriginalEnhanced) {
                        for (const auto& r : s.reference_images)
                            for (auto m : cfg_.enhancements) req.input_images.push_back(enhanced(r, m));
                    } else if (arm == ExperimentArm::OriginalGenerated) {
                        auto previous = previously_generated(prior, manifest_dir, slot.by_arm, s.subject_id);
                        if (previous.empty()) {
                            slot.skipped.push_back({s.subject_id, key, "no previously generated images"});
                            continue;
                        }
                        req.input_images.insert(req.input_images.end(), previous.begin(), previous.end());
                    }
                    auto paths = gateway_->generate(req, manifest_dir / "generated" / key, s.subject_id);
                    for (const auto& p : paths)
                        slot.by_arm[key].push_back({fs::relative(p, manifest_dir).generic_string(),
                                                    sha256_hex(detail::read_file(p))});
                } catch (const ProtocolError& e) {
                    slot.protocol_errors[key] = s.subject_id + ": " + e.what();
                } catch (const Error& e) {
                    slot.skipped.push_back({s.subject_id, key, e.what()});
                }
            }
        });

        for (std::size_t i = 0; i < slots.size(); ++i) {
            auto& slot = slots[i];
            if (slot.prompt) manifest.prompts[subjects_[i].subject_id] = *slot.prompt;
            for (auto& [arm, imgs] : slot.by_arm) manifest.arms[arm][subjects_[i].subject_id] = std::move(imgs);
            for (auto& sk : slot.skipped) manifest.skipped.push_back(std::move(sk));
            for (auto& [arm, msg] : slot.protocol_errors)
                if (!manifest.failed_arms.count(arm)) manifest.failed_arms[arm] = msg;
        }
        for (const auto& [arm, _] : manifest.failed_arms) manifest.arms.erase(arm);
        manifest.save(manifest_dir / "manifest.json");
        return manifest;
    }

    ReidOutcome run_reid(const AugmentManifest& manifest) {
        require(BackendKind::Embed);
        require_verification_setting();
        if (manifest.image_count() == 0) throw ValidationError("manifest lists no generated images");

        std::map<std::string, std::vector<fs::path>> refs;
        for (const auto& s : subjects_)
            for (const auto& p : s.reference_images) refs[s.subject_id].push_back(image_path(p));

        ReidOutcome out;
        for (const auto& [arm, subjects] : manifest.arms) {
            std::map<std::string, std::vector<fs::path>> probes;
            for (const auto& [id, imgs] : subjects)
                for (const auto& i : imgs) probes[id].push_back(manifest.resolve(i));
            evaluate_arm(arm, refs, probes, cfg_.output_dir / "reid", out);
        }
        write_reid_summary(out, cfg_.output_dir / "reid");
        return out;
    }

    AgeOutcome run_age(double target_age, AgingDirection direction) {
        require(BackendKind::Generate);
        require(BackendKind::Embed);
        require_verification_setting();
        if (!(target_age > 0.0)) throw ValidationError("target age must be > 0");
        for (const auto& s : subjects_) {
            if (s.target_images.empty())
                throw ValidationError("subject '" + s.subject_id + "' has no target images for the aging evaluation");
            if (s.reference_images.empty())
                throw ValidationError("subject '" + s.subject_id + "' has no reference images to age");
        }

        const std::string label(direction_label(direction));
        const auto age_dir = cfg_.output_dir / "age";
        AgeOutcome out;
        out.manifest.base_dir = age_dir;

        struct Slot {
            std::vector<ManifestImage> images;
            std::optional<std::pair<std::string, std::string>> prompt;
            std::optional<Skip> skipped;
            std::optional<std::string> protocol_error;
        };
        std::vector<Slot> slots(subjects_.size());
        detail::parallel_for(subjects_.size(), cfg_.workers, [&](std::size_t i) {
            const auto& s = subjects_[i];
            try {
                const auto base = build_generation_prompt(s, cfg_.prompt_rules, templates_, cfg_.prompt_max_length);
                const auto prompt = build_aging_prompt(base, target_age, direction, cfg_.prompt_rules, templates_);
                slots[i].prompt = std::make_pair(prompt.rendered_positive(), prompt.rendered_negative());
                GenerationRequest req = make_request(prompt);
                for (const auto& r : s.reference_images) req.input_images.push_back(image_path(r).string());
                for (const auto& p : gateway_->generate(req, age_dir / "generated" / label, s.subject_id))
                    slots[i].images.push_back({fs::relative(p, age_dir).generic_string(), sha256_hex(detail::read_file(p))});
            } catch (const ProtocolError& e) {
                slots[i].protocol_error = s.subject_id + ": " + e.what();
            } catch (const Error& e) {
                slots[i].skipped = Skip{s.subject_id, label, e.what()};
            }
        });
        for (std::size_t i = 0; i < slots.size(); ++i) {
            const auto& id = subjects_[i].subject_id;
            if (slots[i].prompt) out.manifest.prompts[id] = *slots[i].prompt;
            if (!slots[i].images.empty()) out.manifest.arms[label][id] = slots[i].images;
            if (slots[i].skipped) out.manifest.skipped.push_back(*slots[i].skipped);
            if (slots[i].protocol_error && !out.manifest.failed_arms.count(label))
                out.manifest.failed_arms[label] = *slots[i].protocol_error;
        }
        if (out.manifest.failed_arms.count(label)) out.manifest.arms.erase(label);
        out.manifest.save(age_dir / "manifest.json");

        out.reid.failed_arms = out.manifest.failed_arms;
        if (out.manifest.arms.count(label)) {
            std::map<std::string, std::vector<fs::path>> targets;
            for (const auto& s : subjects_)
                for (const auto& p : s.target_images) targets[s.subject_id].push_back(image_path(p));
            std::map<std::string, std::vector<fs::path>> probes;
            for (const auto& [id, imgs] : out.manifest.arms.at(label))
                for (const auto& i : imgs) probes[id].push_back(out.manifest.resolve(i));
            evaluate_arm(label, targets, probes, age_dir / "reid", out.reid);
        }
        write_reid_summary(out.reid, age_dir / "reid");
        return out;
    }

    /// Runs every stage whose backends are configured and writes run_report.json.
    nlohmann::json run_all() {
        nlohmann::json report = {{"journal", "journal.jsonl"}};
        bool ran = false;
        if (gateway_->configured(BackendKind::Describe)) {
            auto d = run_describe();
            report["describe"] = {{"reports", "describe/reports.json"},
                                  {"cohort", to_json(*d.cohort, cfg_.describer_label)},
                                  {"failures", d.failures.size()}};
            ran = true;
        }
        if (gateway_->configured(BackendKind::Generate)) {
            auto m = run_augment();
            report["augment"] = {{"manifest", "augment/manifest.json"},
                                 {"images", m.image_count()},
                                 {"skipped", m.skipped.size()},
                                 {"failed_arms", m.failed_arms}};
            check_manifest_files(m);
            ran = true;
            if (gateway_->configured(BackendKind::Embed)) {
                if (m.image_count() > 0) report["reid"] = reid_json(run_reid(m), "reid");
                if (cfg_.aging.target_age) {
                    auto a = run_age(*cfg_.aging.target_age, cfg_.aging.direction);
                    check_manifest_files(a.manifest);
                    report["age"] = {{"manifest", "age/manifest.json"},
                                     {"direction", direction_label(cfg_.aging.direction)},
                                     {"target_age", *cfg_.aging.target_age},
                                     {"reid", reid_json(a.reid, "age/reid")}};
                }
            }
        }
        if (!ran) throw ConfigError("no describe or generate backend configured; nothing to run");
        detail::write_file((cfg_.output_dir / "run_report.json").string(), report.dump(2) + "\n");
        return report;
    }

private:
    fs::path image_path(const std::string& p) const { return detail::resolve(dataset_dir_, p); }

    std::string relative_to_out(const std::string& p) const {
        return fs::relative(p, cfg_.output_dir).generic_string();
    }

    void require(BackendKind k) const {
        if (!gateway_->configured(k))
            throw ConfigError(std::string(kind_key(k)) + " backend is not configured (use --fixtures or a url)");
    }

    void require_verification_setting() const {
        if (!cfg_.reid.threshold && !cfg_.reid.sweep)
            throw ValidationError("re-identification needs --threshold or --sweep");
    }

    GenerationRequest make_request(const PromptSpec& prompt) const {
        GenerationRequest req;
        req.prompt = prompt;
        req.sample_steps = cfg_.sample_steps;
        req.style_strength_percent = cfg_.style_strength;
        req.count = cfg_.count;
        return req;
    }

    [[noreturn]] static void rethrow_as(const Failure& f) {
        const auto msg = f.subject_id + " (" + f.arm + "): " + f.error;
        switch (f.exit_code) {
            case exit_code::gateway: throw GatewayError(msg);
            case exit_code::protocol: throw ProtocolError(msg);
            case exit_code::validation: throw ValidationError(msg);
            default: throw Error(msg);
        }
    }

    std::string enhanced(const std::string& ref, EnhanceMethod m) {
        const auto key = ref + "|" + std::string(method_key(m));
        {
            std::lock_guard lock(cache_mutex_);
            if (auto it = enhanced_cache_.find(key); it != enhanced_cache_.end()) return it->second;
        }
        auto path = gateway_->enhance(image_path(ref).string(), m, cfg_.output_dir / "enhanced" / std::string(method_key(m)));
        std::lock_guard lock(cache_mutex_);
        enhanced_cache_.emplace(key, path);
        return path;
    }

    Embedding embedding(const fs::path& image, const std::string& subject_id, Provenance prov) {
        const auto key = fs::absolute(image).lexically_normal().string();
        {
            std::lock_guard lock(cache_mutex_);
            if (auto it = embedding_cache_.find(key); it != embedding_cache_.end()) {
                auto e = it->second;
                e.subject_id = subject_id;
                e.provenance = prov;
                return e;
            }
        }
        auto e = gateway_->embed(image.string(), subject_id, prov);
        std::lock_guard lock(cache_mutex_);
        embedding_cache_.emplace(key, e);
        return e;
    }

    std::vector<std::string> previously_generated(const std::optional<AugmentManifest>& prior, const fs::path& manifest_dir,
                                                  const std::map<std::string, std::vector<ManifestImage>>& current,
                                                  const std::string& subject_id) const {
        std::vector<std::string> out;
        const std::string only(arm_key(ExperimentArm::OriginalOnly));
        if (prior) {
            auto arm = prior->arms.find(only);
            if (arm != prior->arms.end()) {
                auto it = arm->second.find(subject_id);
                if (it != arm->second.end())
                    for (const auto& i : it->second) out.push_back(prior->resolve(i).string());
            }
            return out;
        }
        if (auto it = current.find(only); it != current.end())
            for (const auto& i : it->second) out.push_back((manifest_dir / i.path).string());
        return out;
    }

    MatrixSummary summarize(ConfusionMatrix m, std::optional<double> threshold) const {
        MatrixSummary s;
        s.identification_accuracy = identification_accuracy(m);
        s.mean_genuine = mean_genuine_score(m);
        if (threshold) s.verification = verification_metrics(m, *threshold);
        if (cfg_.reid.sweep) s.sweep = threshold_sweep(m);
        s.matrix = std::move(m);
        return s;
    }

    void evaluate_arm(const std::string& arm, const std::map<std::string, std::vector<fs::path>>& refs,
                      const std::map<std::string, std::vector<fs::path>>& probes, const fs::path& dir, ReidOutcome& out) {
        try {
            std::vector<std::pair<std::string, fs::path>> ref_jobs, probe_jobs;
            for (const auto& [id, paths] : probes) {
                auto r = refs.find(id);
                if (r == refs.end() || r->second.empty()) continue;
                for (const auto& p : r->second) ref_jobs.emplace_back(id, p);
                for (const auto& p : paths) probe_jobs.emplace_back(id, p);
            }
            if (probe_jobs.empty()) throw ValidationError("arm " + arm + " has no subject with both references and probes");
            std::vector<Embedding> ref_emb(ref_jobs.size()), probe_emb(probe_jobs.size());
            detail::parallel_for(ref_jobs.size(), cfg_.workers, [&](std::size_t i) {
                ref_emb[i] = embedding(ref_jobs[i].second, ref_jobs[i].first, Provenance::Original);
            });
            detail::parallel_for(probe_jobs.size(), cfg_.workers, [&](std::size_t i) {
                probe_emb[i] = embedding(probe_jobs[i].second, probe_jobs[i].first, Provenance::Generated);
            });
            const auto ref_groups = group_by_subject(ref_emb);
            const auto probe_groups = group_by_subject(probe_emb);
            ArmEvaluation ev;
            ev.arm = arm;
            ev.distance = summarize(build_confusion_matrix(ref_groups, probe_groups, Semantics::Distance, cfg_.reid.aggregation),
                                    cfg_.reid.threshold);
            ev.similarity = summarize(build_confusion_matrix(ref_groups, probe_groups, Semantics::Similarity, cfg_.reid.aggregation),
                                      cfg_.reid.similarity_threshold);
            fs::create_directories(dir);
            for (const auto* s : {&ev.distance, &ev.similarity}) {
                const auto sem = std::string(semantics_key(s->matrix.semantics));
                detail::write_file((dir / (arm + "_" + sem + ".csv")).string(), to_csv(s->matrix));
                if (!s->sweep.empty())
                    detail::write_file((dir / (arm + "_" + sem + "_sweep.csv")).string(), sweep_to_csv(s->sweep));
            }
            out.arms.push_back(std::move(ev));
        } catch (const ProtocolError& e) {
            out.failed_arms[arm] = e.what();
        } catch (const EvaluationError& e) {
            out.failed_arms[arm] = e.what();
        }
    }

    static nlohmann::json summary_json(const MatrixSummary& s, const std::string& file, const std::string& sweep_file) {
        nlohmann::json j = {{"matrix_file", file},
                            {"matrix", to_json(s.matrix)},
                            {"identification_accuracy", s.identification_accuracy},
                            {"mean_genuine_score", s.mean_genuine}};
        j["verification"] = s.verification ? to_json(*s.verification) : nlohmann::json(nullptr);
        j["sweep_file"] = s.sweep.empty() ? nlohmann::json(nullptr) : nlohmann::json(sweep_file);
        return j;
    }

    static nlohmann::json reid_json(const ReidOutcome& r, const std::string& prefix) {
        nlohmann::json arms = nlohmann::json::object();
        for (const auto& ev : r.arms) {
            arms[ev.arm] = {
                {"distance", summary_json(ev.distance, prefix + "/" + ev.arm + "_distance.csv",
                                          prefix + "/" + ev.arm + "_distance_sweep.csv")},
                {"similarity", summary_json(ev.similarity, prefix + "/" + ev.arm + "_similarity.csv",
                                            prefix + "/" + ev.arm + "_similarity_sweep.csv")}};
        }
        return {{"arms", arms}, {"failed_arms", r.failed_arms}};
    }

    static void write_reid_summary(const ReidOutcome& r, const fs::path& dir) {
        fs::create_directories(dir);
        detail::write_file((dir / "reid.json").string(), reid_json(r, ".").dump(2) + "\n");
    }

    static void check_manifest_files(const AugmentManifest& m) {
        for (const auto& [_, subjects] : m.arms)
            for (const auto& [__, imgs] : subjects)
                for (const auto& i : imgs)
                    if (!fs::is_regular_file(m.resolve(i)))
                        throw ValidationError("generated image missing on disk: " + m.resolve(i).string());
    }

    PipelineConfig cfg_;
    fs::path dataset_dir_;
    std::vector<SubjectRecord> subjects_;
    PromptTemplates templates_ = PromptTemplates::defaults();
    std::unique_ptr<ModelGateway> gateway_;
    std::mutex cache_mutex_;
    std::map<std::string, std::string> enhanced_cache_;
    std::map<std::string, Embedding> embedding_cache_;
};

}  // namespace mugshot
