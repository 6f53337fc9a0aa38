#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "attribute_model.hpp"
#include "detail/text.hpp"
#include "digest.hpp"
#include "error.hpp"
#include "image.hpp"
#include "prompt_forge.hpp"
#include "reid_eval.hpp"
#include "tv_denoise.hpp"

namespace mugshot {

namespace fs = std::filesystem;

enum class BackendKind { Enhance, Describe, Generate, Embed };

inline constexpr std::array<BackendKind, 4> kAllBackendKinds = {BackendKind::Enhance, BackendKind::Describe,
                                                                 BackendKind::Generate, BackendKind::Embed};

inline constexpr std::string_view kind_key(BackendKind k) {
    constexpr std::array<std::string_view, 4> keys = {"enhance", "describe", "generate", "embed"};
    return keys[static_cast<std::size_t>(k)];
}

inline BackendKind parse_kind(std::string_view s) {
    for (auto k : kAllBackendKinds)
        if (kind_key(k) == s) return k;
    throw ConfigError("unknown backend kind '" + std::string(s) + "'");
}

enum class EnhanceMethod { Maxim, Srgan, TvDenoise };

inline constexpr std::string_view method_key(EnhanceMethod m) {
    switch (m) {
        case EnhanceMethod::Maxim: return "maxim";
        case EnhanceMethod::Srgan: return "srgan";
        case EnhanceMethod::TvDenoise: return "tvd";
    }
    return "";
}

inline EnhanceMethod parse_method(std::string_view s) {
    const auto k = detail::to_lower(s);
    if (k == "maxim") return EnhanceMethod::Maxim;
    if (k == "srgan") return EnhanceMethod::Srgan;
    if (k == "tvd" || k == "tvdenoise" || k == "tv_denoise" || k == "tv") return EnhanceMethod::TvDenoise;
    throw ConfigError("unknown enhancement method '" + std::string(s) + "'");
}

inline constexpr Provenance provenance_of(EnhanceMethod m) {
    switch (m) {
        case EnhanceMethod::Maxim: return Provenance::Maxim;
        case EnhanceMethod::Srgan: return Provenance::Srgan;
        case EnhanceMethod::TvDenoise: return Provenance::TvDenoise;
    }
    return Provenance::Original;
}

inline constexpr std::size_t kDefaultMaxImageBytes = 8u << 20;

struct BackendEndpoint {
    BackendKind kind = BackendKind::Describe;
    std::string url;
    std::string fixture_dir;  // root holding <kind>/<digest>.json
    double timeout_s = 30.0;
    int max_retries = 2;
    int max_in_flight = 4;
    int retry_backoff_ms = 200;
    std::string bearer_token;

    void validate() const {
        const auto name = std::string(kind_key(kind));
        if (url.empty() == fixture_dir.empty())
            throw ConfigError(name + " endpoint needs exactly one of url or fixture directory");
        if (!(timeout_s > 0.0)) throw ConfigError(name + " endpoint timeout must be > 0");
        if (max_retries < 0) throw ConfigError(name + " endpoint max_retries must be >= 0");
        if (max_in_flight < 1) throw ConfigError(name + " endpoint max_in_flight must be >= 1");
        if (retry_backoff_ms < 0) throw ConfigError(name + " endpoint retry backoff must be >= 0");
    }
};

inline constexpr int kDefaultSampleSteps = 50;
inline constexpr int kDefaultStyleStrength = 20;

struct GenerationRequest {
    std::vector<std::string> input_images;
    PromptSpec prompt;
    int sample_steps = kDefaultSampleSteps;
    int style_strength_percent = kDefaultStyleStrength;
    int count = 4;

    void validate() const {
        if (input_images.empty()) throw UsageError("generation needs at least one input image");
        if (sample_steps < 1) throw UsageError("sample_steps must be >= 1");
        if (style_strength_percent < 0 || style_strength_percent > 100)
            throw UsageError("style strength must be within 0..100 percent");
        if (count < 1) throw UsageError("generation count must be >= 1");
    }

    /// Canonical parameters; also the fixture-key salt.
    nlohmann::json params() const {
        return {{"prompt", prompt.rendered_positive()},
                {"negative_prompt", prompt.rendered_negative()},
                {"sample_steps", sample_steps},
                {"style_strength", style_strength_percent},
                {"count", count}};
    }
};

/// Fixture key: SHA-256 over the hex digests of the input images (one per line)
/// followed by the canonical JSON dump of the request parameters.
inline std::string request_digest(const std::vector<std::string>& input_digests, const nlohmann::json& params) {
    std::string material;
    for (const auto& d : input_digests) material += d + "\n";
    material += params.dump();
    return sha256_hex(material);
}

// ---- run journal ---------------------------------------------------------------

/// Append-only JSONL log with serialized writes. Records carry a sequence number and a timestamp.
class RunJournal {
public:
    explicit RunJournal(fs::path path) : path_(std::move(path)) {
        if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
        out_.open(path_, std::ios::app);
        if (!out_) throw ValidationError("cannot open run journal " + path_.string());
    }

    void append(nlohmann::json record) {
        std::lock_guard lock(mutex_);
        record["seq"] = ++seq_;
        record["time"] = now_iso8601();
        out_ << record.dump() << '\n';
        out_.flush();
    }

    std::size_t size() const {
        std::lock_guard lock(mutex_);
        return seq_;
    }

    const fs::path& path() const { return path_; }

    static std::vector<nlohmann::json> read(const fs::path& path) {
        std::vector<nlohmann::json> out;
        for (const auto& line : detail::split(detail::read_file(path.string()), '\n')) {
            if (detail::trim(line).empty()) continue;
            try {
                out.push_back(nlohmann::json::parse(line));
            } catch (const nlohmann::json::exception& e) {
                throw ValidationError("malformed journal line in " + path.string() + ": " + e.what());
            }
        }
        return out;
    }

private:
    static std::string now_iso8601() {
        const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
        std::tm tm{};
        gmtime_r(&t, &tm);
        char buf[32];
        std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
        return buf;
    }

    fs::path path_;
    std::ofstream out_;
    mutable std::mutex mutex_;
    std::size_t seq_ = 0;
};

// ---- transports ----------------------------------------------------------------

struct CallResult {
    nlohmann::json response;
    int attempts = 1;
};

class Transport {
public:
    virtual ~Transport() = default;
    virtual CallResult call(BackendKind kind, const nlohmann::json& body, const std::string& digest) = 0;
    virtual std::string_view name() const = 0;
};

/// Serves canned responses from <root>/<kind>/<digest>.json. Never writes.
class FixtureTransport : public Transport {
public:
    explicit FixtureTransport(fs::path root) : root_(std::move(root)) {}

    CallResult call(BackendKind kind, const nlohmann::json&, const std::string& digest) override {
        const auto path = fixture_path(root_, kind, digest);
        if (!fs::exists(path))
            throw GatewayError("no " + std::string(kind_key(kind)) + " fixture for request " + digest + " (" +
                               path.string() + ")");
        try {
            return {nlohmann::json::parse(detail::read_file(path.string())), 1};
        } catch (const nlohmann::json::exception& e) {
            throw ProtocolError("malformed fixture " + path.string() + ": " + e.what());
        }
    }

    std::string_view name() const override { return "fixture"; }

    static fs::path fixture_path(const fs::path& root, BackendKind kind, const std::string& digest) {
        return root / std::string(kind_key(kind)) / (digest + ".json");
    }

private:
    fs::path root_;
};

/// JSON over HTTP: POST <url>/<kind>. Connection failures and 5xx answers are
/// retried up to max_retries times; 4xx answers fail immediately.
class HttpTransport : public Transport {
public:
    explicit HttpTransport(BackendEndpoint ep) : ep_(std::move(ep)) {
        ep_.validate();
        const auto scheme_end = ep_.url.find("://");
        const auto path_start = ep_.url.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
        host_ = ep_.url.substr(0, path_start);
        prefix_ = path_start == std::string::npos ? "" : ep_.url.substr(path_start);
        while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
    }

    CallResult call(BackendKind kind, const nlohmann::json& body, const std::string&) override {
        const auto route = prefix_ + "/" + std::string(kind_key(kind));
        const auto payload = body.dump();
        const int attempts_allowed = ep_.max_retries + 1;
        std::string last_error;
        for (int attempt = 1; attempt <= attempts_allowed; ++attempt) {
            ++attempts_made_;
            httplib::Client cli(host_);
            const auto timeout = std::chrono::duration<double>(ep_.timeout_s);
            cli.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
            cli.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
            cli.set_write_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
            httplib::Headers headers;
            if (!ep_.bearer_token.empty()) headers.emplace("Authorization", "Bearer " + ep_.bearer_token);
            auto res = cli.Post(route, headers, payload, "application/json");
            if (!res) {
                last_error = "transport error: " + httplib::to_string(res.error());
            } else if (res->status >= 500) {
                last_error = "HTTP " + std::to_string(res->status);
            } else if (res->status != 200) {
                throw GatewayError(ep_.url + route + " answered HTTP " + std::to_string(res->status));
            } else {
                try {
                    return {nlohmann::json::parse(res->body), attempt};
                } catch (const nlohmann::json::exception& e) {
                    throw ProtocolError(ep_.url + route + " returned malformed JSON: " + e.what());
                }
            }
            if (attempt < attempts_allowed && ep_.retry_backoff_ms > 0)
                std::this_thread::sleep_for(std::chrono::milliseconds(ep_.retry_backoff_ms * attempt));
        }
        throw GatewayError(ep_.url + route + " unreachable after " + std::to_string(attempts_allowed) +
                           " attempts (" + last_error + ")");
    }

    std::string_view name() const override { return "http"; }

    int attempts_made() const { return attempts_made_.load(); }

private:
    BackendEndpoint ep_;
    std::string host_;
    std::string prefix_;
    std::atomic<int> attempts_made_{0};
};

/// Wraps another transport and stores every successful response in fixture layout.
class RecordingTransport : public Transport {
public:
    RecordingTransport(std::shared_ptr<Transport> inner, fs::path root) : inner_(std::move(inner)), root_(std::move(root)) {}

    CallResult call(BackendKind kind, const nlohmann::json& body, const std::string& digest) override {
        auto result = inner_->call(kind, body, digest);
        const auto path = FixtureTransport::fixture_path(root_, kind, digest);
        fs::create_directories(path.parent_path());
        detail::write_file(path.string(), result.response.dump());
        return result;
    }

    std::string_view name() const override { return inner_->name(); }

private:
    std::shared_ptr<Transport> inner_;
    fs::path root_;
};

/// Answers requests from the journal of an earlier run. Image outputs are read
/// back from the files the journal references and checked against their digests.
class ReplayTransport : public Transport {
public:
    explicit ReplayTransport(const fs::path& journal) {
        for (auto& rec : RunJournal::read(journal)) {
            if (rec.value("status", "") != "ok" || rec.value("backend", "") == "native") continue;
            const auto key = rec.value("kind", "") + "/" + rec.value("request_digest", "");
            records_.emplace(key, std::move(rec));
        }
    }

    CallResult call(BackendKind kind, const nlohmann::json&, const std::string& digest) override {
        auto it = records_.find(std::string(kind_key(kind)) + "/" + digest);
        if (it == records_.end())
            throw GatewayError("journal holds no " + std::string(kind_key(kind)) + " response for request " + digest);
        const auto& rec = it->second;
        if (rec.contains("response")) return {rec.at("response"), 1};
        std::vector<std::string> images;
        for (const auto& out : rec.at("outputs")) {
            const auto bytes = detail::read_file(out.at("path").get<std::string>());
            if (sha256_hex(bytes) != out.at("sha256").get<std::string>())
                throw ProtocolError("replayed output " + out.at("path").get<std::string>() + " changed since recording");
            images.push_back(base64_encode(bytes));
        }
        if (kind == BackendKind::Enhance) return {{{"image_b64", images.at(0)}}, 1};
        return {{{"images_b64", images}}, 1};
    }

    std::string_view name() const override { return "replay"; }

private:
    std::map<std::string, nlohmann::json> records_;
};

inline std::shared_ptr<Transport> make_transport(const BackendEndpoint& ep) {
    ep.validate();
    if (!ep.fixture_dir.empty()) return std::make_shared<FixtureTransport>(ep.fixture_dir);
    return std::make_shared<HttpTransport>(ep);
}

// ---- gateway -------------------------------------------------------------------

struct GatewayOptions {
    std::optional<fs::path> journal_path;
    DenoiseParams denoise;
    SynonymTable synonyms = SynonymTable::defaults();
    std::size_t max_image_bytes = kDefaultMaxImageBytes;
};

/// Uniform client over the four model backends. Safe for concurrent use: each
/// backend has an in-flight cap and the journal serializes writes.
class ModelGateway {
public:
    explicit ModelGateway(GatewayOptions opts = {}) : opts_(std::move(opts)) {
        if (opts_.journal_path) journal_ = std::make_unique<RunJournal>(*opts_.journal_path);
    }

    void attach(BackendKind kind, std::shared_ptr<Transport> transport, int max_in_flight = 4) {
        if (max_in_flight < 1) throw ConfigError("max_in_flight must be >= 1");
        auto& slot = backends_[static_cast<std::size_t>(kind)];
        slot.transport = std::move(transport);
        slot.in_flight = std::make_unique<std::counting_semaphore<1024>>(max_in_flight);
    }

    void attach(const BackendEndpoint& ep) { attach(ep.kind, make_transport(ep), ep.max_in_flight); }

    bool configured(BackendKind kind) const { return backends_[static_cast<std::size_t>(kind)].transport != nullptr; }

    const RunJournal* journal() const { return journal_.get(); }
    const GatewayOptions& options() const { return opts_; }

    /// TvDenoise runs natively; the other methods go to the Enhance backend.
    std::string enhance(const std::string& image_path, EnhanceMethod method, const fs::path& out_dir) {
        const auto bytes = read_image(image_path);
        const auto in_digest = sha256_hex(bytes);
        const nlohmann::json params = {{"method", method_key(method)}};
        const auto digest = request_digest({in_digest}, params);
        nlohmann::json rec = base_record(BackendKind::Enhance, digest, params, {{image_path, in_digest}});

        if (method == EnhanceMethod::TvDenoise) {
            rec["backend"] = "native";
            return finish(rec, [&] {
                std::string out_bytes;
                switch (sniff_format(bytes)) {
                    case ImageFormat::Pgm: out_bytes = encode_pgm(denoise(decode_pgm(bytes), opts_.denoise)); break;
                    case ImageFormat::Png: out_bytes = encode_png(denoise_rgb(decode_png(bytes), opts_.denoise)); break;
                    default: throw ValidationError("TV denoising supports PGM and PNG input only: " + image_path);
                }
                auto path = write_output(out_dir, output_stem(image_path, method, digest), out_bytes);
                rec["outputs"] = {{{"path", path}, {"sha256", sha256_hex(out_bytes)}}};
                return path;
            });
        }

        nlohmann::json body = {{"image_b64", base64_encode(bytes)}, {"method", method_key(method)}};
        return finish(rec, [&] {
            auto res = dispatch(BackendKind::Enhance, body, digest, rec);
            const auto& r = res.response;
            if (!r.is_object() || !r.contains("image_b64") || !r.at("image_b64").is_string())
                throw ProtocolError("enhance response lacks image_b64");
            const auto out_bytes = decode_image_payload(r.at("image_b64").get<std::string>());
            auto path = write_output(out_dir, output_stem(image_path, method, digest), out_bytes);
            rec["outputs"] = {{{"path", path}, {"sha256", sha256_hex(out_bytes)}}};
            return path;
        });
    }

    /// One answer per question, in category order. Empty or null answers become unknown.
    AttributeDescription describe(const std::string& image_path, const std::vector<std::string>& questions,
                                  const std::string& subject_id, Provenance provenance) {
        if (questions.size() != kCategoryCount)
            throw UsageError("describe expects one question per category (" + std::to_string(kCategoryCount) + ")");
        const auto bytes = read_image(image_path);
        const auto in_digest = sha256_hex(bytes);
        const nlohmann::json params = {{"questions", questions}};
        const auto digest = request_digest({in_digest}, params);
        nlohmann::json rec = base_record(BackendKind::Describe, digest, params, {{image_path, in_digest}});
        nlohmann::json body = {{"image_b64", base64_encode(bytes)}, {"questions", questions}};
        return finish(rec, [&] {
            auto res = dispatch(BackendKind::Describe, body, digest, rec);
            const auto& r = res.response;
            if (!r.is_object() || !r.contains("answers") || !r.at("answers").is_array())
                throw ProtocolError("describe response lacks an answers array");
            const auto& answers = r.at("answers");
            if (answers.size() != questions.size())
                throw ProtocolError("describe returned " + std::to_string(answers.size()) + " answers for " +
                                    std::to_string(questions.size()) + " questions");
            rec["response"] = r;
            AttributeDescription d;
            d.subject_id = subject_id;
            d.source_image = image_path;
            d.provenance = provenance;
            for (auto c : kAllCategories) {
                const auto& a = answers[index_of(c)];
                std::string raw;
                if (a.is_string())
                    raw = a.get<std::string>();
                else if (a.is_number())
                    raw = detail::format_number(a.get<double>());
                else if (!a.is_null())
                    throw ProtocolError("describe answer for " + std::string(category_key(c)) + " is not text");
                d.attributes.set(normalize_value(c, raw, opts_.synonyms));
            }
            return d;
        });
    }

    /// Writes `count` images into out_dir plus a <prefix>_<digest>.request.json sidecar.
    std::vector<std::string> generate(const GenerationRequest& request, const fs::path& out_dir,
                                      const std::string& prefix) {
        request.validate();
        std::vector<std::string> blobs;
        std::vector<std::string> digests;
        std::vector<std::pair<std::string, std::string>> inputs;
        for (const auto& p : request.input_images) {
            blobs.push_back(read_image(p));
            digests.push_back(sha256_hex(blobs.back()));
            inputs.emplace_back(p, digests.back());
        }
        const auto params = request.params();
        const auto digest = request_digest(digests, params);
        nlohmann::json rec = base_record(BackendKind::Generate, digest, params, inputs);

        nlohmann::json body = params;
        body["images_b64"] = nlohmann::json::array();
        for (const auto& b : blobs) body["images_b64"].push_back(base64_encode(b));

        return finish(rec, [&] {
            auto res = dispatch(BackendKind::Generate, body, digest, rec);
            const auto& r = res.response;
            if (!r.is_object() || !r.contains("images_b64") || !r.at("images_b64").is_array())
                throw ProtocolError("generate response lacks an images_b64 array");
            const auto& imgs = r.at("images_b64");
            if (imgs.size() < static_cast<std::size_t>(request.count))
                throw ProtocolError("generate returned " + std::to_string(imgs.size()) + " images, " +
                                    std::to_string(request.count) + " requested");
            const auto stem = prefix + "_" + digest.substr(0, 12);
            std::vector<std::string> paths;
            nlohmann::json outputs = nlohmann::json::array();
            nlohmann::json sidecar_outputs = nlohmann::json::array();
            for (int k = 0; k < request.count; ++k) {
                if (!imgs[static_cast<std::size_t>(k)].is_string()) throw ProtocolError("generated image is not base64 text");
                const auto out_bytes = decode_image_payload(imgs[static_cast<std::size_t>(k)].get<std::string>());
                auto path = write_output(out_dir, stem + "_" + std::to_string(k), out_bytes);
                outputs.push_back({{"path", path}, {"sha256", sha256_hex(out_bytes)}});
                sidecar_outputs.push_back({{"file", fs::path(path).filename().string()}, {"sha256", sha256_hex(out_bytes)}});
                paths.push_back(std::move(path));
            }
            nlohmann::json sidecar = params;
            sidecar["request_digest"] = digest;
            sidecar["inputs"] = nlohmann::json::array();
            for (const auto& [p, d] : inputs)
                sidecar["inputs"].push_back({{"file", fs::path(p).filename().string()}, {"sha256", d}});
            sidecar["outputs"] = sidecar_outputs;
            detail::write_file((out_dir / (stem + ".request.json")).string(), sidecar.dump(2) + "\n");
            rec["outputs"] = outputs;
            return paths;
        });
    }

    Embedding embed(const std::string& image_path, const std::string& subject_id, Provenance provenance) {
        const auto bytes = read_image(image_path);
        const auto in_digest = sha256_hex(bytes);
        const nlohmann::json params = nlohmann::json::object();
        const auto digest = request_digest({in_digest}, params);
        nlohmann::json rec = base_record(BackendKind::Embed, digest, params, {{image_path, in_digest}});
        nlohmann::json body = {{"image_b64", base64_encode(bytes)}};
        return finish(rec, [&] {
            auto res = dispatch(BackendKind::Embed, body, digest, rec);
            const auto& r = res.response;
            if (!r.is_object() || !r.contains("vector") || !r.at("vector").is_array())
                throw ProtocolError("embed response lacks a vector");
            Embedding e;
            e.subject_id = subject_id;
            e.image = image_path;
            e.provenance = provenance;
            for (const auto& v : r.at("vector")) {
                if (!v.is_number()) throw ProtocolError("embedding of " + image_path + " has a non-numeric entry");
                const double x = v.get<double>();
                if (!std::isfinite(x)) throw ProtocolError("embedding of " + image_path + " has a non-finite value");
                e.vector.push_back(x);
            }
            if (e.vector.empty()) throw ProtocolError("embedding of " + image_path + " is empty");
            if (r.contains("dimension") && r.at("dimension").get<std::size_t>() != e.vector.size())
                throw ProtocolError("embedding of " + image_path + " declares dimension " +
                                    std::to_string(r.at("dimension").get<std::size_t>()) + " but has " +
                                    std::to_string(e.vector.size()) + " values");
            check_dimension(e.vector.size(), image_path);
            rec["response"] = r;
            return e;
        });
    }

    /// Dimension fixed by the first embedding of the run, if any.
    std::optional<std::size_t> embedding_dimension() const {
        std::lock_guard lock(dim_mutex_);
        return dimension_;
    }

private:
    struct Backend {
        std::shared_ptr<Transport> transport;
        std::unique_ptr<std::counting_semaphore<1024>> in_flight;
    };

    std::string read_image(const std::string& path) const {
        std::error_code ec;
        if (!fs::is_regular_file(path, ec)) throw ValidationError("image not readable: " + path);
        auto bytes = detail::read_file(path);
        if (bytes.size() > opts_.max_image_bytes)
            throw ValidationError("image " + path + " exceeds the " + std::to_string(opts_.max_image_bytes) +
                                  "-byte transfer cap");
        return bytes;
    }

    std::string decode_image_payload(const std::string& b64) const {
        auto bytes = base64_decode(b64);
        if (bytes.empty()) throw ProtocolError("backend returned an empty image");
        if (bytes.size() > opts_.max_image_bytes) throw ProtocolError("backend image exceeds the transfer cap");
        return bytes;
    }

    static std::string output_stem(const std::string& input, EnhanceMethod m, const std::string& digest) {
        return fs::path(input).stem().string() + "." + std::string(method_key(m)) + "." + digest.substr(0, 8);
    }

    static std::string write_output(const fs::path& dir, const std::string& stem, const std::string& bytes) {
        fs::create_directories(dir);
        const auto path = dir / (stem + std::string(extension_for(sniff_format(bytes))));
        detail::write_file(path.string(), bytes);
        return path.string();
    }

    nlohmann::json base_record(BackendKind kind, const std::string& digest, const nlohmann::json& params,
                               const std::vector<std::pair<std::string, std::string>>& inputs) const {
        nlohmann::json in = nlohmann::json::array();
        for (const auto& [p, d] : inputs) in.push_back({{"path", fs::absolute(p).string()}, {"sha256", d}});
        return {{"kind", kind_key(kind)}, {"request_digest", digest}, {"params", params}, {"inputs", in}};
    }

    CallResult dispatch(BackendKind kind, const nlohmann::json& body, const std::string& digest, nlohmann::json& rec) {
        auto& b = backends_[static_cast<std::size_t>(kind)];
        if (!b.transport) throw ConfigError(std::string(kind_key(kind)) + " backend is not configured");
        rec["backend"] = std::string(b.transport->name());
        b.in_flight->acquire();
        struct Release {
            std::counting_semaphore<1024>& s;
            ~Release() { s.release(); }
        } release{*b.in_flight};
        auto res = b.transport->call(kind, body, digest);
        rec["attempts"] = res.attempts;
        return res;
    }

    // Runs `fn` and appends exactly one journal record for the call, success or not.
    template <typename Fn>
    auto finish(nlohmann::json& rec, Fn&& fn) -> decltype(fn()) {
        try {
            auto out = fn();
            if (rec.contains("outputs"))
                for (auto& o : rec["outputs"]) o["path"] = fs::absolute(o["path"].get<std::string>()).string();
            rec["status"] = "ok";
            if (journal_) journal_->append(rec);
            return out;
        } catch (const std::exception& e) {
            rec["status"] = "error";
            rec["error"] = e.what();
            if (journal_) journal_->append(rec);
            throw;
        }
    }

    void check_dimension(std::size_t dim, const std::string& image) {
        std::lock_guard lock(dim_mutex_);
        if (!dimension_) dimension_ = dim;
        if (*dimension_ != dim)
            throw ProtocolError("embedding of " + image + " has dimension " + std::to_string(dim) +
                                ", earlier embeddings in this run have " + std::to_string(*dimension_));
    }

    GatewayOptions opts_;
    std::unique_ptr<RunJournal> journal_;
    std::array<Backend, 4> backends_;
    mutable std::mutex dim_mutex_;
    std::optional<std::size_t> dimension_;
};

}  // namespace mugshot
