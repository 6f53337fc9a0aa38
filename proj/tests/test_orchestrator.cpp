#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>

#include <mugshot/orchestrator.hpp>

#include "support/synthetic.hpp"

using namespace mugshot;
namespace mt = mugshot::testing;
using mt::TempDir;

namespace {

struct CliResult {
    int code;
    std::string output;
};

CliResult run_cli(const std::string& args, const fs::path& scratch) {
    const auto log = scratch / "cli.log";
    const auto cmd = std::string(MUGSHOT_CLI_PATH) + " " + args + " > '" + log.string() + "' 2>&1";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, fs::exists(log) ? detail::read_file(log.string()) : ""};
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

std::vector<std::string> files_under(const fs::path& root) {
    std::vector<std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root).generic_string());
    std::sort(out.begin(), out.end());
    return out;
}

// Every report file except the journal, whose timestamps differ between runs.
void expect_same_reports(const fs::path& a, const fs::path& b) {
    auto fa = files_under(a), fb = files_under(b);
    ASSERT_EQ(fa, fb);
    for (const auto& f : fa) {
        if (f == "journal.jsonl" || f == "cli.log") continue;
        EXPECT_EQ(detail::read_file((a / f).string()), detail::read_file((b / f).string())) << f;
    }
}

class ScopedEnv {
public:
    ScopedEnv(const char* name, const std::string& value) : name_(name) { ::setenv(name, value.c_str(), 1); }
    ~ScopedEnv() { ::unsetenv(name_); }

private:
    const char* name_;
};

}  // namespace

TEST(Config, ParsesEverySection) {
    TempDir dir("cfg");
    const auto cfg = parse_pipeline_config(nlohmann::json::parse(R"({
        "dataset": "data/subjects.json",
        "output_dir": "runs/a",
        "enhancements": ["maxim", "tvd"],
        "describer_label": "qwen",
        "prompt": {"exclude_terms_add": ["tattoo"], "include_categories": ["gender", "age"], "max_length": 200},
        "generation": {"sample_steps": 30, "style_strength": 35, "count": 2, "arms": ["original_only"]},
        "reid": {"threshold": 0.4, "similarity_threshold": 0.8, "sweep": true, "aggregation": "min"},
        "aging": {"target_age": 70, "direction": "deage"},
        "denoise": {"iterations": 50, "lambda": 0.2},
        "endpoints": {"embed": {"url": "http://localhost:9000", "timeout": 5, "max_retries": 1}},
        "workers": 3
    })"), dir.path());
    EXPECT_EQ(cfg.dataset, dir / "data/subjects.json");
    EXPECT_EQ(cfg.output_dir, dir / "runs/a");
    EXPECT_EQ(cfg.enhancements, (std::vector<EnhanceMethod>{EnhanceMethod::Maxim, EnhanceMethod::TvDenoise}));
    EXPECT_EQ(cfg.describer_label, "qwen");
    EXPECT_EQ(cfg.prompt_rules.include.size(), 2u);
    EXPECT_EQ(cfg.prompt_max_length, 200u);
    EXPECT_EQ(cfg.sample_steps, 30);
    EXPECT_EQ(cfg.style_strength, 35);
    EXPECT_EQ(cfg.count, 2);
    EXPECT_EQ(cfg.arms, std::vector<ExperimentArm>{ExperimentArm::OriginalOnly});
    EXPECT_EQ(cfg.reid.threshold, 0.4);
    EXPECT_EQ(cfg.reid.aggregation, Aggregation::Min);
    EXPECT_EQ(cfg.aging.direction, AgingDirection::Deage);
    EXPECT_EQ(cfg.denoise.iterations, 50);
    EXPECT_EQ(cfg.denoise.lambda, 0.2);
    EXPECT_EQ(cfg.endpoints.at(BackendKind::Embed).max_retries, 1);
    EXPECT_EQ(cfg.workers, 3);
}

TEST(Config, Defaults) {
    const PipelineConfig cfg;
    EXPECT_EQ(cfg.sample_steps, 50);
    EXPECT_EQ(cfg.style_strength, 20);
    EXPECT_EQ(cfg.denoise.iterations, 200);
    EXPECT_EQ(cfg.arms, (std::vector<ExperimentArm>{ExperimentArm::OriginalOnly, ExperimentArm::OriginalGenerated}));
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
    EXPECT_THROW(parse_pipeline_config(nlohmann::json::parse(R"({"datset": "x"})")), ConfigError);
    EXPECT_THROW(parse_pipeline_config(nlohmann::json::parse(R"({"workers": "many"})")), ConfigError);
    EXPECT_THROW(parse_pipeline_config(nlohmann::json::parse(R"({"enhancements": ["sharpen"]})")), ConfigError);
    EXPECT_THROW(parse_pipeline_config(nlohmann::json::parse(R"([1, 2])")), ConfigError);
    TempDir dir("cfgbad");
    detail::write_file((dir / "c.json").string(), "{oops");
    EXPECT_THROW(load_pipeline_config(dir / "c.json"), ConfigError);
}

TEST(Config, ValidationCatchesMissingInputs) {
    TempDir dir("cfgval");
    PipelineConfig cfg;
    EXPECT_THROW(cfg.validate(), ValidationError);
    cfg.dataset = mt::write_demo_dataset(dir / "ds", 2);
    cfg.validate();
    cfg.arms = {ExperimentArm::OriginalEnhanced};
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg.arms = {ExperimentArm::OriginalOnly};
    cfg.use_fixtures(dir / "missing");
    EXPECT_THROW(cfg.validate(), ValidationError);
}

TEST(Config, EnvironmentOverrides) {
    PipelineConfig cfg;
    cfg.use_fixtures("/fixtures");
    ScopedEnv url("MUGSHOT_EMBED_URL", "http://embedder:8000");
    ScopedEnv token("MUGSHOT_BEARER_TOKEN", "tok");
    apply_env_overrides(cfg);
    EXPECT_EQ(cfg.endpoints.at(BackendKind::Embed).url, "http://embedder:8000");
    EXPECT_TRUE(cfg.endpoints.at(BackendKind::Embed).fixture_dir.empty());
    EXPECT_EQ(cfg.endpoints.at(BackendKind::Describe).fixture_dir, "/fixtures");
    EXPECT_EQ(cfg.endpoints.at(BackendKind::Describe).bearer_token, "tok");
}

TEST(Manifest, RoundTrip) {
    TempDir dir("manifest");
    AugmentManifest m;
    m.base_dir = dir.path();
    m.arms["original_only"]["p01"] = {{"generated/original_only/p01_0.pgm", "abc"}};
    m.prompts["p01"] = {"pos", "neg"};
    m.skipped.push_back({"p02", "*", "no reference images"});
    m.save(dir / "manifest.json");
    const auto back = AugmentManifest::load(dir / "manifest.json");
    EXPECT_EQ(back.to_json(), m.to_json());
    EXPECT_EQ(back.image_count(), 1u);
    EXPECT_EQ(back.resolve(back.arms.at("original_only").at("p01")[0]), dir / "generated/original_only/p01_0.pgm");
    detail::write_file((dir / "bad.json").string(), "[]");
    EXPECT_THROW(AugmentManifest::load(dir / "bad.json"), ValidationError);
}

TEST(Describe, TwoSubjectsOriginalAndTvd) {
    TempDir dir("describe");
    auto cfg = mt::demo_config(mt::write_demo_dataset(dir / "ds", 2), dir / "out");
    cfg.enhancements = {EnhanceMethod::TvDenoise};
    Pipeline p(cfg, mt::synthetic_transports(2));
    const auto d = p.run_describe();
    EXPECT_EQ(d.reports.size(), 4u * 2u);  // 2 subjects x 2 references x {Original, TVD}
    ASSERT_TRUE(d.cohort);
    ASSERT_EQ(d.cohort->rows.size(), 2u);
    EXPECT_EQ(d.cohort->rows[0].provenance, Provenance::Original);
    EXPECT_EQ(d.cohort->rows[1].provenance, Provenance::TvDenoise);
    EXPECT_EQ(d.cohort->rows[0].count, 4u);
    for (const auto* f : {"reports.json", "reports.csv", "cohort.csv", "cohort.json"})
        EXPECT_TRUE(fs::is_regular_file(dir / "out" / "describe" / f)) << f;
    for (const auto& r : d.reports) EXPECT_FALSE(fs::path(r.source_image).is_absolute());
}

TEST(Describe, EmptyDatasetRejected) {
    TempDir dir("empty");
    fs::create_directories(dir / "ds");
    detail::write_file((dir / "ds" / "dataset.json").string(), "[]");
    auto cfg = mt::demo_config(dir / "ds" / "dataset.json", dir / "out");
    EXPECT_THROW(Pipeline(cfg, mt::synthetic_transports()), ValidationError);
}

TEST(Describe, MissingReferenceImageRejected) {
    TempDir dir("missingimg");
    const auto ds = mt::write_demo_dataset(dir / "ds", 2);
    fs::remove(dir / "ds" / "images" / "p02_ref1.pgm");
    EXPECT_THROW(Pipeline(mt::demo_config(ds, dir / "out"), mt::synthetic_transports()), ValidationError);
}

TEST(Describe, UnconfiguredBackendIsConfigError) {
    TempDir dir("nodesc");
    Pipeline p(mt::demo_config(mt::write_demo_dataset(dir / "ds", 2), dir / "out"));
    EXPECT_THROW(p.run_describe(), ConfigError);
}

TEST(Augment, CountPerSubjectAndArm) {
    TempDir dir("augment");
    auto cfg = mt::demo_config(mt::write_demo_dataset(dir / "ds", 3), dir / "out");
    cfg.count = 3;
    Pipeline p(cfg, mt::synthetic_transports(3));
    const auto m = p.run_augment();
    EXPECT_EQ(m.arms.size(), 3u);
    for (const auto& [arm, subjects] : m.arms) {
        EXPECT_EQ(subjects.size(), 3u) << arm;
        for (const auto& [id, imgs] : subjects) {
            EXPECT_EQ(imgs.size(), 3u) << arm << " " << id;
            for (const auto& i : imgs) EXPECT_TRUE(fs::is_regular_file(m.resolve(i)));
        }
    }
    EXPECT_EQ(m.image_count(), 27u);
    EXPECT_EQ(m.prompts.size(), 3u);
    EXPECT_TRUE(fs::is_regular_file(dir / "out" / "augment" / "manifest.json"));
}

TEST(Augment, GeneratedArmUsesPriorManifest) {
    TempDir dir("prior");
    const auto ds = mt::write_demo_dataset(dir / "ds", 2);
    auto first = mt::demo_config(ds, dir / "first");
    first.arms = {ExperimentArm::OriginalOnly};
    Pipeline(first, mt::synthetic_transports(2)).run_augment();

    auto second = mt::demo_config(ds, dir / "second");
    second.arms = {ExperimentArm::OriginalGenerated};
    second.prior_manifest = dir / "first" / "augment" / "manifest.json";
    Pipeline p(second, mt::synthetic_transports(2));
    const auto m = p.run_augment();
    ASSERT_TRUE(m.arms.count("original_generated"));
    EXPECT_EQ(m.image_count(), 4u);
    // the request fed two originals plus the two prior outputs
    const auto recs = RunJournal::read(dir / "second" / "journal.jsonl");
    ASSERT_FALSE(recs.empty());
    EXPECT_EQ(recs[0].at("inputs").size(), 4u);

    auto third = mt::demo_config(ds, dir / "third");
    third.arms = {ExperimentArm::OriginalGenerated};
    const auto skipped = Pipeline(third, mt::synthetic_transports(2)).run_augment();
    EXPECT_EQ(skipped.image_count(), 0u);
    EXPECT_EQ(skipped.skipped.size(), 2u);
}

TEST(Augment, SubjectWithoutGenderIsSkippedNotFatal) {
    TempDir dir("skip");
    const auto ds = mt::write_demo_dataset(dir / "ds", 2);
    auto doc = nlohmann::json::parse(detail::read_file(ds.string()));
    doc[1]["attributes"]["gender"] = "unknown";
    detail::write_file(ds.string(), doc.dump());
    auto cfg = mt::demo_config(ds, dir / "out");
    cfg.arms = {ExperimentArm::OriginalOnly};
    const auto m = Pipeline(cfg, mt::synthetic_transports(2)).run_augment();
    EXPECT_EQ(m.arms.at("original_only").size(), 1u);
    ASSERT_EQ(m.skipped.size(), 1u);
    EXPECT_EQ(m.skipped[0].subject_id, "p02");
}

TEST(Reid, OneMatrixPairPerArm) {
    TempDir dir("reid");
    auto cfg = mt::demo_config(mt::write_demo_dataset(dir / "ds", 3), dir / "out");
    Pipeline p(cfg, mt::synthetic_transports(3));
    const auto r = p.run_reid(p.run_augment());
    ASSERT_EQ(r.arms.size(), 3u);
    EXPECT_TRUE(r.failed_arms.empty());
    std::size_t matrices = 0, sweeps = 0;
    for (const auto& e : fs::directory_iterator(dir / "out" / "reid")) {
        const auto n = e.path().filename().string();
        if (n.ends_with("_sweep.csv")) ++sweeps;
        else if (n.ends_with(".csv")) ++matrices;
    }
    EXPECT_EQ(matrices, 6u);
    EXPECT_EQ(sweeps, 6u);
    EXPECT_TRUE(fs::is_regular_file(dir / "out" / "reid" / "reid.json"));
    for (const auto& ev : r.arms) {
        EXPECT_EQ(ev.distance.matrix.rows(), 3u);
        EXPECT_EQ(ev.distance.identification_accuracy, 1.0) << ev.arm;
        ASSERT_TRUE(ev.distance.verification);
        ASSERT_TRUE(ev.similarity.verification);
        EXPECT_EQ(ev.distance.sweep.size(), 50u);
    }
}

TEST(Reid, NeedsThresholdOrSweep) {
    TempDir dir("reidthr");
    auto cfg = mt::demo_config(mt::write_demo_dataset(dir / "ds", 2), dir / "out");
    cfg.reid = {};
    Pipeline p(cfg, mt::synthetic_transports(2));
    const auto m = p.run_augment();
    EXPECT_THROW(p.run_reid(m), ValidationError);
}

TEST(Age, AgingPromptAndEvaluation) {
    TempDir dir("age");
    auto cfg = mt::demo_config(mt::write_demo_dataset(dir / "ds", 3), dir / "out");
    Pipeline p(cfg, mt::synthetic_transports(3));
    const auto a = p.run_age(70, AgingDirection::Age);
    ASSERT_TRUE(a.manifest.arms.count("aging"));
    EXPECT_EQ(a.manifest.image_count(), 6u);
    for (const auto& [id, prompt] : a.manifest.prompts) {
        EXPECT_NE(prompt.first.find("wrinkles"), std::string::npos) << id;
        EXPECT_NE(prompt.first.find("70 years old"), std::string::npos) << id;
        EXPECT_NE(prompt.second.find("child"), std::string::npos) << id;
        EXPECT_NE(prompt.second.find("baby"), std::string::npos) << id;
    }
    ASSERT_EQ(a.reid.arms.size(), 1u);
    EXPECT_TRUE(fs::is_regular_file(dir / "out" / "age" / "reid" / "aging_distance.csv"));
}

TEST(Age, DeagingLabel) {
    TempDir dir("deage");
    auto cfg = mt::demo_config(mt::write_demo_dataset(dir / "ds", 2), dir / "out");
    Pipeline p(cfg, mt::synthetic_transports(2));
    const auto a = p.run_age(12, AgingDirection::Deage);
    ASSERT_TRUE(a.manifest.arms.count("de-aging"));
    EXPECT_TRUE(fs::is_directory(dir / "out" / "age" / "generated" / "de-aging"));
    for (const auto& [id, prompt] : a.manifest.prompts) EXPECT_NE(prompt.second.find("wrinkles"), std::string::npos);
}

TEST(Age, MissingTargetsRejected) {
    TempDir dir("notarget");
    const auto ds = mt::write_demo_dataset(dir / "ds", 2);
    auto doc = nlohmann::json::parse(detail::read_file(ds.string()));
    doc[0].erase("target_images");
    detail::write_file(ds.string(), doc.dump());
    Pipeline p(mt::demo_config(ds, dir / "out"), mt::synthetic_transports(2));
    EXPECT_THROW(p.run_age(70, AgingDirection::Age), ValidationError);
    EXPECT_THROW(p.run_age(0, AgingDirection::Age), ValidationError);
}

TEST(RunAll, DeterministicAndReplayable) {
    TempDir dir("runall");
    const auto ds = mt::write_demo_dataset(dir / "ds", 4);
    const auto a = Pipeline(mt::demo_config(ds, dir / "a"), mt::synthetic_transports()).run_all();
    const auto b = Pipeline(mt::demo_config(ds, dir / "b"), mt::synthetic_transports()).run_all();
    EXPECT_EQ(a, b);
    expect_same_reports(dir / "a", dir / "b");
    for (const auto* key : {"describe", "augment", "reid", "age"}) EXPECT_TRUE(a.contains(key)) << key;

    auto cfg = mt::demo_config(ds, dir / "c");
    cfg.replay_journal = dir / "a" / "journal.jsonl";
    const auto c = Pipeline(cfg).run_all();
    EXPECT_EQ(c, a);
    expect_same_reports(dir / "a", dir / "c");
}

TEST(RunAll, RecordedFixturesReproduceRun) {
    TempDir dir("fixtures");
    const auto ds = mt::write_demo_dataset(dir / "ds", 4);
    mt::record_demo_fixtures(ds, dir / "live", dir / "fx");
    auto cfg = mt::demo_config(ds, dir / "offline");
    cfg.use_fixtures(dir / "fx");
    Pipeline(cfg).run_all();
    expect_same_reports(dir / "live", dir / "offline");
}

TEST(Cli, PipelineFromFixturesTwiceIdentical) {
    TempDir dir("cli");
    const auto ds = mt::write_demo_dataset(dir / "ds", 4);
    mt::record_demo_fixtures(ds, dir / "live", dir / "fx");
    const auto cfg = mt::write_demo_config_file(dir / "config.json", ds, dir / "fx");
    for (const auto* run : {"r1", "r2"}) {
        const auto r = run_cli("--config " + q(cfg) + " --out " + q(dir / run) + " pipeline", dir.path());
        EXPECT_EQ(r.code, 0) << r.output;
    }
    expect_same_reports(dir / "r1", dir / "r2");
    EXPECT_EQ(detail::read_file((dir / "r1" / "run_report.json").string()),
              detail::read_file((dir / "live" / "run_report.json").string()));

    const auto rep = run_cli("--out " + q(dir / "r1") + " report --emit-gnuplot", dir.path());
    EXPECT_EQ(rep.code, 0);
    EXPECT_NE(rep.output.find("reid/original_only_distance.csv"), std::string::npos) << rep.output;
    EXPECT_TRUE(fs::is_regular_file(dir / "r1" / "reid" / "original_only_distance.gp"));

    const auto desc = run_cli("--config " + q(cfg) + " --out " + q(dir / "r3") + " describe", dir.path());
    EXPECT_EQ(desc.code, 0) << desc.output;
    EXPECT_EQ(desc.output.rfind("input_pictures,accuracy,count\nOriginal,", 0), 0u) << desc.output;
}

TEST(Cli, ExitCodes) {
    TempDir dir("cliexit");
    const auto ds = mt::write_demo_dataset(dir / "ds", 2);
    fs::create_directories(dir / "nofx");
    const auto out = " --out " + q(dir / "o");
    const auto nofx = " --fixtures " + q(dir / "nofx");
    EXPECT_EQ(run_cli("frobnicate", dir.path()).code, exit_code::validation);
    EXPECT_EQ(run_cli("", dir.path()).code, exit_code::validation);
    EXPECT_EQ(run_cli("--dataset " + q(dir / "absent.json") + nofx + out + " describe", dir.path()).code,
              exit_code::validation);
    EXPECT_EQ(run_cli("--dataset " + q(ds) + nofx + out + " describe", dir.path()).code,
              exit_code::gateway);
    EXPECT_EQ(run_cli("--dataset " + q(ds) + nofx + out + " reid", dir.path()).code,
              exit_code::validation);
    EXPECT_EQ(run_cli("--dataset " + q(ds) + out + " describe", dir.path()).code, exit_code::validation);

    // a corrupt describe fixture for the first reference image
    const auto img = (dir / "ds" / "images" / "p01_ref0.pgm").string();
    const auto digest = request_digest({sha256_hex(detail::read_file(img))}, {{"questions", build_vlm_questions()}});
    const auto p = FixtureTransport::fixture_path(dir / "badfx", BackendKind::Describe, digest);
    fs::create_directories(p.parent_path());
    detail::write_file(p.string(), R"({"answers": ["male"]})");
    auto ds1 = nlohmann::json::parse(detail::read_file(ds.string()));
    ds1 = nlohmann::json::array({ds1[0]});
    ds1[0]["reference_images"] = {"images/p01_ref0.pgm"};
    detail::write_file((dir / "ds" / "one.json").string(), ds1.dump());
    EXPECT_EQ(run_cli("--dataset " + q(dir / "ds" / "one.json") + " --fixtures " + q(dir / "badfx") + " --out " +
                          q(dir / "o") + " describe",
                      dir.path())
                  .code,
              exit_code::protocol);
}

TEST(Cli, DenoiseAndScore) {
    TempDir dir("clitools");
    const auto in = dir / "noisy.pgm";
    write_pgm(in.string(), mt::face_image(1, 1, 32));
    const auto r = run_cli("--iterations 30 denoise " + q(in) + " " + q(dir / "clean.pgm"), dir.path());
    EXPECT_EQ(r.code, 0) << r.output;
    const auto clean = decode_pgm(detail::read_file((dir / "clean.pgm").string()));
    EXPECT_LT(total_variation(clean), total_variation(decode_pgm(detail::read_file(in.string()))));
    EXPECT_EQ(run_cli("denoise " + q(dir / "nope.pgm") + " " + q(dir / "x.pgm"), dir.path()).code, exit_code::validation);

    const auto ds = mt::write_demo_dataset(dir / "ds", 2);
    const nlohmann::json descriptions = {
        {{"subject_id", "p01"}, {"provenance", "original"}, {"attributes", mt::demo_subjects()[0].attributes}},
        {{"subject_id", "p02"}, {"provenance", "srgan"}, {"attributes", {{"gender", "Male"}}}}};
    detail::write_file((dir / "desc.json").string(), descriptions.dump());
    const auto s = run_cli("--dataset " + q(ds) + " score " + q(dir / "desc.json") + " --label qwen", dir.path());
    EXPECT_EQ(s.code, 0) << s.output;
    EXPECT_EQ(s.output.substr(0, s.output.find('\n')), "input_pictures,qwen,count");
    EXPECT_NE(s.output.find("Original,100,1"), std::string::npos) << s.output;
}
