// mugshot: command-line front end for the mugshot pipeline.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <mugshot/mugshot.hpp>

namespace fs = std::filesystem;
using namespace mugshot;

namespace {

struct GlobalFlags {
    std::string config;
    std::string fixtures;
    std::string out;
    std::string dataset;
    std::string replay;
    std::string record_fixtures;
    std::optional<double> threshold;
    std::optional<double> similarity_threshold;
    bool sweep = false;
    std::optional<int> workers;
    std::vector<std::string> enhancements;
    std::vector<std::string> exclude_terms;
    std::vector<std::string> include_categories;
    std::optional<int> count;
    std::optional<double> target_age;
    std::string direction;
    std::string prior_manifest;
    std::vector<std::string> arms;
    std::optional<int> iterations;
    std::optional<double> lambda;
    std::optional<double> epsilon;
    std::optional<double> step;
};

PipelineConfig build_config(const GlobalFlags& g) {
    PipelineConfig cfg = g.config.empty() ? PipelineConfig{} : load_pipeline_config(g.config);
    apply_env_overrides(cfg);
    if (!g.fixtures.empty()) cfg.use_fixtures(g.fixtures);
    if (!g.out.empty()) cfg.output_dir = g.out;
    if (!g.dataset.empty()) cfg.dataset = g.dataset;
    if (!g.replay.empty()) cfg.replay_journal = fs::path(g.replay);
    if (!g.record_fixtures.empty()) cfg.record_fixtures = fs::path(g.record_fixtures);
    if (g.threshold) cfg.reid.threshold = g.threshold;
    if (g.similarity_threshold) cfg.reid.similarity_threshold = g.similarity_threshold;
    if (g.sweep) cfg.reid.sweep = true;
    if (g.workers) cfg.workers = *g.workers;
    if (g.count) cfg.count = *g.count;
    if (!g.enhancements.empty()) {
        cfg.enhancements.clear();
        for (const auto& m : g.enhancements) cfg.enhancements.push_back(parse_method(m));
    }
    for (const auto& t : g.exclude_terms) cfg.prompt_rules.exclude_terms.push_back(t);
    if (!g.include_categories.empty()) {
        cfg.prompt_rules.include.clear();
        for (const auto& f : g.include_categories) cfg.prompt_rules.include.insert(parse_feature(f));
    }
    if (g.target_age) cfg.aging.target_age = g.target_age;
    if (!g.direction.empty()) cfg.aging.direction = parse_direction(g.direction);
    if (!g.prior_manifest.empty()) cfg.prior_manifest = fs::path(g.prior_manifest);
    if (!g.arms.empty()) {
        cfg.arms.clear();
        for (const auto& a : g.arms) cfg.arms.push_back(parse_arm(a));
    }
    if (g.iterations) cfg.denoise.iterations = *g.iterations;
    if (g.lambda) cfg.denoise.lambda = *g.lambda;
    if (g.epsilon) cfg.denoise.epsilon = *g.epsilon;
    if (g.step) cfg.denoise.step = *g.step;
    return cfg;
}

void print_reid(const ReidOutcome& r) {
    for (const auto& ev : r.arms) {
        std::cout << ev.arm << ": identification(distance)=" << detail::format_number(ev.distance.identification_accuracy)
                  << " identification(similarity)=" << detail::format_number(ev.similarity.identification_accuracy);
        if (ev.distance.verification)
            std::cout << " FPR=" << detail::format_number(ev.distance.verification->false_positive_rate)
                      << " FNR=" << detail::format_number(ev.distance.verification->false_negative_rate);
        std::cout << "\n";
    }
    for (const auto& [arm, msg] : r.failed_arms) std::cerr << "arm " << arm << " aborted: " << msg << "\n";
}

int cmd_denoise(const GlobalFlags& g, const std::string& input, const std::string& output) {
    DenoiseParams p;
    if (g.iterations) p.iterations = *g.iterations;
    if (g.lambda) p.lambda = *g.lambda;
    if (g.epsilon) p.epsilon = *g.epsilon;
    if (g.step) p.step = *g.step;
    p.validate();
    const auto bytes = detail::read_file(input);
    switch (sniff_format(bytes)) {
        case ImageFormat::Pgm: {
            const auto img = decode_pgm(bytes);
            auto res = denoise_with_trace(img, p);
            detail::write_file(output, encode_pgm(res.image));
            std::cout << "TV " << detail::format_number(total_variation(img)) << " -> "
                      << detail::format_number(total_variation(res.image)) << "\n";
            break;
        }
        case ImageFormat::Png:
            detail::write_file(output, encode_png(denoise_rgb(decode_png(bytes), p)));
            break;
        default: throw ValidationError(input + ": unsupported image format (PGM or PNG expected)");
    }
    return exit_code::ok;
}

int cmd_score(const GlobalFlags& g, const std::string& descriptions_path, const std::string& label) {
    PipelineConfig cfg = g.config.empty() ? PipelineConfig{} : load_pipeline_config(g.config);
    if (!g.dataset.empty()) cfg.dataset = g.dataset;
    if (cfg.dataset.empty()) throw ValidationError("score needs --dataset or a config naming one");
    const auto subjects = load_subject_records(cfg.dataset.string(), cfg.metric.synonyms);
    std::map<std::string, const SubjectRecord*> by_id;
    for (const auto& s : subjects) by_id[s.subject_id] = &s;
    std::vector<DistanceReport> reports;
    for (const auto& d : load_descriptions(descriptions_path, cfg.metric.synonyms)) {
        auto it = by_id.find(d.subject_id);
        if (it == by_id.end()) throw ValidationError("description names unknown subject '" + d.subject_id + "'");
        reports.push_back(score_description(*it->second, d, cfg.metric.thresholds, cfg.metric.equivalence));
    }
    const auto cohort = score_cohort(reports);
    const auto& lbl = label.empty() ? cfg.describer_label : label;
    if (!g.out.empty()) {
        fs::create_directories(g.out);
        detail::write_file((fs::path(g.out) / "reports.csv").string(), reports_to_csv(reports));
        detail::write_file((fs::path(g.out) / "cohort.csv").string(), cohort_to_csv(cohort, lbl));
    }
    std::cout << cohort_to_csv(cohort, lbl);
    return exit_code::ok;
}

std::string gnuplot_heatmap(const fs::path& csv, const std::string& title) {
    std::ostringstream s;
    s << "# " << title << "\n"
      << "set datafile separator ','\n"
      << "set title '" << title << "'\n"
      << "set xlabel 'probe subject'\nset ylabel 'reference subject'\n"
      << "set terminal pngcairo size 800,700\n"
      << "set output '" << csv.stem().string() << ".png'\n"
      << "set palette defined (0 'white', 1 'dark-blue')\n"
      << "plot '" << csv.filename().string() << "' matrix rowheaders columnheaders with image notitle\n";
    return s.str();
}

int cmd_report(const GlobalFlags& g, bool emit_gnuplot) {
    const fs::path out = g.out.empty() ? fs::path("out") : fs::path(g.out);
    if (!fs::is_directory(out)) throw ValidationError("output directory not found: " + out.string());
    std::vector<fs::path> matrices;
    for (const auto& e : fs::recursive_directory_iterator(out)) {
        const auto name = e.path().filename().string();
        if (!e.is_regular_file() || e.path().extension() != ".csv") continue;
        if (name.ends_with("_distance.csv") || name.ends_with("_similarity.csv")) matrices.push_back(e.path());
    }
    std::sort(matrices.begin(), matrices.end());
    if (const auto cohort = out / "describe" / "cohort.csv"; fs::is_regular_file(cohort))
        std::cout << detail::read_file(cohort.string());
    for (const auto& m : matrices) {
        std::cout << m.lexically_relative(out).generic_string() << "\n";
        if (emit_gnuplot) {
            auto gp = m;
            gp.replace_extension(".gp");
            detail::write_file(gp.string(), gnuplot_heatmap(m, m.stem().string()));
        }
    }
    if (matrices.empty()) std::cerr << "no confusion matrices under " << out.string() << "\n";
    return exit_code::ok;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Mugshot enhancement, description, augmentation and re-identification pipeline"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalFlags g;
    app.add_option("--config", g.config, "Pipeline config (JSON)");
    app.add_option("--fixtures", g.fixtures, "Fixture root used for every backend");
    app.add_option("--out", g.out, "Output directory");
    app.add_option("--dataset", g.dataset, "Subject records (JSON array)");
    app.add_option("--replay", g.replay, "Serve backend calls from a previous run journal");
    app.add_option("--record-fixtures", g.record_fixtures, "Write live backend responses as fixtures");
    app.add_option("--threshold", g.threshold, "Distance threshold for verification");
    app.add_option("--similarity-threshold", g.similarity_threshold, "Similarity threshold for verification");
    app.add_flag("--sweep", g.sweep, "Sweep verification thresholds");
    app.add_option("--workers", g.workers, "Concurrent subjects");
    app.add_option("--enhance", g.enhancements, "Enhancement methods (maxim, srgan, tvd)");
    app.add_option("--exclude-term", g.exclude_terms, "Extra term never allowed in prompts");
    app.add_option("--include-category", g.include_categories, "Prompt features to include");
    app.add_option("--count", g.count, "Images per generation request");
    app.add_option("--arm", g.arms, "Experiment arms (original_only, original_enhanced, original_generated)");
    app.add_option("--prior-manifest", g.prior_manifest, "Manifest whose original_only images feed original_generated");
    app.add_option("--iterations", g.iterations, "Denoise iterations");
    app.add_option("--lambda", g.lambda, "Denoise TV weight");
    app.add_option("--epsilon", g.epsilon, "Denoise smoothing constant");
    app.add_option("--step", g.step, "Denoise base step");

    auto* describe = app.add_subcommand("describe", "Describe and score every subject per enhancement arm");
    auto* denoise_cmd = app.add_subcommand("denoise", "Total-variation denoise one PGM or PNG image");
    std::string denoise_in, denoise_out;
    denoise_cmd->add_option("input", denoise_in)->required();
    denoise_cmd->add_option("output", denoise_out)->required();
    auto* augment = app.add_subcommand("augment", "Generate images per experiment arm");
    auto* age = app.add_subcommand("age", "Generate aged or de-aged images and evaluate against targets");
    age->add_option("--target-age", g.target_age, "Target age in years")->required();
    age->add_option("--direction", g.direction, "age or deage");
    auto* reid = app.add_subcommand("reid", "Build confusion matrices for a generation manifest");
    std::string manifest;
    reid->add_option("--manifest", manifest, "Manifest (default <out>/augment/manifest.json)");
    auto* score = app.add_subcommand("score", "Score a descriptions file against the dataset");
    std::string descriptions, label;
    score->add_option("descriptions", descriptions)->required();
    score->add_option("--label", label, "Describer column label");
    auto* pipeline = app.add_subcommand("pipeline", "Run every configured stage");
    pipeline->add_option("--target-age", g.target_age, "Also run the aging stage");
    pipeline->add_option("--direction", g.direction, "age or deage");
    auto* report = app.add_subcommand("report", "List report files under --out");
    bool emit_gnuplot = false;
    report->add_flag("--emit-gnuplot", emit_gnuplot, "Write a gnuplot heatmap script next to each matrix");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? exit_code::ok : exit_code::validation;
    }

    try {
        if (denoise_cmd->parsed()) return cmd_denoise(g, denoise_in, denoise_out);
        if (score->parsed()) return cmd_score(g, descriptions, label);
        if (report->parsed()) return cmd_report(g, emit_gnuplot);

        Pipeline p(build_config(g));
        if (describe->parsed()) {
            auto d = p.run_describe();
            std::cout << cohort_to_csv(*d.cohort, p.config().describer_label);
            for (const auto& f : d.failures) std::cerr << f.subject_id << " (" << f.arm << "): " << f.error << "\n";
        } else if (augment->parsed()) {
            auto m = p.run_augment();
            std::cout << m.image_count() << " images written to " << (p.config().output_dir / "augment").string() << "\n";
            for (const auto& s : m.skipped) std::cerr << "skipped " << s.subject_id << " (" << s.arm << "): " << s.reason << "\n";
            for (const auto& [arm, msg] : m.failed_arms) std::cerr << "arm " << arm << " aborted: " << msg << "\n";
        } else if (age->parsed()) {
            auto a = p.run_age(*g.target_age, p.config().aging.direction);
            print_reid(a.reid);
        } else if (reid->parsed()) {
            const auto path = manifest.empty() ? p.config().output_dir / "augment" / "manifest.json" : fs::path(manifest);
            if (!fs::is_regular_file(path)) throw ValidationError("manifest not found: " + path.string());
            print_reid(p.run_reid(AugmentManifest::load(path)));
        } else if (pipeline->parsed()) {
            p.run_all();
            std::cout << "report written to " << (p.config().output_dir / "run_report.json").string() << "\n";
        }
        return exit_code::ok;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e);
    }
}
