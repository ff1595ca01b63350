#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "lvseg/pipeline.hpp"

namespace fs = std::filesystem;
using namespace lvseg;
using namespace lvseg::pipeline;

namespace {

fs::path manifest_of(const fs::path& p) { return fs::is_directory(p) ? p / "manifest.json" : p; }

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error("cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Left-ventricle segmentation pipeline on CINE sequences"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
    bool force = false;
    app.add_option("--config", config_path, "JSON pipeline configuration")->check(CLI::ExistingFile);
    app.add_option("--seed", seed, "seed for data, detector and network");
    app.add_option("--threads", threads, "worker threads over subjects (refinement, eval)")->check(CLI::PositiveNumber);
    app.add_flag("--force", force, "overwrite existing stage outputs");

    std::string data, run_dir, model, input, result, out, params_path, lambdas_path, split;
    std::optional<int> subjects, frames;
    bool overlays = false;
    std::vector<std::string> result_dirs;

    auto* synth = app.add_subcommand("synth", "generate a synthetic CINE dataset");
    synth->add_option("--out", out, "dataset directory")->required();
    synth->add_option("--subjects", subjects, "number of sequences");
    synth->add_option("--frames", frames, "frames per sequence");

    auto* train_det = app.add_subcommand("train-detector", "train the LV box regressor");
    auto* train = app.add_subcommand("train", "train FCNN or T-FCNN");
    auto* infer = app.add_subcommand("infer", "segment held-out sequences");
    auto* crf = app.add_subcommand("refine-crf", "dense CRF refinement of a result");
    auto* sf = app.add_subcommand("refine-sf", "Semantic Flow refinement of a result");
    auto* eval = app.add_subcommand("eval", "score a result against ground truth");
    for (auto* sub : {train_det, train, infer, crf, sf, eval}) {
        sub->add_option("--data", data, "dataset directory or manifest")->required();
        sub->add_option("--run", run_dir, "run directory")->required();
    }
    for (auto* sub : {train, infer}) sub->add_option("--model", model, "fcnn or tfcnn")->required();
    infer->add_flag("--overlays", overlays, "write PPM contour overlays");
    for (auto* sub : {train_det, infer}) sub->add_option("--split", split, "train, validation, test or all");
    for (auto* sub : {crf, sf}) sub->add_option("--input", input, "result to refine, e.g. tfcnn")->required();
    crf->add_option("--params", params_path, "CRF parameters JSON")->check(CLI::ExistingFile);
    sf->add_option("--lambdas", lambdas_path, "Semantic Flow weights JSON")->check(CLI::ExistingFile);
    eval->add_option("--result", result, "result name, e.g. tfcnn+crf")->required();

    auto* report = app.add_subcommand("report", "Table I style comparison of result directories");
    report->add_option("results", result_dirs, "result directories holding metrics.json")->required();
    report->add_option("--out", out, "directory for report.md and report.json")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        PipelineConfig cfg = config_path.empty() ? PipelineConfig{} : PipelineConfig::load(config_path);
        if (seed) cfg.apply_seed(*seed);
        if (threads) cfg.threads = *threads;
        if (subjects) cfg.subjects = *subjects;
        if (frames) cfg.synth.frames = *frames;
        if (!split.empty()) cfg.eval_split = split;
        if (!params_path.empty()) {
            nlohmann::json merged = nlohmann::json::parse(cfg.crf.to_json());
            merged.merge_patch(nlohmann::json::parse(slurp(params_path)));
            cfg.crf = crf::CrfParams::from_json(merged.dump());
        }
        if (!lambdas_path.empty()) cfg.semflow.lambdas = sf::Lambdas::from_json(slurp(lambdas_path));
        cfg.validate();

        if (*synth) {
            cmd_synth(cfg, out, force);
            std::cout << "wrote " << cfg.subjects << " sequences to " << out << "\n";
        } else if (*report) {
            std::cout << cmd_report({result_dirs.begin(), result_dirs.end()}, out, force);
        } else {
            Run run(run_dir);
            const fs::path manifest = manifest_of(data);
            if (*train_det) cmd_train_detector(cfg, manifest, run, force);
            else if (*train) cmd_train(cfg, manifest, run, model, force);
            else if (*infer) cmd_infer(cfg, manifest, run, model, overlays, force);
            else if (*crf) std::cout << cmd_refine_crf(cfg, manifest, run, input, force) << "\n";
            else if (*sf) std::cout << cmd_refine_sf(cfg, manifest, run, input, force) << "\n";
            else if (*eval) {
                auto agg = cmd_eval(cfg, manifest, run, result, force);
                std::cout << metrics::format_table({agg});
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
