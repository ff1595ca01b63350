#include <cstdlib>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "lvseg/io.hpp"
#include "lvseg/pipeline.hpp"
#include "test_util.hpp"

using namespace lvseg;
using namespace lvseg::pipeline;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path());
    std::ofstream(p, std::ios::binary) << text;
}

// Every regular file under `root`, relative path -> bytes.
std::map<std::string, std::string> tree(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = slurp(e.path());
    return out;
}

PipelineConfig tiny_config() {
    PipelineConfig c;
    c.subjects = 1;
    c.synth.frames = 4;
    c.synth.rows = c.synth.cols = 48;
    c.synth.radius_min = 7;
    c.synth.radius_max = 9;
    c.detector.epochs = 2;
    c.detector.hidden = 8;
    c.detector.base_channels = 4;
    c.network.epochs = 1;
    c.network.depth = 2;
    c.network.base_channels = 2;
    c.network.input_rows = c.network.input_cols = 16;
    return c;
}

std::vector<std::string> full_pipeline(const PipelineConfig& cfg, const fs::path& data, const Run& run) {
    cmd_train_detector(cfg, data / "manifest.json", run, false);
    std::vector<std::string> results;
    for (std::string m : {"fcnn", "tfcnn"}) {
        cmd_train(cfg, data / "manifest.json", run, m, false);
        cmd_infer(cfg, data / "manifest.json", run, m, m == "tfcnn", false);
        std::string crf = cmd_refine_crf(cfg, data / "manifest.json", run, m, false);
        std::string sf = cmd_refine_sf(cfg, data / "manifest.json", run, m, false);
        std::string both = cmd_refine_sf(cfg, data / "manifest.json", run, crf, false);
        for (const auto& r : {m, crf, sf, both}) results.push_back(r);
    }
    for (const auto& r : results) cmd_eval(cfg, data / "manifest.json", run, r, false);
    std::vector<fs::path> dirs;
    for (const auto& r : results) dirs.push_back(run.result_dir(r));
    cmd_report(dirs, run.root(), false);
    return results;
}

int run_cli(const std::string& args) {
    std::string cmd = std::string(LVSEG_CLI) + " " + args + " > /dev/null 2>&1";
    int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST_CASE("config JSON round trip and strictness") {
    PipelineConfig c = tiny_config();
    c.crf.w_smooth = 0.5;
    c.semflow.lambdas.coupling = 3.0;
    PipelineConfig back = PipelineConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());

    // Partial sections keep the pipeline defaults for everything else.
    PipelineConfig partial = PipelineConfig::from_json(R"({"network": {"epochs": 2}})");
    CHECK(partial.network.epochs == 2);
    CHECK(partial.network.input_rows == PipelineConfig{}.network.input_rows);

    CHECK_THROWS_AS(PipelineConfig::from_json(R"({"colour": 1})"), Error);
    CHECK_THROWS_AS(PipelineConfig::from_json(R"({"crf": {"w_ap": 1}})"), Error);
    CHECK_THROWS_AS(PipelineConfig::from_json(R"({"synth": {"frame": 3}})"), Error);
    CHECK_THROWS_AS(PipelineConfig::from_json(R"({"eval_split": "dev"})"), Error);

    PipelineConfig s;
    s.apply_seed(11);
    CHECK(s.seed == 11);
    CHECK(s.detector.seed == 11);
    CHECK(s.network.seed == 11);
}

TEST_CASE("result labels follow Table I") {
    CHECK(result_label("fcnn") == "FCNN");
    CHECK(result_label("tfcnn+crf") == "T-FCNN+CRFs");
    CHECK(result_label("fcnn+crf+sf") == "FCNN+CRFs+SF");
    CHECK(result_label("tfcnn+sf") == "T-FCNN+SF");
}

TEST_CASE("synth stage") {
    test::TempDir dir("synth");
    PipelineConfig c;
    c.apply_seed(7);
    cmd_synth(c, dir.path() / "a", false);
    Dataset d = load_dataset(dir.path() / "a" / "manifest.json");
    CHECK(d.sequences.size() == 20);
    for (const auto& s : d.sequences) CHECK(s.length() == 30);

    cmd_synth(c, dir.path() / "b", false);
    CHECK(tree(dir.path() / "a") == tree(dir.path() / "b"));

    CHECK_THROWS_WITH_AS(cmd_synth(c, dir.path() / "a", false), doctest::Contains("not empty"), Error);
    c.subjects = 1;
    c.synth.frames = 2;
    cmd_synth(c, dir.path() / "a", true);
    Dataset small = load_dataset(dir.path() / "a" / "manifest.json");
    CHECK(small.sequences.size() == 1);
    CHECK(small.sequences[0].length() == 2);
}

TEST_CASE("full pipeline on one subject gives the eight Table I rows and is reproducible") {
    test::TempDir dir("pipe");
    PipelineConfig c = tiny_config();
    cmd_synth(c, dir.path() / "data", false);
    Run a(dir.path() / "run_a"), b(dir.path() / "run_b");
    auto results = full_pipeline(c, dir.path() / "data", a);
    full_pipeline(c, dir.path() / "data", b);

    json rows = json::parse(slurp(a.root() / "report.json"));
    std::vector<std::string> labels;
    for (const auto& r : rows) labels.push_back(r.at("label").get<std::string>());
    CHECK(labels == std::vector<std::string>{"FCNN", "T-FCNN", "FCNN+CRFs", "T-FCNN+CRFs", "FCNN+SF", "T-FCNN+SF",
                                             "FCNN+CRFs+SF", "T-FCNN+CRFs+SF"});
    std::string table = slurp(a.root() / "report.md");
    CHECK(table.find("T-FCNN+CRFs+SF") != std::string::npos);

    // Masks, reports and checkpoints are byte-identical across runs.
    auto ta = tree(a.root()), tb = tree(b.root());
    CHECK(ta == tb);
    CHECK(ta.count("models/tfcnn/model.ckpt") == 1);
    CHECK(ta.count("detector/model.ckpt") == 1);
    CHECK(ta.count("results/tfcnn/s000/overlay_000.ppm") == 1);
    CHECK(ta.count("results/tfcnn+sf/s000/flow.bin") == 1);
    CHECK(ta.count("results/tfcnn+sf/s000/energy.json") == 1);

    json artifacts = json::parse(ta.at("artifacts.json"));
    CHECK(artifacts.contains("train-tfcnn"));
    for (const auto& f : artifacts.at("infer-tfcnn")) CHECK(fs::exists(a.root() / f.get<std::string>()));

    // Re-running a stage with --force reproduces its outputs.
    cmd_refine_crf(c, dir.path() / "data" / "manifest.json", a, "tfcnn", true);
    cmd_eval(c, dir.path() / "data" / "manifest.json", a, "tfcnn+crf", false);
    CHECK(tree(a.result_dir("tfcnn+crf")) == tree(b.result_dir("tfcnn+crf")));
    CHECK_THROWS_WITH_AS(cmd_refine_crf(c, dir.path() / "data" / "manifest.json", a, "tfcnn", false),
                         doctest::Contains("not empty"), Error);
}

TEST_CASE("eval of the ground truth is perfect and report of one result has one row") {
    test::TempDir dir("eval");
    PipelineConfig c = tiny_config();
    c.subjects = 2;
    cmd_synth(c, dir.path() / "data", false);
    Dataset d = load_dataset(dir.path() / "data" / "manifest.json");
    Run run(dir.path() / "run");
    json subjects = json::array();
    for (std::size_t i = 0; i < d.sequences.size(); ++i) {
        const auto& id = d.sequences[i].subject_id;
        subjects.push_back(id);
        for (int t = 0; t < d.masks[i].length(); ++t) {
            char name[32];
            std::snprintf(name, sizeof name, "mask_%03d.pgm", t);
            fs::create_directories(run.result_dir("truth") / id);
            write_mask_pgm(run.result_dir("truth") / id / name, d.masks[i].masks[t]);
        }
    }
    spit(run.result_dir("truth") / "result.json", json{{"subjects", subjects}, {"split", "all"}}.dump());
    metrics::AggregateReport agg = cmd_eval(c, dir.path() / "data" / "manifest.json", run, "truth", false);
    CHECK(agg.dice.mean == 1.0);
    CHECK(agg.apd_mm.mean == 0.0);
    CHECK(agg.conformity.mean == 1.0);
    CHECK(agg.frames == 2 * c.synth.frames);

    std::string table = cmd_report({run.result_dir("truth")}, dir.path() / "rep", false);
    int lines = 0;
    for (char ch : table) lines += ch == '\n';
    CHECK(lines == 3);  // header, rule, one row
    CHECK(table.find("1.0000(0.0000)") != std::string::npos);
}

TEST_CASE("missing stage inputs name the absent artifact") {
    test::TempDir dir("missing");
    PipelineConfig c = tiny_config();
    cmd_synth(c, dir.path() / "data", false);
    Run run(dir.path() / "run");
    auto m = dir.path() / "data" / "manifest.json";
    CHECK_THROWS_WITH_AS(cmd_infer(c, m, run, "tfcnn", false, false), doctest::Contains("detector/model.ckpt"), Error);
    CHECK_THROWS_WITH_AS(cmd_refine_crf(c, m, run, "tfcnn", false), doctest::Contains("results/tfcnn/result.json"),
                         Error);
    CHECK_THROWS_WITH_AS(cmd_eval(c, m, run, "fcnn", false), doctest::Contains("result.json"), Error);
    CHECK_THROWS_WITH_AS(cmd_report({run.result_dir("fcnn")}, run.root(), false), doctest::Contains("metrics.json"),
                         Error);
    CHECK_THROWS_AS(cmd_train(c, m, run, "unet", false), Error);
}

TEST_CASE("overlay draws contours over the frame") {
    Image f(5, 5, 0.5);
    Mask m(5, 5);
    m(2, 2) = 1;
    auto rgb = overlay(f, {{&m, {255, 0, 0}}});
    REQUIRE(rgb.size() == 75);
    std::size_t i = 3 * (2 * 5 + 2);
    CHECK(rgb[i] == 255);
    CHECK(rgb[i + 1] == 0);
    CHECK(rgb[0] == 128);
}

TEST_CASE("command line exit codes") {
    test::TempDir dir("cli");
    const std::string d = (dir.path() / "data").string();
    const std::string cfg = (dir.path() / "cfg.json").string();
    spit(cfg, tiny_config().to_json());
    CHECK(run_cli("--config " + cfg + " --seed 3 synth --out " + d) == 0);
    CHECK(fs::exists(dir.path() / "data" / "manifest.json"));
    // Existing output without --force.
    CHECK(run_cli("--config " + cfg + " synth --out " + d) != 0);
    CHECK(run_cli("--config " + cfg + " --force synth --out " + d) == 0);
    CHECK(run_cli("--config " + cfg + " infer --data " + d + " --run " + (dir.path() / "run").string() +
                  " --model tfcnn") != 0);
    CHECK(run_cli("frobnicate") != 0);
    spit(dir.path() / "bad.json", R"({"nope": 1})");
    CHECK(run_cli("--config " + (dir.path() / "bad.json").string() + " synth --out " + d + "x") != 0);
}
