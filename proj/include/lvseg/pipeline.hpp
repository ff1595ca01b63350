#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lvseg/crf.hpp"
#include "lvseg/detector.hpp"
#include "lvseg/metrics.hpp"
#include "lvseg/semflow.hpp"
#include "lvseg/synth.hpp"
#include "lvseg/tfcnn.hpp"

namespace lvseg::pipeline {

namespace fs = std::filesystem;

// Every stage's settings. JSON sections: "synth", "detector", "network", "crf",
// "semflow", plus the top-level keys below. Unknown keys are rejected.
struct PipelineConfig {
    SynthConfig synth;
    int subjects = 20;
    std::uint64_t seed = 7;  // dataset seed

    det::DetectorConfig detector;
    int detector_frame_stride = 3;  // every n-th training frame feeds the detector

    net::NetworkConfig network;
    int crop_margin = 4;  // pixels added around the LV hull before resizing
    crf::CrfParams crf;
    sf::SfParams semflow;

    std::string eval_split = "test";  // train, validation, test or all
    int threads = 1;

    PipelineConfig();
    void validate() const;
    // Sets the dataset, detector and network seeds together.
    void apply_seed(std::uint64_t s);
    std::string to_json() const;
    static PipelineConfig from_json(const std::string& text);
    static PipelineConfig load(const fs::path& path);
};

SynthConfig synth_from_json(const std::string& text);
std::string synth_to_json(const SynthConfig& cfg);

// Table I style label for a result name: "tfcnn+crf+sf" -> "T-FCNN+CRFs+SF".
std::string result_label(const std::string& name);

// Stage outputs under a run directory:
//   detector/{model.ckpt,log.jsonl,eval.json}
//   models/<fcnn|tfcnn>/{model.ckpt,log.jsonl}
//   results/<name>/<subject>/{crop.json,probs.bin,mask_NN.pgm,...}
//   results/<name>/metrics.json, report.{md,json}
// and artifacts.json listing every file a stage produced.
class Run {
public:
    explicit Run(fs::path root);
    const fs::path& root() const { return root_; }
    fs::path detector_dir() const { return root_ / "detector"; }
    fs::path model_dir(const std::string& model) const { return root_ / "models" / model; }
    fs::path result_dir(const std::string& name) const { return root_ / "results" / name; }
    // Adds every regular file under `dir` to artifacts.json under `stage`.
    void record(const std::string& stage, const fs::path& dir) const;

private:
    fs::path root_;
};

// Creates `dir`, refusing a non-empty one unless `force` (which empties it).
void prepare_output(const fs::path& dir, bool force);

// Subjects of `split` ("all" = every subject). Falls back to all subjects with a
// warning on stderr when the split is empty; `used` receives the split name.
std::vector<std::string> split_subjects(const Dataset& data, const std::string& split, std::string* used = nullptr);

// Training pairs cropped to each sequence's ground-truth hull and resized to
// the network input.
net::LabeledSequence truth_crop(const CineSequence& seq, const MaskSequence& masks, int margin, int size_rows,
                                int size_cols);

void cmd_synth(const PipelineConfig& cfg, const fs::path& out, bool force);
void cmd_train_detector(const PipelineConfig& cfg, const fs::path& data, const Run& run, bool force);
void cmd_train(const PipelineConfig& cfg, const fs::path& data, const Run& run, const std::string& model, bool force);
void cmd_infer(const PipelineConfig& cfg, const fs::path& data, const Run& run, const std::string& model,
               bool overlays, bool force);
// Output result name is `input` + "+crf" / "+sf".
std::string cmd_refine_crf(const PipelineConfig& cfg, const fs::path& data, const Run& run, const std::string& input,
                           bool force);
std::string cmd_refine_sf(const PipelineConfig& cfg, const fs::path& data, const Run& run, const std::string& input,
                          bool force);
metrics::AggregateReport cmd_eval(const PipelineConfig& cfg, const fs::path& data, const Run& run,
                                  const std::string& result, bool force);
// Rows follow Table I order for known labels, then the rest by name. Writes
// report.md and report.json into `out` and returns the table text.
std::string cmd_report(const std::vector<fs::path>& result_dirs, const fs::path& out, bool force);

// Gray frame with mask contours drawn in the given RGB colours, as PPM bytes.
struct Layer {
    const Mask* mask;
    std::uint8_t rgb[3];
};
std::vector<std::uint8_t> overlay(const Image& frame, const std::vector<Layer>& layers);

}  // namespace lvseg::pipeline
