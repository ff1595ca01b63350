#include "lvseg/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "lvseg/image_ops.hpp"
#include "lvseg/io.hpp"

namespace lvseg::pipeline {

using nlohmann::json;

namespace {

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
    if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
    if (!text.empty() && text.back() != '\n') out << '\n';
}

json parse(const std::string& text, const std::string& what) {
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw Error("malformed " + what + ": " + e.what());
    }
}

void require(const fs::path& path) {
    if (!fs::exists(path)) throw Error("missing artifact: " + path.string());
}

// Runs fn(0..n-1) on up to `threads` workers; each index writes only its own outputs.
void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
    if (threads <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
    std::vector<std::thread> pool;
    for (int w = 0; w < threads; ++w)
        pool.emplace_back([&, w] {
            try {
                for (int i = next++; i < n; i = next++) fn(i);
            } catch (...) {
                errors[static_cast<std::size_t>(w)] = std::current_exception();
                next = n;
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

std::string frame_name(const std::string& stem, int t, const char* ext) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "_%03d.", t);
    return stem + buf + ext;
}

struct CropInfo {
    BoundingBox window;
    int rows = 0;
    int cols = 0;
};

void write_crop(const fs::path& path, const CropInfo& c) {
    json j = {{"window", {c.window.x0, c.window.y0, c.window.x1, c.window.y1}}, {"rows", c.rows}, {"cols", c.cols}};
    write_text(path, j.dump(2));
}

CropInfo read_crop(const fs::path& path) {
    require(path);
    json j = parse(read_text(path), path.string());
    CropInfo c;
    try {
        auto w = j.at("window");
        c.window = {w.at(0).get<int>(), w.at(1).get<int>(), w.at(2).get<int>(), w.at(3).get<int>()};
        c.rows = j.at("rows").get<int>();
        c.cols = j.at("cols").get<int>();
    } catch (const json::exception& e) {
        throw Error("malformed " + path.string() + ": " + e.what());
    }
    if (!c.window.valid_for(c.rows, c.cols)) throw Error(path.string() + " holds a window outside the frame");
    return c;
}

CineSequence crop_input(const CineSequence& seq, const CropInfo& c, const net::NetworkConfig& n) {
    return resize_sequence(crop_to_bbox(seq, c.window, 0), n.input_rows, n.input_cols);
}

// Crop-space probabilities back to full-resolution masks.
MaskSequence full_masks(const ProbSequence& probs, const CropInfo& c) {
    MaskSequence out;
    for (const Image& p : probs.probs) {
        Mask m = threshold(resize(p, c.window.height(), c.window.width()));
        out.masks.push_back(uncrop(m, c.window, c.rows, c.cols));
    }
    return out;
}

void write_masks(const fs::path& dir, const MaskSequence& masks) {
    for (int t = 0; t < masks.length(); ++t) write_mask_pgm(dir / frame_name("mask", t, "pgm"), masks.masks[t]);
}

MaskSequence read_masks(const fs::path& dir, int frames) {
    MaskSequence out;
    for (int t = 0; t < frames; ++t) {
        fs::path p = dir / frame_name("mask", t, "pgm");
        require(p);
        out.masks.push_back(read_mask_pgm(p));
    }
    return out;
}

struct ResultInfo {
    std::string name;
    std::string split;
    std::vector<std::string> subjects;
};

void write_result_info(const Run& run, const ResultInfo& r, const std::string& source) {
    json j = {{"name", r.name}, {"label", result_label(r.name)}, {"source", source}, {"split", r.split},
              {"subjects", r.subjects}};
    write_text(run.result_dir(r.name) / "result.json", j.dump(2));
}

ResultInfo read_result_info(const Run& run, const std::string& name) {
    fs::path p = run.result_dir(name) / "result.json";
    require(p);
    json j = parse(read_text(p), p.string());
    ResultInfo r;
    r.name = name;
    r.split = j.value("split", std::string{});
    r.subjects = j.at("subjects").get<std::vector<std::string>>();
    return r;
}

template <typename T>
void merge_section(T& target, const json& patch, const std::string& section) {
    if (!patch.is_object()) throw Error("config section '" + section + "' must be an object");
    json merged = parse(target.to_json(), section);
    merged.merge_patch(patch);
    target = T::from_json(merged.dump());
}

const std::vector<std::string>& table_order() {
    static const std::vector<std::string> order = {"FCNN",    "T-FCNN",    "FCNN+CRFs",    "T-FCNN+CRFs",
                                                   "FCNN+SF", "T-FCNN+SF", "FCNN+CRFs+SF", "T-FCNN+CRFs+SF"};
    return order;
}

}  // namespace

// ---- configuration ----

PipelineConfig::PipelineConfig() {
    detector.input_rows = detector.input_cols = 32;
    network.depth = 3;
    network.base_channels = 8;
    network.input_rows = network.input_cols = 32;
    network.epochs = 12;
    network.max_frames = 60;
}

void PipelineConfig::validate() const {
    if (subjects < 1) throw Error("subjects must be at least 1");
    if (detector_frame_stride < 1) throw Error("detector_frame_stride must be at least 1");
    if (crop_margin < 0) throw Error("crop_margin must be non-negative");
    if (threads < 1) throw Error("threads must be at least 1");
    if (eval_split != "train" && eval_split != "validation" && eval_split != "test" && eval_split != "all")
        throw Error("eval_split must be train, validation, test or all");
    detector.validate();
    network.validate();
    crf.validate();
    semflow.validate();
}

void PipelineConfig::apply_seed(std::uint64_t s) {
    seed = s;
    detector.seed = s;
    network.seed = s;
}

std::string PipelineConfig::to_json() const {
    json j = {{"subjects", subjects},
              {"seed", seed},
              {"detector_frame_stride", detector_frame_stride},
              {"crop_margin", crop_margin},
              {"eval_split", eval_split},
              {"threads", threads},
              {"synth", json::parse(synth_to_json(synth))},
              {"detector", json::parse(detector.to_json())},
              {"network", json::parse(network.to_json())},
              {"crf", json::parse(crf.to_json())},
              {"semflow", json::parse(semflow.to_json())}};
    return j.dump(2);
}

PipelineConfig PipelineConfig::from_json(const std::string& text) {
    json j = parse(text, "pipeline config");
    if (!j.is_object()) throw Error("pipeline config must be a JSON object");
    PipelineConfig c;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        try {
            if (k == "subjects") c.subjects = it->get<int>();
            else if (k == "seed") c.seed = it->get<std::uint64_t>();
            else if (k == "detector_frame_stride") c.detector_frame_stride = it->get<int>();
            else if (k == "crop_margin") c.crop_margin = it->get<int>();
            else if (k == "eval_split") c.eval_split = it->get<std::string>();
            else if (k == "threads") c.threads = it->get<int>();
            else if (k == "synth") {
                json merged = json::parse(synth_to_json(c.synth));
                merged.merge_patch(*it);
                c.synth = synth_from_json(merged.dump());
            } else if (k == "detector") merge_section(c.detector, *it, k);
            else if (k == "network") merge_section(c.network, *it, k);
            else if (k == "crf") merge_section(c.crf, *it, k);
            else if (k == "semflow") merge_section(c.semflow, *it, k);
            else throw Error("unknown config key '" + k + "'");
        } catch (const json::exception& e) {
            throw Error("bad value for config key '" + k + "': " + e.what());
        }
    }
    c.validate();
    return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) { return from_json(read_text(path)); }

std::string synth_to_json(const SynthConfig& s) {
    json j = {{"frames", s.frames},
              {"rows", s.rows},
              {"cols", s.cols},
              {"radius_min", s.radius_min},
              {"radius_max", s.radius_max},
              {"aspect_jitter", s.aspect_jitter},
              {"contraction", s.contraction},
              {"ring_width", s.ring_width},
              {"drift", s.drift},
              {"noise", s.noise},
              {"distractors", s.distractors},
              {"distractor_radius", s.distractor_radius},
              {"distractor_presence", s.distractor_presence},
              {"dropout_probability", s.dropout_probability},
              {"spacing_mm", s.spacing_mm},
              {"blood", s.blood},
              {"myocardium", s.myocardium},
              {"background", s.background},
              {"speckle", s.speckle}};
    return j.dump(2);
}

SynthConfig synth_from_json(const std::string& text) {
    json j = parse(text, "synth config");
    if (!j.is_object()) throw Error("synth config must be a JSON object");
    SynthConfig s;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        try {
            if (k == "frames") s.frames = it->get<int>();
            else if (k == "rows") s.rows = it->get<int>();
            else if (k == "cols") s.cols = it->get<int>();
            else if (k == "radius_min") s.radius_min = it->get<double>();
            else if (k == "radius_max") s.radius_max = it->get<double>();
            else if (k == "aspect_jitter") s.aspect_jitter = it->get<double>();
            else if (k == "contraction") s.contraction = it->get<double>();
            else if (k == "ring_width") s.ring_width = it->get<double>();
            else if (k == "drift") s.drift = it->get<double>();
            else if (k == "noise") s.noise = it->get<double>();
            else if (k == "distractors") s.distractors = it->get<int>();
            else if (k == "distractor_radius") s.distractor_radius = it->get<double>();
            else if (k == "distractor_presence") s.distractor_presence = it->get<double>();
            else if (k == "dropout_probability") s.dropout_probability = it->get<double>();
            else if (k == "spacing_mm") s.spacing_mm = it->get<double>();
            else if (k == "blood") s.blood = it->get<double>();
            else if (k == "myocardium") s.myocardium = it->get<double>();
            else if (k == "background") s.background = it->get<double>();
            else if (k == "speckle") s.speckle = it->get<double>();
            else throw Error("unknown synth parameter '" + k + "'");
        } catch (const json::exception& e) {
            throw Error("bad value for synth parameter '" + k + "': " + e.what());
        }
    }
    return s;
}

std::string result_label(const std::string& name) {
    std::string out;
    std::stringstream ss(name);
    std::string part;
    while (std::getline(ss, part, '+')) {
        std::string l;
        if (part == "fcnn") l = "FCNN";
        else if (part == "tfcnn") l = "T-FCNN";
        else if (part == "crf") l = "CRFs";
        else if (part == "sf") l = "SF";
        else l = part;
        out += (out.empty() ? "" : "+") + l;
    }
    return out;
}

// ---- run directory ----

Run::Run(fs::path root) : root_(std::move(root)) { fs::create_directories(root_); }

void Run::record(const std::string& stage, const fs::path& dir) const {
    const fs::path index = root_ / "artifacts.json";
    json j = fs::exists(index) ? parse(read_text(index), index.string()) : json::object();
    std::vector<std::string> files;
    if (fs::exists(dir))
        for (const auto& e : fs::recursive_directory_iterator(dir))
            if (e.is_regular_file()) files.push_back(fs::relative(e.path(), root_).generic_string());
    std::sort(files.begin(), files.end());
    j[stage] = files;
    write_text(index, j.dump(2));
}

void prepare_output(const fs::path& dir, bool force) {
    if (fs::exists(dir) && !fs::is_directory(dir)) throw Error(dir.string() + " exists and is not a directory");
    if (fs::exists(dir) && !fs::is_empty(dir)) {
        if (!force) throw Error("output directory " + dir.string() + " is not empty (use --force to overwrite)");
        fs::remove_all(dir);
    }
    fs::create_directories(dir);
}

std::vector<std::string> split_subjects(const Dataset& data, const std::string& split, std::string* used) {
    std::vector<std::string> ids;
    if (split == "train") ids = data.split.train;
    else if (split == "validation") ids = data.split.validation;
    else if (split == "test") ids = data.split.test;
    else if (split != "all") throw Error("unknown split '" + split + "'");
    std::string name = split;
    if (ids.empty()) {
        if (split != "all") std::cerr << "warning: split '" << split << "' is empty, using all subjects\n";
        for (const auto& s : data.sequences) ids.push_back(s.subject_id);
        name = "all";
    }
    if (used) *used = name;
    return ids;
}

net::LabeledSequence truth_crop(const CineSequence& seq, const MaskSequence& masks, int margin, int size_rows,
                                int size_cols) {
    std::vector<BoundingBox> boxes;
    for (const auto& m : masks.masks)
        if (mask_area(m) > 0) boxes.push_back(mask_bounds(m));
    BoundingBox hull = boxes.empty() ? BoundingBox{0, 0, seq.cols(), seq.rows()} : det::sequence_box(boxes);
    return {resize_sequence(crop_to_bbox(seq, hull, margin), size_rows, size_cols),
            resize_sequence(crop_to_bbox(masks, hull, margin), size_rows, size_cols)};
}

std::vector<std::uint8_t> overlay(const Image& frame, const std::vector<Layer>& layers) {
    std::vector<std::uint8_t> rgb(frame.size() * 3);
    for (std::size_t i = 0; i < frame.size(); ++i) {
        auto g = static_cast<std::uint8_t>(std::lround(std::clamp(frame[i], 0.0, 1.0) * 255.0));
        rgb[3 * i] = rgb[3 * i + 1] = rgb[3 * i + 2] = g;
    }
    for (const Layer& l : layers) {
        if (!l.mask || !l.mask->same_shape(frame)) continue;
        for (const auto& p : metrics::extract_contour(*l.mask)) {
            std::size_t i = static_cast<std::size_t>(p.row) * frame.cols() + p.col;
            for (int k = 0; k < 3; ++k) rgb[3 * i + k] = l.rgb[k];
        }
    }
    return rgb;
}

// ---- stages ----

void cmd_synth(const PipelineConfig& cfg, const fs::path& out, bool force) {
    cfg.validate();
    prepare_output(out, force);
    Dataset data = synth_dataset(cfg.synth, cfg.subjects, cfg.seed);
    write_dataset(out, data);
    json meta = {{"seed", cfg.seed}, {"subjects", cfg.subjects}, {"synth", json::parse(synth_to_json(cfg.synth))}};
    write_text(out / "synth.json", meta.dump(2));
}

void cmd_train_detector(const PipelineConfig& cfg, const fs::path& data_path, const Run& run, bool force) {
    cfg.validate();
    Dataset data = load_dataset(data_path);
    std::vector<det::BoxSample> samples;
    std::vector<std::string> train_ids = data.split.train.empty() ? split_subjects(data, "all") : data.split.train;
    for (const auto& id : train_ids) {
        std::size_t i = data.index_of(id);
        const auto& seq = data.sequences[i];
        for (int t = 0; t < seq.length(); t += cfg.detector_frame_stride) {
            const Mask& m = data.masks[i].masks[t];
            if (mask_area(m) == 0) continue;
            samples.push_back({seq.frames[t], mask_bounds(m)});
        }
    }
    const fs::path dir = run.detector_dir();
    prepare_output(dir, force);
    det::BoxRegressor reg(cfg.detector);
    {
        std::ofstream log(dir / "log.jsonl", std::ios::binary);
        det::train_detector(reg, samples, &log);
    }
    det::save(reg, dir / "model.ckpt");

    std::string split;
    json subjects = json::array();
    double hull_sum = 0.0, frame_sum = 0.0;
    int frame_count = 0;
    auto ids = split_subjects(data, cfg.eval_split, &split);
    for (const auto& id : ids) {
        std::size_t i = data.index_of(id);
        auto boxes = det::detect_sequence(reg, data.sequences[i]);
        std::vector<BoundingBox> truth;
        double fsum = 0.0;
        int fcount = 0;
        for (int t = 0; t < data.masks[i].length(); ++t) {
            const Mask& m = data.masks[i].masks[t];
            if (mask_area(m) == 0) continue;
            truth.push_back(mask_bounds(m));
            fsum += det::iou(boxes[t], truth.back());
            ++fcount;
        }
        double hull = truth.empty() ? 0.0 : det::iou(det::sequence_box(boxes), det::sequence_box(truth));
        hull_sum += hull;
        frame_sum += fsum;
        frame_count += fcount;
        subjects.push_back({{"subject", id}, {"hull_iou", hull}, {"frame_iou", fcount ? fsum / fcount : 0.0}});
    }
    json eval = {{"split", split},
                 {"mean_hull_iou", ids.empty() ? 0.0 : hull_sum / ids.size()},
                 {"mean_frame_iou", frame_count ? frame_sum / frame_count : 0.0},
                 {"subjects", subjects}};
    write_text(dir / "eval.json", eval.dump(2));
    run.record("train-detector", dir);
}

void cmd_train(const PipelineConfig& cfg, const fs::path& data_path, const Run& run, const std::string& model,
               bool force) {
    if (model != "fcnn" && model != "tfcnn") throw Error("model must be fcnn or tfcnn, got '" + model + "'");
    cfg.validate();
    Dataset data = load_dataset(data_path);
    net::NetworkConfig nc = cfg.network;
    nc.recurrent = model == "tfcnn";
    auto crops = [&](const std::vector<std::string>& ids) {
        std::vector<net::LabeledSequence> out;
        for (const auto& id : ids) {
            std::size_t i = data.index_of(id);
            out.push_back(truth_crop(data.sequences[i], data.masks[i], cfg.crop_margin, nc.input_rows, nc.input_cols));
        }
        return out;
    };
    std::vector<std::string> train_ids = data.split.train.empty() ? split_subjects(data, "all") : data.split.train;
    auto train_set = crops(train_ids);
    auto val_set = crops(data.split.validation);
    const fs::path dir = run.model_dir(model);
    prepare_output(dir, force);
    net::SegNet segnet(nc);
    {
        std::ofstream log(dir / "log.jsonl", std::ios::binary);
        net::train(segnet, train_set, val_set, &log);
    }
    net::save(segnet, dir / "model.ckpt");
    run.record("train-" + model, dir);
}

void cmd_infer(const PipelineConfig& cfg, const fs::path& data_path, const Run& run, const std::string& model,
               bool overlays, bool force) {
    if (model != "fcnn" && model != "tfcnn") throw Error("model must be fcnn or tfcnn, got '" + model + "'");
    cfg.validate();
    const fs::path det_ckpt = run.detector_dir() / "model.ckpt";
    const fs::path net_ckpt = run.model_dir(model) / "model.ckpt";
    require(det_ckpt);
    require(net_ckpt);
    Dataset data = load_dataset(data_path);
    det::BoxRegressor reg = det::load_detector(det_ckpt);
    net::SegNet segnet = net::load(net_ckpt);

    ResultInfo info;
    info.name = model;
    info.subjects = split_subjects(data, cfg.eval_split, &info.split);
    const fs::path dir = run.result_dir(model);
    prepare_output(dir, force);
    for (const auto& id : info.subjects) {
        std::size_t i = data.index_of(id);
        const CineSequence& seq = data.sequences[i];
        auto boxes = det::detect_sequence(reg, seq);
        CropInfo crop{dilate_box(det::sequence_box(boxes), cfg.crop_margin, seq.rows(), seq.cols()), seq.rows(),
                      seq.cols()};
        ProbSequence probs = net::forward_sequence(segnet, crop_input(seq, crop, segnet.config()));
        const fs::path sub = dir / id;
        fs::create_directories(sub);
        write_crop(sub / "crop.json", crop);
        write_probs(sub / "probs.bin", probs);
        MaskSequence masks = full_masks(probs, crop);
        write_masks(sub, masks);
        if (overlays) {
            // Truth red, FCNN blue, T-FCNN green.
            const std::string other = model == "fcnn" ? "tfcnn" : "fcnn";
            const fs::path other_dir = run.result_dir(other) / id;
            MaskSequence other_masks;
            if (fs::exists(other_dir / frame_name("mask", seq.length() - 1, "pgm")))
                other_masks = read_masks(other_dir, seq.length());
            for (int t = 0; t < seq.length(); ++t) {
                const Mask* fcnn = model == "fcnn" ? &masks.masks[t] : (other_masks.length() ? &other_masks.masks[t] : nullptr);
                const Mask* tfcnn = model == "tfcnn" ? &masks.masks[t] : (other_masks.length() ? &other_masks.masks[t] : nullptr);
                std::vector<Layer> layers = {{&data.masks[i].masks[t], {255, 0, 0}},
                                             {fcnn, {0, 96, 255}},
                                             {tfcnn, {0, 220, 0}}};
                write_ppm(sub / frame_name("overlay", t, "ppm"), seq.rows(), seq.cols(),
                          overlay(seq.frames[t], layers));
            }
        }
    }
    write_result_info(run, info, model);
    run.record("infer-" + model, dir);
}

namespace {

using Refiner = std::function<ProbSequence(const CineSequence& crop_seq, const ProbSequence& probs, const fs::path& sub)>;

std::string refine_stage(const PipelineConfig& cfg, const fs::path& data_path, const Run& run,
                         const std::string& input, const std::string& suffix, bool force, const Refiner& refiner) {
    cfg.validate();
    ResultInfo in = read_result_info(run, input);
    Dataset data = load_dataset(data_path);
    ResultInfo out = in;
    out.name = input + "+" + suffix;
    const fs::path dir = run.result_dir(out.name);
    prepare_output(dir, force);
    parallel_for(static_cast<int>(in.subjects.size()), cfg.threads, [&](int k) {
        const std::string& id = in.subjects[static_cast<std::size_t>(k)];
        const fs::path src = run.result_dir(input) / id;
        CropInfo crop = read_crop(src / "crop.json");
        require(src / "probs.bin");
        ProbSequence probs = read_probs(src / "probs.bin");
        const CineSequence& seq = data.sequences[data.index_of(id)];
        if (seq.rows() != crop.rows || seq.cols() != crop.cols) throw Error("crop record of " + id + " does not match the dataset");
        net::NetworkConfig size;
        size.input_rows = probs.probs.empty() ? 1 : probs.probs.front().rows();
        size.input_cols = probs.probs.empty() ? 1 : probs.probs.front().cols();
        CineSequence crop_seq = crop_input(seq, crop, size);
        const fs::path sub = dir / id;
        fs::create_directories(sub);
        ProbSequence refined = refiner(crop_seq, probs, sub);
        write_crop(sub / "crop.json", crop);
        write_probs(sub / "probs.bin", refined);
        write_masks(sub, full_masks(refined, crop));
    });
    write_result_info(run, out, input);
    run.record("refine-" + suffix + ":" + out.name, dir);
    return out.name;
}

ProbSequence as_probs(const MaskSequence& masks) {
    ProbSequence p;
    for (const Mask& m : masks.masks) {
        Image img(m.rows(), m.cols());
        for (std::size_t i = 0; i < m.size(); ++i) img[i] = m[i] ? 1.0 : 0.0;
        p.probs.push_back(std::move(img));
    }
    return p;
}

}  // namespace

std::string cmd_refine_crf(const PipelineConfig& cfg, const fs::path& data, const Run& run, const std::string& input,
                           bool force) {
    return refine_stage(cfg, data, run, input, "crf", force,
                        [&](const CineSequence& seq, const ProbSequence& probs, const fs::path& sub) {
                            crf::CrfResult r = crf::refine(probs, seq, cfg.crf);
                            json j = {{"line_search_warning", r.warning}, {"traces", r.traces}};
                            write_text(sub / "crf_trace.json", j.dump());
                            return as_probs(r.masks);
                        });
}

std::string cmd_refine_sf(const PipelineConfig& cfg, const fs::path& data, const Run& run, const std::string& input,
                          bool force) {
    return refine_stage(cfg, data, run, input, "sf", force,
                        [&](const CineSequence& seq, const ProbSequence& probs, const fs::path& sub) {
                            sf::SfResult r = sf::refine_sf(seq, threshold(probs), cfg.semflow);
                            const std::size_t pairs = r.flow.u.size();
                            std::vector<double> planes;
                            for (std::size_t t = 0; t < pairs; ++t) {
                                planes.insert(planes.end(), r.flow.u[t].values().begin(), r.flow.u[t].values().end());
                                planes.insert(planes.end(), r.flow.v[t].values().begin(), r.flow.v[t].values().end());
                            }
                            write_planes(sub / "flow.bin",
                                         {pairs, 2, static_cast<std::size_t>(seq.rows()), static_cast<std::size_t>(seq.cols())},
                                         planes, R"({"layout":"pair,(u,v),row,col"})");
                            write_text(sub / "energy.json", json{{"trace", r.trace}}.dump());
                            return as_probs(r.masks);
                        });
}

metrics::AggregateReport cmd_eval(const PipelineConfig& cfg, const fs::path& data_path, const Run& run,
                                  const std::string& result, bool force) {
    cfg.validate();
    ResultInfo info = read_result_info(run, result);
    const fs::path out = run.result_dir(result) / "metrics.json";
    if (fs::exists(out) && !force) throw Error(out.string() + " exists (use --force to overwrite)");
    Dataset data = load_dataset(data_path);
    std::vector<metrics::MetricReport> reports(info.subjects.size());
    parallel_for(static_cast<int>(info.subjects.size()), cfg.threads, [&](int k) {
        const std::string& id = info.subjects[static_cast<std::size_t>(k)];
        std::size_t i = data.index_of(id);
        MaskSequence pred = read_masks(run.result_dir(result) / id, data.sequences[i].length());
        reports[static_cast<std::size_t>(k)] = metrics::evaluate_sequence(pred, data.masks[i], data.sequences[i].spacing);
        reports[static_cast<std::size_t>(k)].subject_id = id;
    });
    metrics::AggregateReport agg = metrics::aggregate(result_label(result), reports);
    json subjects = json::array();
    for (const auto& r : reports) subjects.push_back(json::parse(metrics::to_json(r)));
    json j = {{"result", result}, {"split", info.split}, {"aggregate", json::parse(metrics::to_json(agg))},
              {"subjects", subjects}};
    write_text(out, j.dump(2));
    run.record("eval:" + result, run.result_dir(result));
    return agg;
}

std::string cmd_report(const std::vector<fs::path>& result_dirs, const fs::path& out, bool force) {
    if (result_dirs.empty()) throw Error("report needs at least one result directory");
    std::vector<metrics::AggregateReport> rows;
    for (const auto& d : result_dirs) {
        fs::path p = d / "metrics.json";
        require(p);
        json j = parse(read_text(p), p.string());
        if (!j.contains("aggregate")) throw Error(p.string() + " has no aggregate section");
        rows.push_back(metrics::aggregate_from_json(j.at("aggregate").dump()));
    }
    auto rank = [](const std::string& label) {
        const auto& order = table_order();
        auto it = std::find(order.begin(), order.end(), label);
        return it == order.end() ? order.size() : static_cast<std::size_t>(it - order.begin());
    };
    std::stable_sort(rows.begin(), rows.end(), [&](const auto& a, const auto& b) {
        std::size_t ra = rank(a.label), rb = rank(b.label);
        return ra != rb ? ra < rb : a.label < b.label;
    });
    fs::create_directories(out);
    if (!force && (fs::exists(out / "report.md") || fs::exists(out / "report.json")))
        throw Error("report already exists in " + out.string() + " (use --force to overwrite)");
    std::string table = metrics::format_table(rows);
    json arr = json::array();
    for (const auto& r : rows) arr.push_back(json::parse(metrics::to_json(r)));
    write_text(out / "report.md", table);
    write_text(out / "report.json", arr.dump(2));
    return table;
}

}  // namespace lvseg::pipeline
