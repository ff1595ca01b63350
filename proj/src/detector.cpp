#include "lvseg/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>

#include "json.hpp"
#include "lvseg/image_ops.hpp"

namespace lvseg::det {
using nlohmann::json;

void DetectorConfig::validate() const {
    if (input_rows <= 0 || input_cols <= 0 || input_rows % 8 || input_cols % 8)
        throw Error("detector input size must be a positive multiple of 8");
    if (base_channels < 1) throw Error("detector base channel count must be >= 1");
    if (hidden < 0) throw Error("detector hidden width must be >= 0");
    if (epochs < 0) throw Error("detector epoch count must be non-negative");
    if (batch < 1) throw Error("detector batch must be >= 1");
    if (!(lr > 0.0)) throw Error("detector learning rate must be positive");
}

std::string DetectorConfig::to_json() const {
    json j = {{"input_rows", input_rows}, {"input_cols", input_cols}, {"base_channels", base_channels},
              {"hidden", hidden},         {"epochs", epochs},         {"batch", batch},           {"lr", lr},
              {"seed", seed}};
    return j.dump();
}

DetectorConfig DetectorConfig::from_json(const std::string& text) {
    DetectorConfig c;
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw Error(std::string("malformed detector config: ") + e.what());
    }
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        try {
            if (k == "input_rows") c.input_rows = it->get<int>();
            else if (k == "input_cols") c.input_cols = it->get<int>();
            else if (k == "base_channels") c.base_channels = it->get<int>();
            else if (k == "hidden") c.hidden = it->get<int>();
            else if (k == "epochs") c.epochs = it->get<int>();
            else if (k == "batch") c.batch = it->get<int>();
            else if (k == "lr") c.lr = it->get<double>();
            else if (k == "seed") c.seed = it->get<std::uint64_t>();
            else throw Error("unknown detector config key '" + k + "'");
        } catch (const json::exception& e) {
            throw Error("bad value for detector config key '" + k + "': " + e.what());
        }
    }
    c.validate();
    return c;
}

BoxRegressor::BoxRegressor(const DetectorConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    auto he = [&](ad::Parameter& p, int fan_in) {
        std::uniform_real_distribution<double> u(-std::sqrt(6.0 / fan_in), std::sqrt(6.0 / fan_in));
        for (double& v : p.value.values()) v = u(rng);
    };
    int cin = 1;
    for (int k = 0; k < 3; ++k) {
        const int c = cfg_.base_channels << k;
        const std::string pre = "trunk" + std::to_string(k);
        ad::Parameter& w = store_.add(pre + ".w", {c, cin, 3, 3});
        ad::Parameter& b = store_.add(pre + ".b", {c});
        he(w, cin * 9);
        trunk_.emplace_back(&w, &b);
        cin = c;
    }
    int features = cin * (cfg_.input_rows / 8) * (cfg_.input_cols / 8);
    if (cfg_.hidden > 0) {
        hidden_w_ = &store_.add("hidden.w", {cfg_.hidden, features});
        hidden_b_ = &store_.add("hidden.b", {cfg_.hidden});
        he(*hidden_w_, features);
        features = cfg_.hidden;
    }
    fc_w_ = &store_.add("fc.w", {4, features});
    fc_b_ = &store_.add("fc.b", {4});
    // A narrow range keeps the initial outputs near the bias.
    std::uniform_real_distribution<double> u(-std::sqrt(0.3 / features), std::sqrt(0.3 / features));
    for (double& v : fc_w_->value.values()) v = u(rng);
    const double centre[4] = {0.25, 0.25, 0.75, 0.75};
    for (int i = 0; i < 4; ++i) fc_b_->value[static_cast<std::size_t>(i)] = centre[i];
}

ad::Var BoxRegressor::forward(ad::Graph& g, ad::Var frame) {
    const ad::Tensor& f = frame.value();
    if (f.rank() != 3 || f.dim(0) != 1 || f.dim(1) != cfg_.input_rows || f.dim(2) != cfg_.input_cols)
        throw Error("detector input of shape " + ad::shape_string(f.shape()) + " does not match " +
                    std::to_string(cfg_.input_rows) + "x" + std::to_string(cfg_.input_cols));
    ad::Var x = frame;
    for (auto [w, b] : trunk_) x = ad::maxpool2(ad::relu(ad::conv2d(x, g.parameter(*w), g.parameter(*b), 1, 1)));
    if (hidden_w_) x = ad::relu(ad::linear(x, g.parameter(*hidden_w_), g.parameter(*hidden_b_)));
    return ad::linear(x, g.parameter(*fc_w_), g.parameter(*fc_b_));
}

ad::Tensor normalized_box(const BoundingBox& box, int rows, int cols) {
    return ad::Tensor({4}, {static_cast<double>(box.x0) / cols, static_cast<double>(box.y0) / rows,
                            static_cast<double>(box.x1) / cols, static_cast<double>(box.y1) / rows});
}

BoundingBox denormalize_box(std::span<const double> c, int rows, int cols) {
    if (c.size() != 4) throw Error("a box needs four coordinates");
    auto clamp01 = [](double v) { return std::isfinite(v) ? std::clamp(v, 0.0, 1.0) : 0.5; };
    auto axis = [](double a, double b, int extent, int& lo, int& hi) {
        lo = static_cast<int>(std::lround(std::min(a, b) * extent));
        hi = static_cast<int>(std::lround(std::max(a, b) * extent));
        lo = std::clamp(lo, 0, extent - 1);
        hi = std::clamp(hi, lo + 1, extent);
    };
    BoundingBox box;
    axis(clamp01(c[0]), clamp01(c[2]), cols, box.x0, box.x1);
    axis(clamp01(c[1]), clamp01(c[3]), rows, box.y0, box.y1);
    return box;
}

namespace {

ad::Tensor input_tensor(const Image& frame, const DetectorConfig& cfg) {
    const Image sized = resize(frame, cfg.input_rows, cfg.input_cols);
    return ad::Tensor({1, sized.rows(), sized.cols()}, sized.values());
}

}  // namespace

BoundingBox detect(BoxRegressor& reg, const Image& frame) {
    ad::Graph g;
    const ad::Var out = reg.forward(g, g.constant(input_tensor(frame, reg.config())));
    return denormalize_box(out.value().values(), frame.rows(), frame.cols());
}

std::vector<BoundingBox> detect_sequence(BoxRegressor& reg, const CineSequence& seq) {
    std::vector<BoundingBox> out;
    out.reserve(seq.frames.size());
    for (const Image& f : seq.frames) out.push_back(detect(reg, f));
    return out;
}

std::vector<double> train_detector(BoxRegressor& reg, const std::vector<BoxSample>& data, std::ostream* log) {
    if (data.empty()) throw Error("detector training set is empty");
    const DetectorConfig& cfg = reg.config();
    std::vector<ad::Tensor> inputs, targets;
    for (const auto& s : data) {
        if (!s.box.valid_for(s.frame.rows(), s.frame.cols())) throw Error("training box outside its frame");
        inputs.push_back(input_tensor(s.frame, cfg));
        targets.push_back(normalized_box(s.box, s.frame.rows(), s.frame.cols()));
    }
    auto trainable = reg.params().trainable();
    ad::Adadelta opt(trainable, cfg.lr);
    std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> history;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double total = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
            const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
            const double scale = 1.0 / static_cast<double>(stop - start);
            reg.params().zero_grad();
            for (std::size_t k = start; k < stop; ++k) {
                try {
                    ad::Graph g;
                    const ad::Var loss = ad::mse(reg.forward(g, g.constant(inputs[order[k]])), targets[order[k]]);
                    const double v = loss.value()[0];
                    if (!std::isfinite(v)) throw Error("loss is not finite");
                    g.backward(ad::affine(loss, scale, 0.0));
                    total += v;
                } catch (const Error& e) {
                    throw Error("detector training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
                }
            }
            opt.step();
        }
        history.push_back(total / static_cast<double>(data.size()));
        if (log) *log << json{{"epoch", epoch}, {"train_loss", history.back()}}.dump() << '\n';
    }
    return history;
}

double iou(const BoundingBox& a, const BoundingBox& b) {
    const long iw = std::max(0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
    const long ih = std::max(0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
    const long inter = iw * ih;
    const long uni = a.area() + b.area() - inter;
    return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

BoundingBox sequence_box(std::span<const BoundingBox> boxes) {
    if (boxes.empty()) throw Error("sequence_box of an empty list");
    BoundingBox hull = boxes.front();
    for (const auto& b : boxes.subspan(1)) {
        hull.x0 = std::min(hull.x0, b.x0);
        hull.y0 = std::min(hull.y0, b.y0);
        hull.x1 = std::max(hull.x1, b.x1);
        hull.y1 = std::max(hull.y1, b.y1);
    }
    return hull;
}

void save(const BoxRegressor& reg, const std::filesystem::path& path) {
    json meta = {{"model", "box-regressor"}, {"config", json::parse(reg.config().to_json())}};
    ad::save_checkpoint(path, reg.params(), meta.dump());
}

BoxRegressor load_detector(const std::filesystem::path& path) {
    const json meta = json::parse(ad::read_checkpoint_meta(path));
    if (meta.value("model", std::string{}) != "box-regressor") throw Error(path.string() + " is not a detector checkpoint");
    BoxRegressor reg(DetectorConfig::from_json(meta.at("config").dump()));
    ad::load_checkpoint(path, reg.params());
    return reg;
}

}  // namespace lvseg::det
