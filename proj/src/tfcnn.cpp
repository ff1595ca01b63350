#include "lvseg/tfcnn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>

#include "json.hpp"
#include "lvseg/metrics.hpp"

namespace lvseg::net {
using nlohmann::json;

void NetworkConfig::validate() const {
    if (depth < 1) throw Error("network depth must be >= 1");
    if (base_channels < 1) throw Error("base channel count must be >= 1");
    if (gru_kernel < 1 || gru_kernel % 2 == 0) throw Error("GRU kernel must be odd and positive");
    const int div = 1 << depth;
    if (input_rows <= 0 || input_cols <= 0 || input_rows % div || input_cols % div)
        throw Error("input size " + std::to_string(input_rows) + "x" + std::to_string(input_cols) +
                    " is not divisible by 2^depth = " + std::to_string(div));
    if (!(lr > 0.0)) throw Error("learning rate must be positive");
    if (epochs < 0) throw Error("epoch count must be non-negative");
    if (max_frames < 1) throw Error("max_frames must be >= 1");
    if (!(bn_eps > 0.0)) throw Error("batch-norm eps must be positive");
}

std::string NetworkConfig::to_json() const {
    json j = {{"depth", depth},           {"base_channels", base_channels}, {"recurrent", recurrent},
              {"gru_kernel", gru_kernel}, {"input_rows", input_rows},       {"input_cols", input_cols},
              {"clip_norm", clip_norm},   {"lr", lr},                       {"epochs", epochs},
              {"seed", seed},             {"max_frames", max_frames},       {"bn_eps", bn_eps}};
    return j.dump();
}

NetworkConfig NetworkConfig::from_json(const std::string& text) {
    NetworkConfig c;
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw Error(std::string("malformed network config: ") + e.what());
    }
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        try {
            if (k == "depth") c.depth = it->get<int>();
            else if (k == "base_channels") c.base_channels = it->get<int>();
            else if (k == "recurrent") c.recurrent = it->get<bool>();
            else if (k == "gru_kernel") c.gru_kernel = it->get<int>();
            else if (k == "input_rows") c.input_rows = it->get<int>();
            else if (k == "input_cols") c.input_cols = it->get<int>();
            else if (k == "clip_norm") c.clip_norm = it->get<double>();
            else if (k == "lr") c.lr = it->get<double>();
            else if (k == "epochs") c.epochs = it->get<int>();
            else if (k == "seed") c.seed = it->get<std::uint64_t>();
            else if (k == "max_frames") c.max_frames = it->get<int>();
            else if (k == "bn_eps") c.bn_eps = it->get<double>();
            else throw Error("unknown network config key '" + k + "'");
        } catch (const json::exception& e) {
            throw Error("bad value for network config key '" + k + "': " + e.what());
        }
    }
    c.validate();
    return c;
}

ad::Var Binder::operator()(ad::Parameter& p) {
    auto it = bound_.find(&p);
    if (it != bound_.end()) return it->second;
    ad::Var v = graph_.parameter(p);
    bound_.emplace(&p, v);
    return v;
}

ad::Var conv_gru_step(Binder& bind, ad::Var x, ad::Var h, const GruParams& p) {
    const int pad = p.wz->value.dim(2) / 2;
    auto gate = [&](ad::Parameter* w, ad::Parameter* b, ad::Parameter* u, ad::Var hidden) {
        return ad::add(ad::conv2d(x, bind(*w), bind(*b), 1, pad), ad::conv2d(hidden, bind(*u), {}, 1, pad));
    };
    ad::Var z = ad::sigmoid(gate(p.wz, p.bz, p.uz, h));
    ad::Var r = ad::sigmoid(gate(p.wr, p.br, p.ur, h));
    ad::Var candidate = ad::tanh(gate(p.wh, p.bh, p.uh, ad::hadamard(r, h)));
    return ad::add(ad::hadamard(ad::affine(z, -1.0, 1.0), h), ad::hadamard(z, candidate));
}

namespace {

void he_uniform(ad::Parameter& p, int fan_in, std::mt19937_64& rng) {
    const double bound = std::sqrt(6.0 / fan_in);
    std::uniform_real_distribution<double> u(-bound, bound);
    for (double& v : p.value.values()) v = u(rng);
}

}  // namespace

SegNet::SegNet(const NetworkConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    auto conv = [&](const std::string& name, int cin, int cout, int k) {
        ad::Parameter& w = store_.add(name, {cout, cin, k, k});
        he_uniform(w, cin * k * k, rng);
        return &w;
    };
    auto init_block = [&](Block& blk) {
        he_uniform(*blk.first.w, blk.first.w->value.dim(1) * 9, rng);
        he_uniform(*blk.second.w, blk.second.w->value.dim(1) * 9, rng);
    };

    int cin = 1;
    for (int k = 0; k < cfg_.depth; ++k) {
        const int c = cfg_.base_channels << k;
        const std::string pre = "enc" + std::to_string(k);
        Block blk;
        blk.first = add_conv_bn(pre + ".0", cin, c);
        blk.second = add_conv_bn(pre + ".1", c, c);
        init_block(blk);
        encoder_.push_back(blk);
        cin = c;
    }
    const int cb = bottleneck_channels();
    const int gk = cfg_.gru_kernel;
    if (cfg_.recurrent) {
        gru_.wz = conv("gru.wz", cb, cb, gk);
        gru_.uz = conv("gru.uz", cb, cb, gk);
        gru_.bz = &store_.add("gru.bz", {cb});
        gru_.wr = conv("gru.wr", cb, cb, gk);
        gru_.ur = conv("gru.ur", cb, cb, gk);
        gru_.br = &store_.add("gru.br", {cb});
        gru_.wh = conv("gru.wh", cb, cb, gk);
        gru_.uh = conv("gru.uh", cb, cb, gk);
        gru_.bh = &store_.add("gru.bh", {cb});
    } else {
        bottleneck_w_ = conv("bottleneck.w", cb, cb, 3);
        bottleneck_b_ = &store_.add("bottleneck.b", {cb});
    }
    decoder_.resize(static_cast<std::size_t>(cfg_.depth));
    int cur = cb;
    for (int k = cfg_.depth - 1; k >= 0; --k) {
        const int c = cfg_.base_channels << k;
        const std::string pre = "dec" + std::to_string(k);
        Block& blk = decoder_[static_cast<std::size_t>(k)];
        blk.up = &store_.add(pre + ".up", {cur, c, 2, 2});
        he_uniform(*blk.up, cur, rng);
        blk.first = add_conv_bn(pre + ".0", 2 * c, c);
        blk.second = add_conv_bn(pre + ".1", c, c);
        init_block(blk);
        cur = c;
    }
    head_w_ = conv("head.w", cfg_.base_channels, 2, 1);
    head_b_ = &store_.add("head.b", {2});
}

SegNet::ConvBn SegNet::add_conv_bn(const std::string& prefix, int cin, int cout) {
    ConvBn l{};
    l.w = &store_.add(prefix + ".w", {cout, cin, 3, 3});
    l.b = &store_.add(prefix + ".b", {cout});
    l.gamma = &store_.add(prefix + ".gamma", {cout});
    l.gamma->value.fill(1.0);
    l.beta = &store_.add(prefix + ".beta", {cout});
    l.running_mean = &store_.add(prefix + ".running_mean", {cout}, false);
    l.running_var = &store_.add(prefix + ".running_var", {cout}, false);
    l.running_var->value.fill(1.0);
    return l;
}

int SegNet::bottleneck_channels() const { return cfg_.base_channels << (cfg_.depth - 1); }

ad::Tensor SegNet::zero_state() const {
    return ad::Tensor({bottleneck_channels(), bottleneck_rows(), bottleneck_cols()});
}

ad::Var SegNet::apply(Binder& bind, const ConvBn& l, ad::Var x, bool training) {
    ad::Var y = ad::relu(ad::conv2d(x, bind(*l.w), bind(*l.b), 1, 1));
    return ad::batchnorm(y, bind(*l.gamma), bind(*l.beta), cfg_.bn_eps, {l.running_mean, l.running_var, 0.9},
                         training);
}

SegNet::FrameOutput SegNet::forward_frame(Binder& bind, ad::Var frame, ad::Var state, bool training) {
    const ad::Tensor& f = frame.value();
    if (f.rank() != 3 || f.dim(0) != 1 || f.dim(1) != cfg_.input_rows || f.dim(2) != cfg_.input_cols)
        throw Error("frame of shape " + ad::shape_string(f.shape()) + " does not match network input " +
                    std::to_string(cfg_.input_rows) + "x" + std::to_string(cfg_.input_cols));
    std::vector<ad::Var> skips;
    ad::Var x = frame;
    for (const Block& blk : encoder_) {
        x = apply(bind, blk.second, apply(bind, blk.first, x, training), training);
        skips.push_back(x);
        x = ad::maxpool2(x);
    }
    FrameOutput out;
    if (cfg_.recurrent) {
        if (!state) state = bind.graph().constant(zero_state());
        x = conv_gru_step(bind, x, state, gru_);
        out.state = x;
    } else {
        x = ad::relu(ad::conv2d(x, bind(*bottleneck_w_), bind(*bottleneck_b_), 1, 1));
    }
    for (int k = cfg_.depth - 1; k >= 0; --k) {
        const Block& blk = decoder_[static_cast<std::size_t>(k)];
        x = ad::concat_channels(ad::upconv2(x, bind(*blk.up)), skips[static_cast<std::size_t>(k)]);
        x = apply(bind, blk.second, apply(bind, blk.first, x, training), training);
    }
    out.logits = ad::conv2d(x, bind(*head_w_), bind(*head_b_), 1, 0);
    return out;
}

ad::Tensor frame_tensor(const Image& img) {
    return ad::Tensor({1, img.rows(), img.cols()}, img.values());
}

std::vector<ad::Var> forward_logits(Binder& bind, SegNet& net, std::span<const ad::Var> frames, bool training) {
    std::vector<ad::Var> out;
    ad::Var state;
    for (const ad::Var& f : frames) {
        auto step = net.forward_frame(bind, f, state, training);
        state = step.state;
        out.push_back(step.logits);
    }
    return out;
}

ad::Var sequence_loss(Binder& bind, SegNet& net, std::span<const ad::Var> frames, const MaskSequence& labels,
                      bool training, bool mean) {
    if (frames.empty()) throw Error("sequence loss of an empty sequence");
    if (labels.length() != static_cast<int>(frames.size())) throw Error("label count does not match frame count");
    const auto logits = forward_logits(bind, net, frames, training);
    ad::Var total;
    for (std::size_t t = 0; t < logits.size(); ++t) {
        ad::Var l = ad::spatial_softmax_ce(logits[t], labels.masks[t]);
        total = total ? ad::add(total, l) : l;
    }
    return mean ? ad::affine(total, 1.0 / static_cast<double>(logits.size()), 0.0) : total;
}

ProbSequence forward_sequence(SegNet& net, const CineSequence& seq) {
    ProbSequence out;
    ad::Tensor state = net.zero_state();
    for (const Image& img : seq.frames) {
        ad::Graph g;
        Binder bind(g);
        ad::Var s = net.config().recurrent ? g.constant(state) : ad::Var{};
        auto step = net.forward_frame(bind, g.constant(frame_tensor(img)), s, false);
        if (step.state) state = step.state.value();
        out.probs.push_back(ad::foreground_probability(step.logits.value()));
    }
    return out;
}

MaskSequence infer(SegNet& net, const CineSequence& seq, double threshold_level) {
    return threshold(forward_sequence(net, seq), threshold_level);
}

std::vector<EpochLog> train(SegNet& net, const std::vector<LabeledSequence>& train_set,
                            const std::vector<LabeledSequence>& validation, std::ostream* log) {
    if (train_set.empty()) throw Error("training split is empty");
    const NetworkConfig& cfg = net.config();
    for (const auto& s : train_set) {
        if (s.sequence.length() > cfg.max_frames)
            throw Error("sequence '" + s.sequence.subject_id + "' has " + std::to_string(s.sequence.length()) +
                        " frames; the BPTT window is capped at " + std::to_string(cfg.max_frames));
        validate(s.masks, s.sequence);
    }
    auto trainable = net.params().trainable();
    ad::Adadelta opt(trainable, cfg.lr);
    std::mt19937_64 rng(cfg.seed ^ 0x5bd1e995ULL);
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<EpochLog> history;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double total = 0.0;
        for (std::size_t idx : order) {
            const LabeledSequence& s = train_set[idx];
            net.params().zero_grad();
            double loss_value = 0.0;
            try {
                ad::Graph g;
                Binder bind(g);
                std::vector<ad::Var> frames;
                for (const Image& img : s.sequence.frames) frames.push_back(g.constant(frame_tensor(img)));
                ad::Var loss = sequence_loss(bind, net, frames, s.masks, true);
                loss_value = loss.value()[0];
                if (!std::isfinite(loss_value)) throw Error("loss is not finite");
                g.backward(loss);
            } catch (const Error& e) {
                throw Error("training diverged at epoch " + std::to_string(epoch) + " on sequence '" +
                            s.sequence.subject_id + "': " + e.what());
            }
            if (cfg.clip_norm > 0.0) ad::clip_grad_norm(trainable, cfg.clip_norm);
            opt.step();
            total += loss_value;
        }
        EpochLog entry{epoch, total / static_cast<double>(train_set.size()), -1.0};
        if (!validation.empty()) {
            double d = 0.0;
            int n = 0;
            for (const auto& v : validation) {
                const MaskSequence pred = infer(net, v.sequence);
                for (int t = 0; t < pred.length(); ++t, ++n)
                    d += metrics::dice(pred.masks[static_cast<std::size_t>(t)], v.masks.masks[static_cast<std::size_t>(t)]);
            }
            entry.val_dice = d / n;
        }
        history.push_back(entry);
        if (log) {
            json line = {{"epoch", entry.epoch}, {"train_loss", entry.train_loss}};
            line["val_dice"] = entry.val_dice < 0 ? json(nullptr) : json(entry.val_dice);
            *log << line.dump() << '\n';
        }
    }
    return history;
}

void save(const SegNet& net, const std::filesystem::path& path) {
    json meta = {{"model", "segnet"}, {"config", json::parse(net.config().to_json())}};
    ad::save_checkpoint(path, net.params(), meta.dump());
}

SegNet load(const std::filesystem::path& path) {
    const json meta = json::parse(ad::read_checkpoint_meta(path));
    if (meta.value("model", std::string{}) != "segnet") throw Error(path.string() + " is not a segmentation checkpoint");
    SegNet net(NetworkConfig::from_json(meta.at("config").dump()));
    ad::load_checkpoint(path, net.params());
    return net;
}

}  // namespace lvseg::net
