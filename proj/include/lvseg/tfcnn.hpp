#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "lvseg/autodiff.hpp"
#include "lvseg/core.hpp"

namespace lvseg::net {

struct NetworkConfig {
    int depth = 4;
    int base_channels = 8;
    bool recurrent = true;      // T-FCNN; false gives the frame-wise FCNN
    int gru_kernel = 3;
    int input_rows = 64;
    int input_cols = 64;
    double clip_norm = 5.0;     // <= 0 disables clipping
    double lr = 1.0;            // multiplier on the Adadelta step
    int epochs = 30;
    std::uint64_t seed = 1;
    int max_frames = 30;
    double bn_eps = 1e-5;

    // Throws when the input is not divisible by 2^depth or a field is out of range.
    void validate() const;
    std::string to_json() const;
    static NetworkConfig from_json(const std::string& text);
};

// Handles of a Conv-GRU cell's parameters.
struct GruParams {
    ad::Parameter* wz = nullptr;
    ad::Parameter* uz = nullptr;
    ad::Parameter* bz = nullptr;
    ad::Parameter* wr = nullptr;
    ad::Parameter* ur = nullptr;
    ad::Parameter* br = nullptr;
    ad::Parameter* wh = nullptr;
    ad::Parameter* uh = nullptr;
    ad::Parameter* bh = nullptr;
};

// Binds parameters to one graph, one node per parameter.
class Binder {
public:
    explicit Binder(ad::Graph& g) : graph_(g) {}
    ad::Var operator()(ad::Parameter& p);
    ad::Graph& graph() { return graph_; }

private:
    ad::Graph& graph_;
    std::map<const ad::Parameter*, ad::Var> bound_;
};

// z = sigmoid(Wz*x + bz + Uz*h), r = sigmoid(Wr*x + br + Ur*h),
// c = tanh(Wh*x + bh + Uh*(r.h)), h' = (1 - z).h + z.c; same-padded convolutions.
ad::Var conv_gru_step(Binder& bind, ad::Var x, ad::Var h, const GruParams& p);

// U-Net style encoder/decoder. With `recurrent`, a Conv-GRU at the bottleneck
// carries state from frame to frame.
class SegNet {
public:
    explicit SegNet(const NetworkConfig& cfg);
    SegNet(const SegNet&) = delete;
    SegNet& operator=(const SegNet&) = delete;
    SegNet(SegNet&&) = default;
    SegNet& operator=(SegNet&&) = default;

    const NetworkConfig& config() const { return cfg_; }
    ad::ParameterStore& params() { return store_; }
    const ad::ParameterStore& params() const { return store_; }

    int bottleneck_channels() const;
    int bottleneck_rows() const { return cfg_.input_rows >> cfg_.depth; }
    int bottleneck_cols() const { return cfg_.input_cols >> cfg_.depth; }
    ad::Tensor zero_state() const;
    const GruParams& gru() const { return gru_; }

    struct FrameOutput {
        ad::Var logits;  // [2,H,W]
        ad::Var state;   // GRU hidden map; absent for the FCNN
    };
    // Records one frame [1,H,W]; `state` absent means a zero hidden map.
    FrameOutput forward_frame(Binder& bind, ad::Var frame, ad::Var state, bool training);

private:
    struct ConvBn {
        ad::Parameter* w;
        ad::Parameter* b;
        ad::Parameter* gamma;
        ad::Parameter* beta;
        ad::Parameter* running_mean;
        ad::Parameter* running_var;
    };
    struct Block {
        ConvBn first;
        ConvBn second;
        ad::Parameter* up = nullptr;  // decoder only
    };

    ConvBn add_conv_bn(const std::string& prefix, int cin, int cout);
    ad::Var apply(Binder& bind, const ConvBn& layer, ad::Var x, bool training);

    NetworkConfig cfg_;
    ad::ParameterStore store_;
    std::vector<Block> encoder_;
    std::vector<Block> decoder_;  // decoder_[k] restores the resolution of encoder_[k]
    ad::Parameter* bottleneck_w_ = nullptr;
    ad::Parameter* bottleneck_b_ = nullptr;
    GruParams gru_;
    ad::Parameter* head_w_ = nullptr;
    ad::Parameter* head_b_ = nullptr;
};

ad::Tensor frame_tensor(const Image& img);

// Records every frame in order, threading the GRU state. Returns per-frame logits.
std::vector<ad::Var> forward_logits(Binder& bind, SegNet& net, std::span<const ad::Var> frames, bool training);

// Mean (or sum) over frames of the per-frame spatial cross-entropy.
ad::Var sequence_loss(Binder& bind, SegNet& net, std::span<const ad::Var> frames, const MaskSequence& labels,
                      bool training, bool mean = true);

// Inference-mode pass with the state zeroed at the first frame.
ProbSequence forward_sequence(SegNet& net, const CineSequence& seq);
MaskSequence infer(SegNet& net, const CineSequence& seq, double threshold = 0.5);

struct LabeledSequence {
    CineSequence sequence;
    MaskSequence masks;
};

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double val_dice = -1.0;  // -1 without validation data
};

// Adadelta (rho 0.95, eps 1e-6) on the per-sequence BPTT loss; optional
// global-norm clipping before each update. Writes one JSON line per epoch
// to `log` when given.
std::vector<EpochLog> train(SegNet& net, const std::vector<LabeledSequence>& train_set,
                            const std::vector<LabeledSequence>& validation, std::ostream* log = nullptr);

void save(const SegNet& net, const std::filesystem::path& path);
SegNet load(const std::filesystem::path& path);

}  // namespace lvseg::net
