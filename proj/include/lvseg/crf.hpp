#pragma once

#include <span>
#include <string>
#include <vector>

#include "lvseg/core.hpp"
#include "lvseg/lbfgs.hpp"

namespace lvseg::crf {

struct CrfParams {
    // Tuned on validation crops at 32x32; heavier kernels erode the pool edge.
    double w_app = 0.02;
    double w_smooth = 0.3;
    double sigma_p_app = 5.0;     // pixels
    double sigma_I = 0.1;         // intensity units
    double sigma_p_smooth = 1.0;  // pixels
    double prob_floor = 1e-6;
    // Continuous extension of the Potts term: "tv" uses k_ij c(q_i - q_j) with
    // a normalised Charbonnier c, "expected" uses q_i (1 - q_j) + (1 - q_i) q_j.
    // Both equal the discrete energy on hard labelings.
    std::string relaxation = "tv";
    double tv_eps = 1e-3;
    // Logits are kept in [-logit_bound, logit_bound] so saturated pixels keep
    // a usable gradient.
    double logit_bound = 8.0;
    opt::LbfgsOptions lbfgs{10, 100, 1e-5};

    void validate() const;
    // Pairs farther apart than this are treated as unconnected.
    double cutoff() const;
    std::string to_json() const;
    static CrfParams from_json(const std::string& text);
};

struct Feature {
    double row = 0.0;
    double col = 0.0;
    double intensity = 0.0;
};

// Per-pixel label costs: fg = -log max(P, floor), bg = -log max(1 - P, floor).
struct Unary {
    std::vector<double> fg;
    std::vector<double> bg;
    std::size_t size() const { return fg.size(); }
};

Unary unary(std::span<const double> prob, double floor);
Unary unary(const Image& prob, double floor);

double pairwise_kernel(const Feature& a, const Feature& b, const CrfParams& params);

// Symmetric kernel matrix over a point set with a zero diagonal, stored as the
// strict upper triangle in compressed rows.
class KernelMatrix {
public:
    KernelMatrix(std::span<const Feature> points, const CrfParams& params);
    std::size_t size() const { return row_start_.size() - 1; }
    std::size_t pair_count() const { return col_.size(); }
    // out = K q
    void multiply(std::span<const double> q, std::span<double> out) const;
    // Row sums of K.
    const std::vector<double>& degree() const { return degree_; }
    const std::vector<std::size_t>& row_start() const { return row_start_; }
    const std::vector<int>& columns() const { return col_; }
    const std::vector<double>& weights() const { return weight_; }

private:
    std::vector<std::size_t> row_start_;
    std::vector<int> col_;
    std::vector<double> weight_;
    std::vector<double> degree_;
};

// Relaxed energy of a soft labeling q (foreground probabilities):
// sum_i q_i fg_i + (1 - q_i) bg_i + sum_{i<j} k_ij d(q_i, q_j), with d chosen by
// params.relaxation. Hard labelings give the discrete energy. When `grad_q` is
// non-empty it receives dE/dq.
double energy(std::span<const double> q, const Unary& u, const KernelMatrix& k, const CrfParams& params,
              std::span<double> grad_q = {});

// The same energy as a function of logits, q = sigmoid(z); `grad_z` receives dE/dz.
double logit_energy(std::span<const double> z, const Unary& u, const KernelMatrix& k, const CrfParams& params,
                    std::span<double> grad_z = {});

struct PointResult {
    std::vector<double> q;
    std::vector<std::uint8_t> labels;  // q >= 0.5
    std::vector<double> trace;         // energy at every accepted iterate
    bool line_search_failed = false;
    int iterations = 0;
};

// Bounded L-BFGS over logits z with q = sigmoid(z), starting from the clamped
// unary log-odds.
PointResult refine_points(const Unary& u, std::span<const Feature> points, const CrfParams& params);

struct CrfResult {
    MaskSequence masks;
    ProbSequence q;
    std::vector<std::vector<double>> traces;  // per frame
    bool warning = false;                      // some line search gave up
};

// Frames are independent: each gets its own fully connected CRF over
// position and intensity features.
CrfResult refine(const ProbSequence& probs, const CineSequence& seq, const CrfParams& params);

std::vector<Feature> frame_features(const Image& img);

}  // namespace lvseg::crf
