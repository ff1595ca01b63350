#include "lvseg/crf.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

namespace lvseg::crf {
using nlohmann::json;

void CrfParams::validate() const {
    if (!(w_app >= 0.0) || !(w_smooth >= 0.0)) throw Error("CRF kernel weights must be >= 0");
    if (!(sigma_p_app > 0.0) || !(sigma_I > 0.0) || !(sigma_p_smooth > 0.0))
        throw Error("CRF bandwidths must be positive");
    if (!(prob_floor > 0.0 && prob_floor < 0.5)) throw Error("CRF probability floor must lie in (0, 0.5)");
    if (relaxation != "tv" && relaxation != "expected") throw Error("CRF relaxation must be 'tv' or 'expected'");
    if (!(tv_eps > 0.0)) throw Error("CRF tv_eps must be positive");
    if (!(logit_bound > 0.0)) throw Error("CRF logit_bound must be positive");
    if (lbfgs.history < 1 || lbfgs.max_iters < 0 || !(lbfgs.grad_tol >= 0.0)) throw Error("invalid CRF L-BFGS options");
}

double CrfParams::cutoff() const { return 4.0 * std::max(sigma_p_app, sigma_p_smooth); }

std::string CrfParams::to_json() const {
    json j = {{"w_app", w_app},
              {"w_smooth", w_smooth},
              {"sigma_p_app", sigma_p_app},
              {"sigma_I", sigma_I},
              {"sigma_p_smooth", sigma_p_smooth},
              {"prob_floor", prob_floor},
              {"relaxation", relaxation},
              {"tv_eps", tv_eps},
              {"logit_bound", logit_bound},
              {"lbfgs", {{"history", lbfgs.history}, {"max_iters", lbfgs.max_iters}, {"grad_tol", lbfgs.grad_tol}}}};
    return j.dump();
}

CrfParams CrfParams::from_json(const std::string& text) {
    CrfParams c;
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw Error(std::string("malformed CRF parameters: ") + e.what());
    }
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        try {
            if (k == "w_app") c.w_app = it->get<double>();
            else if (k == "w_smooth") c.w_smooth = it->get<double>();
            else if (k == "sigma_p_app") c.sigma_p_app = it->get<double>();
            else if (k == "sigma_I") c.sigma_I = it->get<double>();
            else if (k == "sigma_p_smooth") c.sigma_p_smooth = it->get<double>();
            else if (k == "prob_floor") c.prob_floor = it->get<double>();
            else if (k == "relaxation") c.relaxation = it->get<std::string>();
            else if (k == "tv_eps") c.tv_eps = it->get<double>();
            else if (k == "logit_bound") c.logit_bound = it->get<double>();
            else if (k == "lbfgs") {
                for (auto jt = it->begin(); jt != it->end(); ++jt) {
                    if (jt.key() == "history") c.lbfgs.history = jt->get<int>();
                    else if (jt.key() == "max_iters") c.lbfgs.max_iters = jt->get<int>();
                    else if (jt.key() == "grad_tol") c.lbfgs.grad_tol = jt->get<double>();
                    else throw Error("unknown CRF L-BFGS key '" + jt.key() + "'");
                }
            } else {
                throw Error("unknown CRF parameter '" + k + "'");
            }
        } catch (const json::exception& e) {
            throw Error("bad value for CRF parameter '" + k + "': " + e.what());
        }
    }
    c.validate();
    return c;
}

Unary unary(std::span<const double> prob, double floor) {
    Unary u;
    u.fg.resize(prob.size());
    u.bg.resize(prob.size());
    for (std::size_t i = 0; i < prob.size(); ++i) {
        u.fg[i] = -std::log(std::max(prob[i], floor));
        u.bg[i] = -std::log(std::max(1.0 - prob[i], floor));
    }
    return u;
}

Unary unary(const Image& prob, double floor) { return unary(std::span<const double>(prob.values()), floor); }

double pairwise_kernel(const Feature& a, const Feature& b, const CrfParams& p) {
    const double dr = a.row - b.row, dc = a.col - b.col, di = a.intensity - b.intensity;
    const double d2 = dr * dr + dc * dc;
    return p.w_app * std::exp(-d2 / (2 * p.sigma_p_app * p.sigma_p_app) - di * di / (2 * p.sigma_I * p.sigma_I)) +
           p.w_smooth * std::exp(-d2 / (2 * p.sigma_p_smooth * p.sigma_p_smooth));
}

KernelMatrix::KernelMatrix(std::span<const Feature> pts, const CrfParams& params) {
    const std::size_t n = pts.size();
    row_start_.assign(1, 0);
    degree_.assign(n, 0.0);
    const bool any = params.w_app > 0.0 || params.w_smooth > 0.0;
    const double c2 = params.cutoff() * params.cutoff();
    for (std::size_t i = 0; i < n; ++i) {
        if (any) {
            for (std::size_t j = i + 1; j < n; ++j) {
                const double dr = pts[i].row - pts[j].row, dc = pts[i].col - pts[j].col;
                if (dr * dr + dc * dc > c2) continue;
                const double k = pairwise_kernel(pts[i], pts[j], params);
                if (k == 0.0) continue;
                col_.push_back(static_cast<int>(j));
                weight_.push_back(k);
                degree_[i] += k;
                degree_[j] += k;
            }
        }
        row_start_.push_back(col_.size());
    }
}

void KernelMatrix::multiply(std::span<const double> q, std::span<double> out) const {
    std::fill(out.begin(), out.end(), 0.0);
    const std::size_t n = size();
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        const double qi = q[i];
        for (std::size_t e = row_start_[i]; e < row_start_[i + 1]; ++e) {
            const std::size_t j = static_cast<std::size_t>(col_[e]);
            acc += weight_[e] * q[j];
            out[j] += weight_[e] * qi;
        }
        out[i] += acc;
    }
}

double energy(std::span<const double> q, const Unary& u, const KernelMatrix& k, const CrfParams& params,
              std::span<double> grad_q) {
    const std::size_t n = q.size();
    if (u.size() != n || k.size() != n) throw Error("CRF energy: size mismatch");
    const bool want_grad = !grad_q.empty();
    double e = 0.0;
    for (std::size_t i = 0; i < n; ++i) e += q[i] * u.fg[i] + (1.0 - q[i]) * u.bg[i];
    if (want_grad)
        for (std::size_t i = 0; i < n; ++i) grad_q[i] = u.fg[i] - u.bg[i];

    if (params.relaxation == "expected") {
        // sum_{i<j} k_ij (q_i + q_j - 2 q_i q_j) = sum_i q_i (deg_i - s_i), s = K q
        std::vector<double> s(n);
        k.multiply(q, s);
        const auto& deg = k.degree();
        for (std::size_t i = 0; i < n; ++i) e += q[i] * (deg[i] - s[i]);
        if (want_grad)
            for (std::size_t i = 0; i < n; ++i) grad_q[i] += deg[i] - 2.0 * s[i];
        return e;
    }

    // c(d) = (sqrt(d^2 + eps^2) - eps) / (sqrt(1 + eps^2) - eps): c(0) = 0, c(+-1) = 1.
    const double eps = params.tv_eps;
    const double eps2 = eps * eps;
    const double norm = 1.0 / (std::sqrt(1.0 + eps2) - eps);
    const auto& rs = k.row_start();
    const auto& col = k.columns();
    const auto& w = k.weights();
    double pair = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double qi = q[i];
        double gi = 0.0;
        for (std::size_t ei = rs[i]; ei < rs[i + 1]; ++ei) {
            const std::size_t j = static_cast<std::size_t>(col[ei]);
            const double d = qi - q[j];
            const double r = std::sqrt(d * d + eps2);
            pair += w[ei] * (r - eps);
            if (want_grad) {
                const double g = w[ei] * d / r;
                gi += g;
                grad_q[j] -= g * norm;
            }
        }
        if (want_grad) grad_q[i] += gi * norm;
    }
    return e + pair * norm;
}

namespace {

double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

}  // namespace

double logit_energy(std::span<const double> z, const Unary& u, const KernelMatrix& k, const CrfParams& params,
                    std::span<double> grad_z) {
    const std::size_t n = z.size();
    std::vector<double> q(n), gq(grad_z.empty() ? 0 : n);
    for (std::size_t i = 0; i < n; ++i) q[i] = sigmoid(z[i]);
    const double e = energy(q, u, k, params, gq);
    for (std::size_t i = 0; i < grad_z.size(); ++i) grad_z[i] = gq[i] * q[i] * (1.0 - q[i]);
    return e;
}

PointResult refine_points(const Unary& u, std::span<const Feature> points, const CrfParams& params) {
    params.validate();
    if (u.size() != points.size()) throw Error("CRF: unary and feature counts differ");
    const std::size_t n = u.size();
    const KernelMatrix k(points, params);

    std::vector<double> z0(n);
    for (std::size_t i = 0; i < n; ++i) z0[i] = u.bg[i] - u.fg[i];

    auto objective = [&](const std::vector<double>& z, std::vector<double>& grad) {
        return logit_energy(z, u, k, params, grad);
    };
    opt::LbfgsOptions o = params.lbfgs;
    o.lower = -params.logit_bound;
    o.upper = params.logit_bound;
    const opt::LbfgsResult r = opt::lbfgs_minimize(objective, std::move(z0), o);

    PointResult out;
    out.q.resize(n);
    out.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.q[i] = sigmoid(r.x[i]);
        out.labels[i] = out.q[i] >= 0.5 ? 1 : 0;
    }
    out.trace = r.trace;
    out.line_search_failed = r.line_search_failed;
    out.iterations = r.iterations;
    return out;
}

std::vector<Feature> frame_features(const Image& img) {
    std::vector<Feature> f;
    f.reserve(img.size());
    for (int r = 0; r < img.rows(); ++r)
        for (int c = 0; c < img.cols(); ++c) f.push_back({static_cast<double>(r), static_cast<double>(c), img(r, c)});
    return f;
}

CrfResult refine(const ProbSequence& probs, const CineSequence& seq, const CrfParams& params) {
    validate(probs, seq);
    CrfResult out;
    for (std::size_t t = 0; t < seq.frames.size(); ++t) {
        const Image& img = seq.frames[t];
        const auto feats = frame_features(img);
        const PointResult r = refine_points(unary(probs.probs[t], params.prob_floor), feats, params);
        Mask m(img.rows(), img.cols());
        Image q(img.rows(), img.cols());
        std::copy(r.labels.begin(), r.labels.end(), m.values().begin());
        std::copy(r.q.begin(), r.q.end(), q.values().begin());
        out.masks.masks.push_back(std::move(m));
        out.q.probs.push_back(std::move(q));
        out.traces.push_back(r.trace);
        out.warning = out.warning || r.line_search_failed;
    }
    return out;
}

}  // namespace lvseg::crf
