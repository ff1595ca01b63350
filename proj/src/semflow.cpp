#include "lvseg/semflow.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"

namespace lvseg::sf {

using nlohmann::json;

namespace {

json parse_object(const std::string& text, const char* what) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw Error(std::string("malformed ") + what + ": " + e.what());
    }
    if (!j.is_object()) throw Error(std::string(what) + " must be a JSON object");
    return j;
}

bool read_lambda(Lambdas& l, const std::string& key, const json& value) {
    if (key == "lambda_m") l.motion = value.get<double>();
    else if (key == "lambda_t") l.time = value.get<double>();
    else if (key == "lambda_s") l.space = value.get<double>();
    else if (key == "lambda_c") l.coupling = value.get<double>();
    else return false;
    return true;
}

json lambdas_json(const Lambdas& l) {
    return {{"lambda_m", l.motion}, {"lambda_t", l.time}, {"lambda_s", l.space}, {"lambda_c", l.coupling}};
}

int clamp_index(double p, int n) {
    long i = std::lround(p);
    return static_cast<int>(std::clamp<long>(i, 0, n - 1));
}

// Label-change cost summed over both region indicators.
constexpr double kTimeMismatch = 2.0;

double flow_at(const Affine& a, int r, int c, bool vertical) {
    return vertical ? a[3] + a[4] * c + a[5] * r : a[0] + a[1] * c + a[2] * r;
}

void check_state(const CineSequence& x, const FlowField& w, const Labeling& g, const MotionParams& theta) {
    validate(x);
    const int T = x.length();
    if (static_cast<int>(g.size()) != T) throw Error("labeling length does not match the sequence");
    if (w.pairs() != T - 1 || static_cast<int>(w.v.size()) != T - 1)
        throw Error("flow field must hold one plane pair per frame pair");
    if (static_cast<int>(theta.size()) != T - 1) throw Error("motion parameters must cover every frame pair");
    for (int t = 0; t < T; ++t) {
        if (!g[t].same_shape(x.frames[t])) throw Error("labeling shape does not match frame " + std::to_string(t));
        for (auto k : g[t].values())
            if (k != kLv && k != kBackground) throw Error("labeling holds a region index other than 1 or 2");
    }
    for (int t = 0; t + 1 < T; ++t)
        if (!w.u[t].same_shape(x.frames[t]) || !w.v[t].same_shape(x.frames[t]))
            throw Error("flow shape does not match frame " + std::to_string(t));
}

void check_masks(const MaskSequence& y, const CineSequence& x) {
    if (y.length() != x.length()) throw Error("mask sequence length does not match the sequence");
    for (int t = 0; t < y.length(); ++t)
        if (!y.masks[t].same_shape(x.frames[t])) throw Error("mask shape does not match frame " + std::to_string(t));
}

struct PixelFlowCost {
    const Image& x0;
    const Image& x1;
    const Mask& g0;
    const Mask& g1;
    double eps;
    double lm;
    double lt;

    double operator()(int r, int c, double u, double v, double ut, double vt) const {
        double res = sample(x1, r + v, c + u) - x0(r, c);
        double e = std::sqrt(res * res + eps * eps);
        e += lm * ((u - ut) * (u - ut) + (v - vt) * (v - vt));
        if (lt != 0.0 && g1(clamp_index(r + v, g1.rows()), clamp_index(c + u, g1.cols())) != g0(r, c))
            e += lt * kTimeMismatch;
        return e;
    }
};

// Nearest-neighbour target index of every pixel under the flow of one pair.
std::vector<int> flow_targets(const Image& u, const Image& v) {
    std::vector<int> out(u.size());
    for (int r = 0; r < u.rows(); ++r)
        for (int c = 0; c < u.cols(); ++c)
            out[static_cast<std::size_t>(r) * u.cols() + c] =
                clamp_index(r + v(r, c), u.rows()) * u.cols() + clamp_index(c + u(r, c), u.cols());
    return out;
}

}  // namespace

void Lambdas::validate() const {
    for (double l : {motion, time, space, coupling})
        if (!std::isfinite(l) || l < 0.0) throw Error("lambdas must be finite and non-negative");
}

std::string Lambdas::to_json() const { return lambdas_json(*this).dump(2); }

Lambdas Lambdas::from_json(const std::string& text) {
    json j = parse_object(text, "lambdas");
    Lambdas l;
    for (auto it = j.begin(); it != j.end(); ++it) {
        try {
            if (!read_lambda(l, it.key(), *it)) throw Error("unknown lambda '" + it.key() + "'");
        } catch (const json::exception& e) {
            throw Error("bad value for '" + it.key() + "': " + e.what());
        }
    }
    l.validate();
    return l;
}

void SfParams::validate() const {
    lambdas.validate();
    if (!(eps > 0.0) || !std::isfinite(eps)) throw Error("eps must be positive");
    if (flow_cap && !(*flow_cap > 0.0)) throw Error("flow_cap must be positive");
    if (warps < 1 || steps < 1) throw Error("warps and steps must be at least 1");
    if (!(theta_damping >= 0.0)) throw Error("theta_damping must be non-negative");
    if (icm_sweeps < 1) throw Error("icm_sweeps must be at least 1");
    if (outer_iters < 0) throw Error("outer_iters must be non-negative");
}

std::string SfParams::to_json() const {
    json j = lambdas_json(lambdas);
    j["eps"] = eps;
    if (flow_cap) j["flow_cap"] = *flow_cap;
    j["warps"] = warps;
    j["steps"] = steps;
    j["theta_damping"] = theta_damping;
    j["icm_sweeps"] = icm_sweeps;
    j["outer_iters"] = outer_iters;
    return j.dump(2);
}

SfParams SfParams::from_json(const std::string& text) {
    json j = parse_object(text, "semantic flow parameters");
    SfParams p;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        try {
            if (read_lambda(p.lambdas, k, *it)) continue;
            if (k == "eps") p.eps = it->get<double>();
            else if (k == "flow_cap") p.flow_cap = it->get<double>();
            else if (k == "warps") p.warps = it->get<int>();
            else if (k == "steps") p.steps = it->get<int>();
            else if (k == "theta_damping") p.theta_damping = it->get<double>();
            else if (k == "icm_sweeps") p.icm_sweeps = it->get<int>();
            else if (k == "outer_iters") p.outer_iters = it->get<int>();
            else throw Error("unknown semantic flow parameter '" + k + "'");
        } catch (const json::exception& e) {
            throw Error("bad value for '" + k + "': " + e.what());
        }
    }
    p.validate();
    return p;
}

FlowField FlowField::zeros(int pairs, int rows, int cols) {
    FlowField w;
    w.u.assign(std::max(pairs, 0), Image(rows, cols, 0.0));
    w.v.assign(std::max(pairs, 0), Image(rows, cols, 0.0));
    return w;
}

MotionParams zero_motion(int pairs) { return MotionParams(std::max(pairs, 0), {Affine{}, Affine{}}); }

Labeling to_labeling(const MaskSequence& masks) {
    Labeling g;
    g.reserve(masks.masks.size());
    for (const auto& m : masks.masks) {
        Mask out(m.rows(), m.cols());
        for (std::size_t i = 0; i < m.size(); ++i) out[i] = m[i] ? kLv : kBackground;
        g.push_back(std::move(out));
    }
    return g;
}

MaskSequence to_masks(const Labeling& g) {
    MaskSequence out;
    for (const auto& k : g) {
        Mask m(k.rows(), k.cols());
        for (std::size_t i = 0; i < k.size(); ++i) m[i] = k[i] == kLv ? 1 : 0;
        out.masks.push_back(std::move(m));
    }
    return out;
}

double sample(const Image& image, double row, double col) {
    const int R = image.rows(), C = image.cols();
    row = std::clamp(row, 0.0, static_cast<double>(R - 1));
    col = std::clamp(col, 0.0, static_cast<double>(C - 1));
    int r0 = static_cast<int>(std::floor(row));
    int c0 = static_cast<int>(std::floor(col));
    int r1 = std::min(r0 + 1, R - 1);
    int c1 = std::min(c0 + 1, C - 1);
    double fr = row - r0, fc = col - c0;
    double top = image(r0, c0) + fc * (image(r0, c1) - image(r0, c0));
    double bottom = image(r1, c0) + fc * (image(r1, c1) - image(r1, c0));
    return top + fr * (bottom - top);
}

Image warp(const Image& image, const Image& u, const Image& v) {
    if (!u.same_shape(image) || !v.same_shape(image)) throw Error("flow shape does not match the image");
    Image out(image.rows(), image.cols());
    for (int r = 0; r < image.rows(); ++r)
        for (int c = 0; c < image.cols(); ++c) {
            if (!std::isfinite(u(r, c)) || !std::isfinite(v(r, c))) throw Error("flow is not finite");
            out(r, c) = sample(image, r + v(r, c), c + u(r, c));
        }
    return out;
}

EnergyTerms energy_terms(const CineSequence& x, const FlowField& w, const Labeling& g, const MotionParams& theta,
                         const MaskSequence& y, const SfParams& params) {
    check_state(x, w, g, theta);
    check_masks(y, x);
    const int T = x.length(), R = x.rows(), C = x.cols();
    const double eps2 = params.eps * params.eps;
    EnergyTerms e;
    for (int t = 0; t + 1 < T; ++t) {
        const Image& u = w.u[t];
        const Image& v = w.v[t];
        for (int r = 0; r < R; ++r)
            for (int c = 0; c < C; ++c) {
                double res = sample(x.frames[t + 1], r + v(r, c), c + u(r, c)) - x.frames[t](r, c);
                e.data += std::sqrt(res * res + eps2);
                const Affine& a = theta[t][g[t](r, c) - 1];
                double du = u(r, c) - flow_at(a, r, c, false);
                double dv = v(r, c) - flow_at(a, r, c, true);
                e.motion += du * du + dv * dv;
                if (g[t + 1](clamp_index(r + v(r, c), R), clamp_index(c + u(r, c), C)) != g[t](r, c))
                    e.time += kTimeMismatch;
            }
    }
    for (int t = 0; t < T; ++t) {
        const Mask& k = g[t];
        for (int r = 0; r < R; ++r)
            for (int c = 0; c < C; ++c) {
                if (c + 1 < C && k(r, c) != k(r, c + 1)) e.space += 1.0;
                if (r + 1 < R && k(r, c) != k(r + 1, c)) e.space += 1.0;
                if ((k(r, c) == kLv) != (y.masks[t](r, c) != 0)) e.coupling += 1.0;
            }
    }
    const Lambdas& l = params.lambdas;
    e.total = e.data + l.motion * e.motion + l.time * e.time + l.space * e.space + l.coupling * e.coupling;
    return e;
}

FlowField update_flow(const CineSequence& x, const FlowField& w, const Labeling& g, const MotionParams& theta,
                      const SfParams& params) {
    check_state(x, w, g, theta);
    const int T = x.length(), R = x.rows(), C = x.cols();
    const double cap = params.cap_for(R);
    const double lm = params.lambdas.motion;
    const double eps = params.eps;
    FlowField out = w;
    for (int t = 0; t + 1 < T; ++t) {
        const Image& x0 = x.frames[t];
        const Image& x1 = x.frames[t + 1];
        PixelFlowCost cost{x0, x1, g[t], g[t + 1], eps, lm, params.lambdas.time};
        for (int r = 0; r < R; ++r)
            for (int c = 0; c < C; ++c) {
                const Affine& a = theta[t][g[t](r, c) - 1];
                const double ut = flow_at(a, r, c, false), vt = flow_at(a, r, c, true);
                double u = std::clamp(out.u[t](r, c), -cap, cap);
                double v = std::clamp(out.v[t](r, c), -cap, cap);
                double e = cost(r, c, u, v, ut, vt);
                for (int k = 0; k < params.warps; ++k) {
                    // Linearise the residual around the current flow, then descend
                    // with a step scaled by the reweighted curvature.
                    const double i0 = sample(x1, r + v, c + u);
                    const double gx = 0.5 * (sample(x1, r + v, c + u + 1) - sample(x1, r + v, c + u - 1));
                    const double gy = 0.5 * (sample(x1, r + v + 1, c + u) - sample(x1, r + v - 1, c + u));
                    const double g2 = gx * gx + gy * gy;
                    double nu = u, nv = v;
                    for (int s = 0; s < params.steps; ++s) {
                        double res = i0 + gx * (nu - u) + gy * (nv - v) - x0(r, c);
                        double rho = std::sqrt(res * res + eps * eps);
                        double step = 0.5 / (g2 / rho + lm + eps);
                        double du = res / rho * gx + 2.0 * lm * (nu - ut);
                        double dv = res / rho * gy + 2.0 * lm * (nv - vt);
                        nu = std::clamp(nu - step * du, -cap, cap);
                        nv = std::clamp(nv - step * dv, -cap, cap);
                    }
                    double ne = cost(r, c, nu, nv, ut, vt);
                    if (!(ne <= e)) break;
                    u = nu;
                    v = nv;
                    e = ne;
                }
                out.u[t](r, c) = u;
                out.v[t](r, c) = v;
            }
    }
    return out;
}

MotionParams update_theta(const FlowField& w, const Labeling& g, const MotionParams& theta, const SfParams& params) {
    if (w.pairs() != static_cast<int>(theta.size()) || g.size() < theta.size() + (theta.empty() ? 0 : 1))
        throw Error("flow, labeling and motion parameters disagree in length");
    MotionParams out = theta;
    for (std::size_t t = 0; t < theta.size(); ++t) {
        const Image& u = w.u[t];
        const Image& v = w.v[t];
        if (!g[t].same_shape(u)) throw Error("labeling shape does not match the flow");
        for (int k = 0; k < 2; ++k) {
            const std::uint8_t region = static_cast<std::uint8_t>(k + 1);
            Eigen::Matrix3d ata = Eigen::Matrix3d::Zero();
            Eigen::Vector3d bu = Eigen::Vector3d::Zero(), bv = Eigen::Vector3d::Zero();
            long n = 0;
            for (int r = 0; r < u.rows(); ++r)
                for (int c = 0; c < u.cols(); ++c) {
                    if (g[t](r, c) != region) continue;
                    Eigen::Vector3d phi(1.0, c, r);
                    ata += phi * phi.transpose();
                    bu += phi * u(r, c);
                    bv += phi * v(r, c);
                    ++n;
                }
            if (n == 0) continue;
            ata += params.theta_damping * Eigen::Matrix3d::Identity();
            auto solver = ata.ldlt();
            Eigen::Vector3d au = solver.solve(bu), av = solver.solve(bv);
            Affine fit{au[0], au[1], au[2], av[0], av[1], av[2]};
            bool finite = std::all_of(fit.begin(), fit.end(), [](double d) { return std::isfinite(d); });
            if (!finite) continue;
            auto region_cost = [&](const Affine& a) {
                double s = 0.0;
                for (int r = 0; r < u.rows(); ++r)
                    for (int c = 0; c < u.cols(); ++c) {
                        if (g[t](r, c) != region) continue;
                        double du = u(r, c) - flow_at(a, r, c, false), dv = v(r, c) - flow_at(a, r, c, true);
                        s += du * du + dv * dv;
                    }
                return s;
            };
            if (region_cost(fit) <= region_cost(theta[t][k])) out[t][k] = fit;
        }
    }
    return out;
}

Labeling update_regions(const CineSequence& x, const FlowField& w, const Labeling& g, const MotionParams& theta,
                        const MaskSequence& y, const SfParams& params) {
    check_state(x, w, g, theta);
    check_masks(y, x);
    const int T = x.length(), R = x.rows(), C = x.cols();
    const Lambdas& l = params.lambdas;
    const std::size_t N = static_cast<std::size_t>(R) * C;

    // Forward targets per pair and, per target pixel, the sources landing on it.
    std::vector<std::vector<int>> target(T > 0 ? T - 1 : 0);
    std::vector<std::vector<std::size_t>> src_start(target.size());
    std::vector<std::vector<int>> src(target.size());
    for (int t = 0; t + 1 < T; ++t) {
        target[t] = flow_targets(w.u[t], w.v[t]);
        auto& start = src_start[t];
        start.assign(N + 1, 0);
        for (int j : target[t]) ++start[j + 1];
        for (std::size_t i = 0; i < N; ++i) start[i + 1] += start[i];
        src[t].resize(N);
        std::vector<std::size_t> fill(start.begin(), start.end() - 1);
        for (std::size_t i = 0; i < N; ++i) src[t][fill[target[t][i]]++] = static_cast<int>(i);
    }

    Labeling out = g;
    auto local = [&](int t, int r, int c, std::uint8_t k) {
        const std::size_t i = static_cast<std::size_t>(r) * C + c;
        const Mask& cur = out[t];
        double e = 0.0;
        if ((k == kLv) != (y.masks[t][i] != 0)) e += l.coupling;
        int disagree = 0;
        if (c > 0 && cur(r, c - 1) != k) ++disagree;
        if (c + 1 < C && cur(r, c + 1) != k) ++disagree;
        if (r > 0 && cur(r - 1, c) != k) ++disagree;
        if (r + 1 < R && cur(r + 1, c) != k) ++disagree;
        e += l.space * disagree;
        if (t + 1 < T) {
            const Affine& a = theta[t][k - 1];
            double du = w.u[t](r, c) - flow_at(a, r, c, false), dv = w.v[t](r, c) - flow_at(a, r, c, true);
            e += l.motion * (du * du + dv * dv);
            if (out[t + 1][target[t][i]] != k) e += l.time * kTimeMismatch;
        }
        if (t > 0) {
            const auto& start = src_start[t - 1];
            for (std::size_t s = start[i]; s < start[i + 1]; ++s)
                if (out[t - 1][src[t - 1][s]] != k) e += l.time * kTimeMismatch;
        }
        return e;
    };

    for (int sweep = 0; sweep < params.icm_sweeps; ++sweep) {
        bool changed = false;
        for (int t = 0; t < T; ++t)
            for (int r = 0; r < R; ++r)
                for (int c = 0; c < C; ++c) {
                    std::uint8_t k = out[t](r, c);
                    std::uint8_t other = k == kLv ? kBackground : kLv;
                    if (local(t, r, c, other) < local(t, r, c, k)) {
                        out[t](r, c) = other;
                        changed = true;
                    }
                }
        if (!changed) break;
    }
    return out;
}

SfResult refine_sf(const CineSequence& x, const MaskSequence& y, const SfParams& params) {
    params.validate();
    validate(x);
    check_masks(y, x);
    const int T = x.length();
    SfResult res;
    Labeling g = to_labeling(y);
    res.flow = FlowField::zeros(T - 1, x.rows(), x.cols());
    res.theta = zero_motion(T - 1);

    auto record = [&](int iter) {
        EnergyTerms e = energy_terms(x, res.flow, g, res.theta, y, params);
        if (!std::isfinite(e.total)) {
            std::ostringstream msg;
            msg << "semantic flow energy is not finite after iteration " << iter << " (data " << e.data
                << ", motion " << e.motion << ", time " << e.time << ", space " << e.space << ", coupling "
                << e.coupling << ")";
            throw Error(msg.str());
        }
        res.trace.push_back(e.total);
    };

    record(0);
    for (int it = 1; it <= params.outer_iters; ++it) {
        res.flow = update_flow(x, res.flow, g, res.theta, params);
        res.theta = update_theta(res.flow, g, res.theta, params);
        g = update_regions(x, res.flow, g, res.theta, y, params);
        record(it);
    }
    res.masks = to_masks(g);
    return res;
}

}  // namespace lvseg::sf
