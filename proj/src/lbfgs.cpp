#include "lvseg/lbfgs.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>

#include "lvseg/core.hpp"

namespace lvseg::opt {
namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

double max_abs(const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

void check_finite(double f, const std::vector<double>& g) {
    if (!std::isfinite(f)) throw Error("L-BFGS: objective is not finite");
    for (double v : g)
        if (!std::isfinite(v)) throw Error("L-BFGS: gradient is not finite");
}

struct Pair {
    std::vector<double> s, y;
    double rho;
};

}  // namespace

LbfgsResult lbfgs_minimize(const Objective& f, std::vector<double> x0, const LbfgsOptions& opts) {
    if (opts.history < 1 || opts.max_iters < 0 || !(opts.grad_tol >= 0.0) || opts.max_halvings < 1 ||
        !(opts.lower < opts.upper))
        throw Error("invalid L-BFGS options");
    const std::size_t n = x0.size();
    auto project = [&](double v) { return std::clamp(v, opts.lower, opts.upper); };
    LbfgsResult res;
    res.x = std::move(x0);
    for (double& v : res.x) v = project(v);
    std::vector<double> g(n);
    res.f = f(res.x, g);
    check_finite(res.f, g);
    res.trace.push_back(res.f);

    std::deque<Pair> mem;
    std::vector<double> d(n), x_new(n), g_new(n), pg(n), alpha(static_cast<std::size_t>(opts.history));
    std::vector<char> frozen(n);
    while (true) {
        // Projected gradient: zero where a bound blocks the descent direction.
        for (std::size_t i = 0; i < n; ++i) {
            frozen[i] = (res.x[i] <= opts.lower && g[i] > 0.0) || (res.x[i] >= opts.upper && g[i] < 0.0);
            pg[i] = frozen[i] ? 0.0 : g[i];
        }
        if (max_abs(pg) < opts.grad_tol) {
            res.converged = true;
            break;
        }
        if (res.iterations >= opts.max_iters) break;

        // Two-loop recursion: d = -H g.
        for (std::size_t i = 0; i < n; ++i) d[i] = -pg[i];
        for (std::size_t k = mem.size(); k-- > 0;) {
            alpha[k] = mem[k].rho * dot(mem[k].s, d);
            for (std::size_t i = 0; i < n; ++i) d[i] -= alpha[k] * mem[k].y[i];
        }
        double h0;
        if (mem.empty()) {
            h0 = 1.0 / std::max(1.0, std::sqrt(dot(pg, pg)));
        } else {
            const Pair& last = mem.back();
            h0 = dot(last.s, last.y) / dot(last.y, last.y);
        }
        for (double& v : d) v *= h0;
        for (std::size_t k = 0; k < mem.size(); ++k) {
            const double beta = mem[k].rho * dot(mem[k].y, d);
            for (std::size_t i = 0; i < n; ++i) d[i] += (alpha[k] - beta) * mem[k].s[i];
        }
        for (std::size_t i = 0; i < n; ++i)
            if (frozen[i]) d[i] = 0.0;
        if (!(dot(pg, d) < 0.0)) {
            // Not a descent direction; restart from steepest descent.
            mem.clear();
            const double scale = 1.0 / std::max(1.0, std::sqrt(dot(pg, pg)));
            for (std::size_t i = 0; i < n; ++i) d[i] = -scale * pg[i];
        }

        double step = 1.0;
        double f_new = 0.0;
        bool accepted = false;
        for (int h = 0; h <= opts.max_halvings; ++h) {
            double predicted = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                x_new[i] = project(res.x[i] + step * d[i]);
                predicted += g[i] * (x_new[i] - res.x[i]);
            }
            f_new = f(x_new, g_new);
            check_finite(f_new, g_new);
            if (f_new <= res.f + opts.armijo * predicted && predicted < 0.0) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {
            res.line_search_failed = true;
            break;
        }

        Pair p;
        p.s.resize(n);
        p.y.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            p.s[i] = x_new[i] - res.x[i];
            p.y[i] = g_new[i] - g[i];
        }
        const double sy = dot(p.s, p.y);
        if (sy > 1e-300 * std::max(1.0, dot(p.y, p.y))) {
            p.rho = 1.0 / sy;
            mem.push_back(std::move(p));
            if (static_cast<int>(mem.size()) > opts.history) mem.pop_front();
        }
        res.x.swap(x_new);
        g.swap(g_new);
        res.f = f_new;
        res.trace.push_back(res.f);
        ++res.iterations;
    }
    return res;
}

}  // namespace lvseg::opt
