#pragma once

#include <functional>
#include <limits>
#include <vector>

namespace lvseg::opt {

struct LbfgsOptions {
    int history = 10;
    int max_iters = 200;
    double grad_tol = 1e-6;       // stop when the largest projected gradient entry falls below this
    double armijo = 1e-4;         // sufficient-decrease constant
    int max_halvings = 40;
    // Optional box on every coordinate; iterates are projected onto it.
    double lower = -std::numeric_limits<double>::infinity();
    double upper = std::numeric_limits<double>::infinity();
};

struct LbfgsResult {
    std::vector<double> x;
    double f = 0.0;
    int iterations = 0;
    bool converged = false;           // gradient tolerance reached
    bool line_search_failed = false;  // returned the last accepted iterate
    std::vector<double> trace;        // f at x0 and after every accepted step
};

// Returns f(x) and writes the gradient into `grad` (same size as x).
using Objective = std::function<double(const std::vector<double>& x, std::vector<double>& grad)>;

// Two-loop recursion with Armijo backtracking. Curvature pairs with s.y <= 0
// are dropped. With a box, coordinates held at a bound by their gradient are
// frozen for the step and the trial points are projected. Throws Error on a
// non-finite value or gradient.
LbfgsResult lbfgs_minimize(const Objective& f, std::vector<double> x0, const LbfgsOptions& opts = {});

}  // namespace lvseg::opt
