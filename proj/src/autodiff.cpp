#include "lvseg/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace lvseg::ad {

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(count(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
    if (data_.size() != count(shape_)) throw Error("tensor data does not match shape " + shape_string(shape_));
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

std::size_t Tensor::count(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw Error("tensor extents must be positive, got " + shape_string(shape));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

Parameter& ParameterStore::add(const std::string& name, const Shape& shape, bool trainable) {
    if (contains(name)) throw Error("duplicate parameter '" + name + "'");
    params_.push_back(Parameter{name, Tensor(shape), Tensor(shape), trainable});
    return params_.back();
}

Parameter& ParameterStore::get(const std::string& name) {
    for (auto& p : params_)
        if (p.name == name) return p;
    throw Error("unknown parameter '" + name + "'");
}

const Parameter& ParameterStore::get(const std::string& name) const {
    for (const auto& p : params_)
        if (p.name == name) return p;
    throw Error("unknown parameter '" + name + "'");
}

bool ParameterStore::contains(const std::string& name) const {
    return std::any_of(params_.begin(), params_.end(), [&](const Parameter& p) { return p.name == name; });
}

std::vector<Parameter*> ParameterStore::trainable() {
    std::vector<Parameter*> out;
    for (auto& p : params_)
        if (p.trainable) out.push_back(&p);
    return out;
}

void ParameterStore::zero_grad() {
    for (auto& p : params_) p.grad.fill(0.0);
}

const Tensor& Var::value() const { return graph->value(id); }
const Tensor& Var::grad() const { return graph->grad(id); }

Var Graph::constant(Tensor value, bool track_grad) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = track_grad;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
}

Var Graph::parameter(Parameter& p) {
    Node n;
    n.value = p.value;
    n.param = &p;
    n.needs_grad = p.trainable;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
}

Var Graph::record(Tensor value, std::initializer_list<Var> inputs, Backprop backprop) {
    Node n;
    n.value = std::move(value);
    for (const Var& v : inputs) {
        if (!v) continue;
        if (v.graph != this) throw Error("operands belong to different graphs");
        n.needs_grad = n.needs_grad || nodes_[v.id].needs_grad;
    }
    for (double x : n.value.values())
        if (!std::isfinite(x)) throw Error("non-finite value produced by a forward op");
    if (n.needs_grad) n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
}

const Tensor& Graph::grad(std::size_t id) const {
    if (!differentiated_) throw Error("gradient requested before backward");
    const Node& n = nodes_[id];
    if (!n.needs_grad) throw Error("node does not track gradients");
    return n.grad;
}

void Graph::backward(Var loss) {
    if (!loss || nodes_.empty()) throw Error("backward called before any forward op");
    if (loss.graph != this) throw Error("loss belongs to another graph");
    if (nodes_[loss.id].value.size() != 1) throw Error("backward needs a scalar loss");
    for (auto& n : nodes_) {
        if (n.needs_grad) {
            if (n.grad.shape() != n.value.shape())
                n.grad = Tensor(n.value.shape());
            else
                n.grad.fill(0.0);
        }
    }
    differentiated_ = true;
    if (!nodes_[loss.id].needs_grad) return;
    nodes_[loss.id].grad[0] = 1.0;
    for (std::size_t id = loss.id + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (n.needs_grad && n.backprop) n.backprop(*this, id);
    }
    for (auto& n : nodes_) {
        if (!n.param || !n.needs_grad) continue;
        auto& g = n.param->grad.values();
        const auto& src = n.grad.values();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
    }
}

namespace {

void require_rank(const Tensor& t, int rank, const char* op) {
    if (t.rank() != rank)
        throw Error(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_string(t.shape()));
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw Error(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

// Output index range [lo, hi) for which o*stride + k - pad lands in [0, n).
void valid_range(int n, int out, int k, int stride, int pad, int& lo, int& hi) {
    lo = 0;
    while (lo < out && lo * stride + k - pad < 0) ++lo;
    hi = out;
    while (hi > lo && (hi - 1) * stride + k - pad >= n) --hi;
}

}  // namespace

namespace {

// Fixed-order dot product with four interleaved partial sums.
double dot(const double* a, const double* b, std::size_t n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

// Column matrix [Cin*kh*kw, oh*ow]; out-of-image taps are zero.
void im2col(const double* in, int cin, int h, int wd, int kh, int kw, int stride, int padding, int oh, int ow,
            std::vector<double>& col) {
    const std::size_t p = static_cast<std::size_t>(oh) * ow;
    col.assign(static_cast<std::size_t>(cin) * kh * kw * p, 0.0);
    std::size_t k = 0;
    for (int ci = 0; ci < cin; ++ci) {
        const double* ip = in + static_cast<std::size_t>(ci) * h * wd;
        for (int ky = 0; ky < kh; ++ky) {
            int y_lo, y_hi;
            valid_range(h, oh, ky, stride, padding, y_lo, y_hi);
            for (int kx = 0; kx < kw; ++kx, ++k) {
                int x_lo, x_hi;
                valid_range(wd, ow, kx, stride, padding, x_lo, x_hi);
                double* dst = col.data() + k * p;
                for (int oy = y_lo; oy < y_hi; ++oy) {
                    const double* row = ip + static_cast<std::size_t>(oy * stride + ky - padding) * wd;
                    double* drow = dst + static_cast<std::size_t>(oy) * ow;
                    for (int ox = x_lo; ox < x_hi; ++ox) drow[ox] = row[ox * stride + kx - padding];
                }
            }
        }
    }
}

void col2im_add(const std::vector<double>& col, int cin, int h, int wd, int kh, int kw, int stride, int padding,
                int oh, int ow, double* out) {
    const std::size_t p = static_cast<std::size_t>(oh) * ow;
    std::size_t k = 0;
    for (int ci = 0; ci < cin; ++ci) {
        double* op = out + static_cast<std::size_t>(ci) * h * wd;
        for (int ky = 0; ky < kh; ++ky) {
            int y_lo, y_hi;
            valid_range(h, oh, ky, stride, padding, y_lo, y_hi);
            for (int kx = 0; kx < kw; ++kx, ++k) {
                int x_lo, x_hi;
                valid_range(wd, ow, kx, stride, padding, x_lo, x_hi);
                const double* src = col.data() + k * p;
                for (int oy = y_lo; oy < y_hi; ++oy) {
                    double* row = op + static_cast<std::size_t>(oy * stride + ky - padding) * wd;
                    const double* srow = src + static_cast<std::size_t>(oy) * ow;
                    for (int ox = x_lo; ox < x_hi; ++ox) row[ox * stride + kx - padding] += srow[ox];
                }
            }
        }
    }
}

}  // namespace

Var conv2d(Var x, Var w, Var b, int stride, int padding) {
    const Tensor& in = x.value();
    const Tensor& ker = w.value();
    require_rank(in, 3, "conv2d");
    require_rank(ker, 4, "conv2d");
    if (stride < 1 || padding < 0) throw Error("conv2d: stride must be >= 1 and padding >= 0");
    const int cin = in.dim(0), h = in.dim(1), wd = in.dim(2);
    const int cout = ker.dim(0), kh = ker.dim(2), kw = ker.dim(3);
    if (ker.dim(1) != cin) throw Error("conv2d: kernel expects " + std::to_string(ker.dim(1)) + " input channels");
    if (b && (b.value().rank() != 1 || b.value().dim(0) != cout)) throw Error("conv2d: bias shape mismatch");
    const int span_h = h + 2 * padding - kh;
    const int span_w = wd + 2 * padding - kw;
    if (span_h < 0 || span_w < 0) throw Error("conv2d: kernel larger than padded input");
    if (span_h % stride != 0 || span_w % stride != 0) throw Error("conv2d: non-integer output extent");
    const int oh = span_h / stride + 1;
    const int ow = span_w / stride + 1;
    const std::size_t npix = static_cast<std::size_t>(oh) * ow;
    const std::size_t nk = static_cast<std::size_t>(cin) * kh * kw;

    auto col = std::make_shared<std::vector<double>>();
    im2col(in.data(), cin, h, wd, kh, kw, stride, padding, oh, ow, *col);

    // out[co, p] = b[co] + sum_k W[co, k] col[k, p]
    Tensor out({cout, oh, ow});
    if (b)
        for (int co = 0; co < cout; ++co)
            std::fill(out.data() + static_cast<std::size_t>(co) * npix, out.data() + static_cast<std::size_t>(co + 1) * npix,
                      b.value()[static_cast<std::size_t>(co)]);
    for (std::size_t k = 0; k < nk; ++k) {
        const double* src = col->data() + k * npix;
        for (int co = 0; co < cout; ++co) {
            const double wv = ker[static_cast<std::size_t>(co) * nk + k];
            double* op = out.data() + static_cast<std::size_t>(co) * npix;
            for (std::size_t i = 0; i < npix; ++i) op[i] += wv * src[i];
        }
    }

    return x.graph->record(std::move(out), {x, w, b}, [=](Graph& g, std::size_t self) {
        const Tensor& dout = g.grad(self);
        const Tensor& kv = g.value(w.id);
        if (b && g.needs_grad(b.id)) {
            Tensor& db = g.grad_mut(b.id);
            for (int co = 0; co < cout; ++co) {
                const double* dp = dout.data() + static_cast<std::size_t>(co) * npix;
                double s = 0.0;
                for (std::size_t i = 0; i < npix; ++i) s += dp[i];
                db[static_cast<std::size_t>(co)] += s;
            }
        }
        if (g.needs_grad(w.id)) {
            Tensor& dw = g.grad_mut(w.id);
            for (std::size_t k = 0; k < nk; ++k) {
                const double* src = col->data() + k * npix;
                for (int co = 0; co < cout; ++co)
                    dw[static_cast<std::size_t>(co) * nk + k] +=
                        dot(dout.data() + static_cast<std::size_t>(co) * npix, src, npix);
            }
        }
        if (g.needs_grad(x.id)) {
            std::vector<double> dcol(nk * npix, 0.0);
            for (std::size_t k = 0; k < nk; ++k) {
                double* dst = dcol.data() + k * npix;
                for (int co = 0; co < cout; ++co) {
                    const double wv = kv[static_cast<std::size_t>(co) * nk + k];
                    const double* dp = dout.data() + static_cast<std::size_t>(co) * npix;
                    for (std::size_t i = 0; i < npix; ++i) dst[i] += wv * dp[i];
                }
            }
            col2im_add(dcol, cin, h, wd, kh, kw, stride, padding, oh, ow, g.grad_mut(x.id).data());
        }
    });
}

Var upconv2(Var x, Var w) {
    const Tensor& in = x.value();
    const Tensor& ker = w.value();
    require_rank(in, 3, "upconv2");
    require_rank(ker, 4, "upconv2");
    const int cin = in.dim(0), h = in.dim(1), wd = in.dim(2);
    if (ker.dim(0) != cin || ker.dim(2) != 2 || ker.dim(3) != 2) throw Error("upconv2: kernel must be [Cin,Cout,2,2]");
    const int cout = ker.dim(1);
    Tensor out({cout, 2 * h, 2 * wd});
    for (int ci = 0; ci < cin; ++ci) {
        for (int co = 0; co < cout; ++co) {
            const double* k = ker.data() + (static_cast<std::size_t>(ci) * cout + co) * 4;
            for (int y = 0; y < h; ++y) {
                for (int xx = 0; xx < wd; ++xx) {
                    const double v = in.at(ci, y, xx);
                    out.at(co, 2 * y, 2 * xx) += v * k[0];
                    out.at(co, 2 * y, 2 * xx + 1) += v * k[1];
                    out.at(co, 2 * y + 1, 2 * xx) += v * k[2];
                    out.at(co, 2 * y + 1, 2 * xx + 1) += v * k[3];
                }
            }
        }
    }
    return x.graph->record(std::move(out), {x, w}, [=](Graph& g, std::size_t self) {
        const Tensor& dout = g.grad(self);
        const Tensor& xin = g.value(x.id);
        const Tensor& kv = g.value(w.id);
        Tensor* dx = g.needs_grad(x.id) ? &g.grad_mut(x.id) : nullptr;
        Tensor* dw = g.needs_grad(w.id) ? &g.grad_mut(w.id) : nullptr;
        for (int ci = 0; ci < cin; ++ci) {
            for (int co = 0; co < cout; ++co) {
                const std::size_t kb = (static_cast<std::size_t>(ci) * cout + co) * 4;
                double acc[4] = {0, 0, 0, 0};
                for (int y = 0; y < h; ++y) {
                    for (int xx = 0; xx < wd; ++xx) {
                        const double d0 = dout.at(co, 2 * y, 2 * xx);
                        const double d1 = dout.at(co, 2 * y, 2 * xx + 1);
                        const double d2 = dout.at(co, 2 * y + 1, 2 * xx);
                        const double d3 = dout.at(co, 2 * y + 1, 2 * xx + 1);
                        if (dx) dx->at(ci, y, xx) += d0 * kv[kb] + d1 * kv[kb + 1] + d2 * kv[kb + 2] + d3 * kv[kb + 3];
                        const double v = xin.at(ci, y, xx);
                        acc[0] += v * d0;
                        acc[1] += v * d1;
                        acc[2] += v * d2;
                        acc[3] += v * d3;
                    }
                }
                if (dw)
                    for (int k = 0; k < 4; ++k) (*dw)[kb + static_cast<std::size_t>(k)] += acc[k];
            }
        }
    });
}

Var maxpool2(Var x) {
    const Tensor& in = x.value();
    require_rank(in, 3, "maxpool2");
    const int c = in.dim(0), h = in.dim(1), wd = in.dim(2);
    if (h % 2 || wd % 2) throw Error("maxpool2: odd spatial extent " + shape_string(in.shape()));
    const int oh = h / 2, ow = wd / 2;
    Tensor out({c, oh, ow});
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
    std::size_t o = 0;
    for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < oh; ++y) {
            for (int xx = 0; xx < ow; ++xx, ++o) {
                std::size_t best = (static_cast<std::size_t>(ch) * h + 2 * y) * wd + 2 * xx;
                const std::size_t cand[3] = {best + 1, best + static_cast<std::size_t>(wd),
                                             best + static_cast<std::size_t>(wd) + 1};
                for (std::size_t k : cand)
                    if (in[k] > in[best]) best = k;
                out[o] = in[best];
                (*argmax)[o] = best;
            }
        }
    }
    return x.graph->record(std::move(out), {x}, [=](Graph& g, std::size_t self) {
        const Tensor& dout = g.grad(self);
        Tensor& dx = g.grad_mut(x.id);
        for (std::size_t i = 0; i < dout.size(); ++i) dx[(*argmax)[i]] += dout[i];
    });
}

Var batchnorm(Var x, Var gamma, Var beta, double eps, const BatchNormState& state, bool training) {
    const Tensor& in = x.value();
    require_rank(in, 3, "batchnorm");
    const int c = in.dim(0);
    const std::size_t n = static_cast<std::size_t>(in.dim(1)) * in.dim(2);
    if (gamma.value().size() != static_cast<std::size_t>(c) || beta.value().size() != static_cast<std::size_t>(c))
        throw Error("batchnorm: affine parameters must have one entry per channel");
    if (!(eps > 0.0)) throw Error("batchnorm: eps must be positive");

    auto xhat = std::make_shared<std::vector<double>>(in.size());
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(c));
    Tensor out(in.shape());
    for (int ch = 0; ch < c; ++ch) {
        const double* p = in.data() + static_cast<std::size_t>(ch) * n;
        double mean, var;
        if (training) {
            mean = 0.0;
            for (std::size_t i = 0; i < n; ++i) mean += p[i];
            mean /= static_cast<double>(n);
            var = 0.0;
            for (std::size_t i = 0; i < n; ++i) var += (p[i] - mean) * (p[i] - mean);
            var /= static_cast<double>(n);
            if (state.running_mean && state.running_var) {
                double& rm = state.running_mean->value[static_cast<std::size_t>(ch)];
                double& rv = state.running_var->value[static_cast<std::size_t>(ch)];
                rm = state.momentum * rm + (1.0 - state.momentum) * mean;
                rv = state.momentum * rv + (1.0 - state.momentum) * var;
            }
        } else {
            if (!state.running_mean || !state.running_var) throw Error("batchnorm: inference needs running moments");
            mean = state.running_mean->value[static_cast<std::size_t>(ch)];
            var = state.running_var->value[static_cast<std::size_t>(ch)];
        }
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[static_cast<std::size_t>(ch)] = is;
        const double gm = gamma.value()[static_cast<std::size_t>(ch)];
        const double bt = beta.value()[static_cast<std::size_t>(ch)];
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t k = static_cast<std::size_t>(ch) * n + i;
            (*xhat)[k] = (p[i] - mean) * is;
            out[k] = gm * (*xhat)[k] + bt;
        }
    }
    return x.graph->record(std::move(out), {x, gamma, beta}, [=](Graph& g, std::size_t self) {
        const Tensor& dout = g.grad(self);
        const Tensor& gm = g.value(gamma.id);
        for (int ch = 0; ch < c; ++ch) {
            const std::size_t base = static_cast<std::size_t>(ch) * n;
            double sum_d = 0.0, sum_dx = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                sum_d += dout[base + i];
                sum_dx += dout[base + i] * (*xhat)[base + i];
            }
            if (g.needs_grad(gamma.id)) g.grad_mut(gamma.id)[static_cast<std::size_t>(ch)] += sum_dx;
            if (g.needs_grad(beta.id)) g.grad_mut(beta.id)[static_cast<std::size_t>(ch)] += sum_d;
            if (!g.needs_grad(x.id)) continue;
            Tensor& dx = g.grad_mut(x.id);
            const double gk = gm[static_cast<std::size_t>(ch)] * (*inv_std)[static_cast<std::size_t>(ch)];
            if (training) {
                const double nn = static_cast<double>(n);
                for (std::size_t i = 0; i < n; ++i)
                    dx[base + i] += gk * (dout[base + i] - sum_d / nn - (*xhat)[base + i] * sum_dx / nn);
            } else {
                for (std::size_t i = 0; i < n; ++i) dx[base + i] += gk * dout[base + i];
            }
        }
    });
}

namespace {

// Elementwise unary op with derivative expressed through input and output.
template <typename F, typename D>
Var unary(Var x, F f, D dfdx) {
    const Tensor& in = x.value();
    Tensor out(in.shape());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
    return x.graph->record(std::move(out), {x}, [=](Graph& g, std::size_t self) {
        const Tensor& dout = g.grad(self);
        const Tensor& xin = g.value(x.id);
        const Tensor& y = g.value(self);
        Tensor& dx = g.grad_mut(x.id);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dout[i] * dfdx(xin[i], y[i]);
    });
}

double stable_sigmoid(double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}

}  // namespace

Var relu(Var x) {
    return unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(Var x) {
    return unary(x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var x) {
    return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var affine(Var x, double scale, double shift) {
    return unary(x, [=](double v) { return scale * v + shift; }, [=](double, double) { return scale; });
}

Var add(Var a, Var b) {
    require_same(a.value(), b.value(), "add");
    Tensor out(a.value().shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
    return a.graph->record(std::move(out), {a, b}, [=](Graph& g, std::size_t self) {
        const Tensor& dout = g.grad(self);
        for (Var v : {a, b}) {
            if (!g.needs_grad(v.id)) continue;
            Tensor& d = g.grad_mut(v.id);
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += dout[i];
        }
    });
}

Var hadamard(Var a, Var b) {
    require_same(a.value(), b.value(), "hadamard");
    Tensor out(a.value().shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    return a.graph->record(std::move(out), {a, b}, [=](Graph& g, std::size_t self) {
        const Tensor& dout = g.grad(self);
        const Tensor& av = g.value(a.id);
        const Tensor& bv = g.value(b.id);
        if (g.needs_grad(a.id)) {
            Tensor& d = g.grad_mut(a.id);
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += dout[i] * bv[i];
        }
        if (g.needs_grad(b.id)) {
            Tensor& d = g.grad_mut(b.id);
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += dout[i] * av[i];
        }
    });
}

Var concat_channels(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    require_rank(av, 3, "concat_channels");
    require_rank(bv, 3, "concat_channels");
    if (av.dim(1) != bv.dim(1) || av.dim(2) != bv.dim(2))
        throw Error("concat_channels: spatial mismatch " + shape_string(av.shape()) + " vs " + shape_string(bv.shape()));
    Tensor out({av.dim(0) + bv.dim(0), av.dim(1), av.dim(2)});
    std::copy(av.values().begin(), av.values().end(), out.values().begin());
    std::copy(bv.values().begin(), bv.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(av.size()));
    const std::size_t na = av.size();
    return a.graph->record(std::move(out), {a, b}, [=](Graph& g, std::size_t self) {
        const Tensor& dout = g.grad(self);
        if (g.needs_grad(a.id)) {
            Tensor& d = g.grad_mut(a.id);
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += dout[i];
        }
        if (g.needs_grad(b.id)) {
            Tensor& d = g.grad_mut(b.id);
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += dout[na + i];
        }
    });
}

Var sum(Var x) {
    double s = 0.0;
    for (double v : x.value().values()) s += v;
    return x.graph->record(Tensor({1}, s), {x}, [=](Graph& g, std::size_t self) {
        const double d = g.grad(self)[0];
        Tensor& dx = g.grad_mut(x.id);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += d;
    });
}

Var linear(Var x, Var w, Var b) {
    const Tensor& in = x.value();
    const Tensor& wv = w.value();
    require_rank(wv, 2, "linear");
    const int out_n = wv.dim(0);
    const int in_n = wv.dim(1);
    if (in.size() != static_cast<std::size_t>(in_n)) throw Error("linear: input size does not match weight columns");
    if (b && b.value().size() != static_cast<std::size_t>(out_n)) throw Error("linear: bias size mismatch");
    Tensor out({out_n});
    for (int o = 0; o < out_n; ++o) {
        double s = b ? b.value()[static_cast<std::size_t>(o)] : 0.0;
        const double* row = wv.data() + static_cast<std::size_t>(o) * in_n;
        for (int i = 0; i < in_n; ++i) s += row[i] * in[static_cast<std::size_t>(i)];
        out[static_cast<std::size_t>(o)] = s;
    }
    return x.graph->record(std::move(out), {x, w, b}, [=](Graph& g, std::size_t self) {
        const Tensor& dout = g.grad(self);
        const Tensor& xin = g.value(x.id);
        const Tensor& wm = g.value(w.id);
        if (b && g.needs_grad(b.id)) {
            Tensor& db = g.grad_mut(b.id);
            for (int o = 0; o < out_n; ++o) db[static_cast<std::size_t>(o)] += dout[static_cast<std::size_t>(o)];
        }
        Tensor* dw = g.needs_grad(w.id) ? &g.grad_mut(w.id) : nullptr;
        Tensor* dx = g.needs_grad(x.id) ? &g.grad_mut(x.id) : nullptr;
        for (int o = 0; o < out_n; ++o) {
            const double d = dout[static_cast<std::size_t>(o)];
            const std::size_t row = static_cast<std::size_t>(o) * in_n;
            for (int i = 0; i < in_n; ++i) {
                if (dw) (*dw)[row + static_cast<std::size_t>(i)] += d * xin[static_cast<std::size_t>(i)];
                if (dx) (*dx)[static_cast<std::size_t>(i)] += d * wm[row + static_cast<std::size_t>(i)];
            }
        }
    });
}

Var spatial_softmax_ce(Var logits, const Mask& labels) {
    const Tensor& z = logits.value();
    require_rank(z, 3, "spatial_softmax_ce");
    if (z.dim(0) != 2) throw Error("spatial_softmax_ce: expected two logit channels");
    const int h = z.dim(1), wd = z.dim(2);
    if (labels.rows() != h || labels.cols() != wd) throw Error("spatial_softmax_ce: label size mismatch");
    const std::size_t n = static_cast<std::size_t>(h) * wd;
    auto p1 = std::make_shared<std::vector<double>>(n);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double z0 = z[i], z1 = z[n + i];
        const double m = std::max(z0, z1);
        const double lse = m + std::log1p(std::exp(std::min(z0, z1) - m));
        loss += lse - (labels[i] ? z1 : z0);
        (*p1)[i] = stable_sigmoid(z1 - z0);
    }
    loss /= static_cast<double>(n);
    auto lab = std::make_shared<Mask>(labels);
    return logits.graph->record(Tensor({1}, loss), {logits}, [=](Graph& g, std::size_t self) {
        const double d = g.grad(self)[0] / static_cast<double>(n);
        Tensor& dz = g.grad_mut(logits.id);
        for (std::size_t i = 0; i < n; ++i) {
            const double y = (*lab)[i] ? 1.0 : 0.0;
            const double q = (*p1)[i];
            dz[i] += d * ((1.0 - q) - (1.0 - y));
            dz[n + i] += d * (q - y);
        }
    });
}

Var mse(Var pred, const Tensor& target) {
    const Tensor& p = pred.value();
    if (p.size() != target.size()) throw Error("mse: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] - target[i]) * (p[i] - target[i]);
    const double n = static_cast<double>(p.size());
    auto tgt = std::make_shared<Tensor>(target);
    return pred.graph->record(Tensor({1}, s / n), {pred}, [=](Graph& g, std::size_t self) {
        const double d = g.grad(self)[0];
        const Tensor& pv = g.value(pred.id);
        Tensor& dp = g.grad_mut(pred.id);
        for (std::size_t i = 0; i < dp.size(); ++i) dp[i] += d * 2.0 * (pv[i] - (*tgt)[i]) / n;
    });
}

Image foreground_probability(const Tensor& logits) {
    require_rank(logits, 3, "foreground_probability");
    if (logits.dim(0) != 2) throw Error("foreground_probability: expected two logit channels");
    const int h = logits.dim(1), wd = logits.dim(2);
    const std::size_t n = static_cast<std::size_t>(h) * wd;
    Image out(h, wd);
    for (std::size_t i = 0; i < n; ++i) out[i] = stable_sigmoid(logits[n + i] - logits[i]);
    return out;
}

double global_grad_norm(std::span<Parameter* const> params) {
    double s = 0.0;
    for (const Parameter* p : params)
        for (double g : p->grad.values()) s += g * g;
    return std::sqrt(s);
}

double clip_grad_norm(std::span<Parameter* const> params, double max_norm) {
    if (!(max_norm > 0.0)) throw Error("clip norm must be positive");
    const double norm = global_grad_norm(params);
    if (norm > max_norm) {
        const double scale = max_norm / norm;
        for (Parameter* p : params)
            for (double& g : p->grad.values()) g *= scale;
    }
    return norm;
}

Adadelta::Adadelta(std::vector<Parameter*> params, double lr, double rho, double eps)
    : params_(std::move(params)), lr_(lr), rho_(rho), eps_(eps) {
    if (!(lr > 0.0) || !(rho > 0.0 && rho < 1.0) || !(eps > 0.0)) throw Error("invalid Adadelta hyper-parameters");
    for (const Parameter* p : params_) {
        sq_grad_.emplace_back(p->value.size(), 0.0);
        sq_delta_.emplace_back(p->value.size(), 0.0);
    }
}

void Adadelta::step() {
    for (std::size_t k = 0; k < params_.size(); ++k) {
        Parameter& p = *params_[k];
        auto& eg = sq_grad_[k];
        auto& ed = sq_delta_[k];
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad[i];
            eg[i] = rho_ * eg[i] + (1.0 - rho_) * g * g;
            const double dx = -std::sqrt(ed[i] + eps_) / std::sqrt(eg[i] + eps_) * g;
            ed[i] = rho_ * ed[i] + (1.0 - rho_) * dx * dx;
            p.value[i] += lr_ * dx;
        }
    }
}

}  // namespace lvseg::ad
