#pragma once

#include <cstddef>
#include <deque>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lvseg/core.hpp"

// Dense float64 tensors with a tape-based reverse-mode graph. Only the
// operators the segmentation and detection networks use are provided.
namespace lvseg::ad {

using Shape = std::vector<int>;

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::size_t size() const { return data_.size(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    // Rank-3 [C,H,W] access.
    double& at(int c, int y, int x) { return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x]; }
    double at(int c, int y, int x) const {
        return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
    }

    void fill(double v);

    static std::size_t count(const Shape& shape);

private:
    Shape shape_;
    std::vector<double> data_;
};

std::string shape_string(const Shape& shape);

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;
};

// Owns parameters with stable addresses, in insertion order.
class ParameterStore {
public:
    Parameter& add(const std::string& name, const Shape& shape, bool trainable = true);
    Parameter& get(const std::string& name);
    const Parameter& get(const std::string& name) const;
    bool contains(const std::string& name) const;

    std::deque<Parameter>& all() { return params_; }
    const std::deque<Parameter>& all() const { return params_; }
    std::vector<Parameter*> trainable();

    void zero_grad();

private:
    std::deque<Parameter> params_;
};

class Graph;

// Handle to a graph node. A default-constructed Var means "absent".
struct Var {
    Graph* graph = nullptr;
    std::size_t id = 0;

    explicit operator bool() const { return graph != nullptr; }
    const Tensor& value() const;
    const Tensor& grad() const;
};

class Graph {
public:
    using Backprop = std::function<void(Graph&, std::size_t self)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // Leaf holding data; `track_grad` keeps a gradient for it after backward.
    Var constant(Tensor value, bool track_grad = false);
    // Leaf bound to a parameter; backward accumulates into p.grad.
    Var parameter(Parameter& p);

    // Reverse sweep from a scalar node. Parameter gradients accumulate.
    void backward(Var loss);

    const Tensor& value(std::size_t id) const { return nodes_[id].value; }
    const Tensor& grad(std::size_t id) const;
    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
    Tensor& grad_mut(std::size_t id) { return nodes_[id].grad; }
    std::size_t size() const { return nodes_.size(); }

    Var record(Tensor value, std::initializer_list<Var> inputs, Backprop backprop);

private:
    struct Node {
        Tensor value;
        Tensor grad;
        Backprop backprop;
        Parameter* param = nullptr;
        bool needs_grad = false;
    };
    std::vector<Node> nodes_;
    bool differentiated_ = false;
};

// Cross-correlation. x [Cin,H,W], w [Cout,Cin,kh,kw], b [Cout] or absent.
Var conv2d(Var x, Var w, Var b, int stride, int padding);
// Transposed convolution, stride 2, no padding. x [Cin,H,W], w [Cin,Cout,2,2].
Var upconv2(Var x, Var w);
// 2x2 max pooling, stride 2; ties go to the first element in raster order.
Var maxpool2(Var x);

struct BatchNormState {
    Parameter* running_mean = nullptr;
    Parameter* running_var = nullptr;
    double momentum = 0.9;
};
// Per-channel normalisation over the spatial positions of one [C,H,W] map.
// Training mode uses the map's own moments and folds them into `state`;
// inference mode uses the running moments.
Var batchnorm(Var x, Var gamma, Var beta, double eps, const BatchNormState& state, bool training);

Var relu(Var x);
Var sigmoid(Var x);
Var tanh(Var x);
Var add(Var a, Var b);
Var hadamard(Var a, Var b);
// scale * x + shift, elementwise.
Var affine(Var x, double scale, double shift);
// Stacks [C1,H,W] and [C2,H,W] into [C1+C2,H,W].
Var concat_channels(Var a, Var b);
// Scalar sum of all entries.
Var sum(Var x);
// y = W x + b with x flattened; W [out,in], b [out].
Var linear(Var x, Var w, Var b);

// Mean over pixels of the two-class softmax negative log-likelihood.
// logits [2,H,W]; labels 0/1 of size HxW.
Var spatial_softmax_ce(Var logits, const Mask& labels);
// Mean squared error against a constant target of the same size.
Var mse(Var pred, const Tensor& target);

// Softmax probability of class 1 per pixel of [2,H,W] logits.
Image foreground_probability(const Tensor& logits);

double global_grad_norm(std::span<Parameter* const> params);
// Rescales gradients so their global norm is at most max_norm. Returns the
// norm before clipping.
double clip_grad_norm(std::span<Parameter* const> params, double max_norm);

// Adadelta with a final step multiplier:
//   E[g^2] <- rho E[g^2] + (1-rho) g^2
//   dx = -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
//   E[dx^2] <- rho E[dx^2] + (1-rho) dx^2
//   x <- x + lr * dx
class Adadelta {
public:
    explicit Adadelta(std::vector<Parameter*> params, double lr = 1.0, double rho = 0.95, double eps = 1e-6);
    void step();

private:
    std::vector<Parameter*> params_;
    std::vector<std::vector<double>> sq_grad_;
    std::vector<std::vector<double>> sq_delta_;
    double lr_;
    double rho_;
    double eps_;
};

// Checkpoint: 8-byte little-endian header length, a JSON header
// {"format":"lvseg-checkpoint","version":1,"meta":{..},
//  "tensors":[{"name","shape","offset","count"}]}, then the float64 payload
// little-endian, offsets in bytes from the payload start.
void save_checkpoint(const std::filesystem::path& path, const ParameterStore& store, const std::string& meta_json);
// Fills every parameter of `store` from the file; returns the meta JSON text.
std::string load_checkpoint(const std::filesystem::path& path, ParameterStore& store);
// Meta JSON only, without touching parameters.
std::string read_checkpoint_meta(const std::filesystem::path& path);

}  // namespace lvseg::ad
