#pragma once

// Minimal reverse-mode automatic differentiation over nn::Tensor.
//
// Every op builds a Node holding its forward value and a closure that pushes
// the node's gradient into its parents. Nodes that do not depend on any
// trainable leaf keep no parents, so pure inference builds no graph.

#include <functional>
#include <memory>
#include <random>
#include <vector>

#include "csifall/nn/tensor.hpp"

namespace csifall::nn {

struct Node {
    Tensor value;
    Tensor grad;  // allocated on first use
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
    bool requires_grad = false;

    Tensor& ensure_grad();
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    const Tensor& grad() const { return node_->grad; }
    Tensor& mutable_grad() { return node_->ensure_grad(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t numel() const { return node_->value.numel(); }
    bool defined() const { return static_cast<bool>(node_); }
    const std::shared_ptr<Node>& node() const { return node_; }

    void zero_grad();

private:
    std::shared_ptr<Node> node_;
};

Var constant(Tensor value);
Var parameter(Tensor value);

// Runs reverse accumulation from a scalar (numel == 1) output, seeding d/d(out) = 1.
void backward(const Var& out);

// Elementwise arithmetic (identical shapes).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double k);
Var add_scalar(const Var& a, double k);
// a * s where s holds a single element.
Var scale_by(const Var& a, const Var& s);

// Broadcasting over matching rank: each dim of b is either 1 or equal to a's.
Var mul_bcast(const Var& a, const Var& b);
Var add_bcast(const Var& a, const Var& b);

Var square(const Var& a);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var silu(const Var& a);

// x: C x H x W, w: O x (C/groups) x kh x kw, bias: O (optional). Zero padding.
struct Conv2dOptions {
    int stride_h = 1;
    int stride_w = 1;
    int pad_h = 0;
    int pad_w = 0;
    int groups = 1;
};
Var conv2d(const Var& x, const Var& w, const Var* bias, const Conv2dOptions& opt);

// Frozen-statistics batch normalization: x * gamma / sqrt(var + eps) + (beta - mean * gamma / sqrt(var + eps)).
Var batchnorm_frozen(const Var& x, const Var& gamma, const Var& beta, const Tensor& running_mean,
                     const Tensor& running_var, double eps);

// Box average along axis 1 of a C x T x S tensor with replicate edge padding.
Var box_mean_time(const Var& x, int window);

// Dense algebra on 2-D tensors.
Var matmul(const Var& a, const Var& b, bool transpose_a = false, bool transpose_b = false);
// x: n x in, w: out x in, bias: out (optional) -> n x out.
Var linear(const Var& x, const Var& w, const Var* bias);
Var transpose2d(const Var& a);
Var softmax_rows(const Var& a);
Var layer_norm_rows(const Var& a, const Var& gamma, const Var& beta, double eps = 1e-5);

// Shape manipulation.
Var reshape(const Var& a, Shape shape);
Var mean_axis(const Var& a, int axis, bool keepdim);
Var max_axis(const Var& a, int axis, bool keepdim);
Var concat(const std::vector<Var>& parts, int axis);
Var slice(const Var& a, int axis, int start, int length);
Var index_select_rows(const Var& a, const std::vector<int>& rows);

Var dropout(const Var& a, double p, bool training, std::mt19937_64* rng);

// Focal loss on a logit vector; see training/focal_loss for the scalar form.
Var focal_loss_logits(const Var& logits, int target, double gamma, double alpha_t);

}  // namespace csifall::nn
