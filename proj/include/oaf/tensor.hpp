#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "oaf/error.hpp"
#include "oaf/flops.hpp"

namespace oaf {

using Shape = std::vector<int>;

long long shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
bool shape_eq(const Shape& a, const Shape& b);

struct TensorNode {
    Shape shape;
    std::vector<double> values; // empty in count-only shells
    bool requires_grad = false;
    bool shell = false; // produced in count-only mode, carries no values
    std::vector<double> grad; // lazily allocated, same numel as values
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorNode>> parents;
    // Backward step: reads this node's grad, accumulates into parents' grads.
    std::function<void(TensorNode&)> backward_fn;

    long long numel() const { return shape_numel(shape); }
    void ensure_grad() {
        if ((long long)grad.size() != numel()) grad.assign(size_t(numel()), 0.0);
    }
};

// Shared handle to one trace node. Tensors are immutable once produced by an
// op; only leaves (parameters) are mutated in place by the optimizer, and
// only grads of leaves accumulate across backward calls.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor shell(Shape shape); // count-only placeholder

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int ndim() const { return int(node_->shape.size()); }
    int dim(int i) const { return node_->shape[size_t(i)]; }
    long long numel() const { return node_->numel(); }
    bool is_shell() const { return node_->shell; }

    const std::vector<double>& values() const { return node_->values; }
    std::vector<double>& mutable_values() { return node_->values; } // leaves only
    double item() const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<double>& grad() const;
    std::vector<double>& mutable_grad() { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    const char* op() const { return node_->op; }
    std::shared_ptr<TensorNode> node() const { return node_; }
    static Tensor wrap(std::shared_ptr<TensorNode> node) {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

private:
    std::shared_ptr<TensorNode> node_;
};

// Reverse-mode sweep from a scalar loss. Populates grad on every
// requires_grad leaf reachable through the trace; repeated calls accumulate.
void backward(const Tensor& loss);

// Test/diagnostic hook: attention code reports every similarity tensor it
// produces together with the row axis that softmax normalized.
using AttentionProbe = std::function<void(const Tensor& sim, int row_axis)>;
void set_attention_probe(AttentionProbe probe);
void notify_attention(const Tensor& sim, int row_axis);

// While a guard is alive, ops do not record the trace (inference mode).
bool grad_enabled();
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// ---- operations -----------------------------------------------------------

// batched matrix product; leading dims must match exactly or be absent on one side
Tensor matmul(const Tensor& a, const Tensor& b);
// x [B,Cin,H,W], w [Cout,Cin,k,k], bias [Cout] or undefined
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad);
// depthwise: x [B,C,H,W], w [C,k,k], bias [C] or undefined
Tensor dwconv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad);
// x [B,C,D,H,W], w [C,C,k,k,k] (k odd), stride 1, pad (k-1)/2, shape preserving
Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias);
Tensor softmax(const Tensor& x, int axis);
// normalize over the last axis, eps inside the square root
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor abs_val(const Tensor& a);
Tensor square(const Tensor& a);
Tensor clamp01(const Tensor& a); // subgradient 0 outside and at the boundary
Tensor leaky_relu(const Tensor& a, double slope = 0.01);
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

Tensor sum_all(const Tensor& a); // -> [1]
Tensor mean_spatial(const Tensor& x); // [C,H,W] -> [C]
Tensor scale_channels(const Tensor& x, const Tensor& g); // [C,H,W] * g[C]
Tensor max_all_detached(const Tensor& a); // -> [1], treated as a constant statistic
Tensor detach(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<int>& perm);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, int start, int len);
// row-vector bias over the last axis: x [...,C] + b [C]
Tensor add_rowvec(const Tensor& x, const Tensor& b);

// [C,H,W] -> [C,out_h,out_w], align-corners=false sampling
Tensor upsample_bilinear(const Tensor& x, int out_h, int out_w);

// logits [K,H,W]; labels length H*W with values in [0,K) or ignore_index;
// mean negative log-likelihood over non-ignored pixels
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels, int ignore_index = 255);

} // namespace oaf
