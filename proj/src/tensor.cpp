#include "oaf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace oaf {

long long shape_numel(const Shape& shape) {
    long long n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

bool shape_eq(const Shape& a, const Shape& b) { return a == b; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    for (int d : node->shape)
        if (d <= 0) throw DimError("tensor extent must be positive, got " + shape_str(node->shape));
    node->values.assign(size_t(node->numel()), 0.0);
    node->requires_grad = requires_grad;
    return wrap(std::move(node));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.mutable_values().begin(), t.mutable_values().end(), value);
    return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    if ((long long)values.size() != node->numel())
        throw DimError("value count " + std::to_string(values.size()) + " does not match shape " +
                       shape_str(node->shape));
    node->values = std::move(values);
    node->requires_grad = requires_grad;
    return wrap(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

Tensor Tensor::shell(Shape shape) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->shell = true;
    node->op = "shell";
    return wrap(std::move(node));
}

double Tensor::item() const {
    if (numel() != 1) throw UsageError("item() requires a scalar tensor, got " + shape_str(shape()));
    return node_->values[0];
}

const std::vector<double>& Tensor::grad() const {
    if (node_->grad.empty()) throw UsageError("tensor has no gradient (op=" + std::string(node_->op) + ")");
    return node_->grad;
}

namespace {
thread_local bool g_grad_enabled = true;
thread_local AttentionProbe g_attention_probe;
}

void set_attention_probe(AttentionProbe probe) { g_attention_probe = std::move(probe); }

void notify_attention(const Tensor& sim, int row_axis) {
    if (g_attention_probe && !sim.is_shell()) g_attention_probe(sim, row_axis);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw UsageError("backward requires a scalar loss, got " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    if (loss.is_shell()) throw UsageError("backward on a count-only shell tensor");
    if (!loss.requires_grad()) return;

    // iterative post-order over parents
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    struct Frame {
        TensorNode* node;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.node().get(), 0});
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            TensorNode* p = f.node->parents[f.next_parent++].get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    // non-leaf grads are scratch space for this sweep; only leaves accumulate
    for (TensorNode* node : order)
        if (node->backward_fn) node->grad.clear();

    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* node = *it;
        if (!node->backward_fn) continue;
        if (node->grad.empty()) continue; // unreachable branch of the trace
        for (double g : node->grad)
            if (!std::isfinite(g))
                throw NumericError(std::string("non-finite gradient at op '") + node->op + "'");
        node->backward_fn(*node);
    }
}

} // namespace oaf
