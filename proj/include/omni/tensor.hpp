#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "omni/rng.hpp"

namespace omni {

// Dense double-precision tensor with reverse-mode differentiation.
//
// Storage is row-major and owned by a graph node; a Tensor is a cheap
// shared handle to that node. Copying a Tensor aliases the node (both
// handles see the same values and gradient); clone() makes a detached
// deep copy. Ops build an acyclic graph; backward(loss) runs reverse
// topological accumulation into every reachable leaf with
// requires_grad set.
//
// Every op validates shapes and scans its output for NaN/Inf; a
// non-finite value raises immediately, naming the op that produced it.

struct TensorNode {
    std::vector<size_t> shape;
    std::vector<double> value;
    std::vector<double> grad; // empty until first needed
    bool requires_grad{false};
    std::string op; // empty for leaves
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backprop;

    size_t size() const { return value.size(); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

    static Tensor zeros(std::vector<size_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<size_t> shape, double v, bool requires_grad = false);
    static Tensor from_data(std::vector<size_t> shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor randn(std::vector<size_t> shape, Rng& rng, double stddev = 1.0,
                        bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<size_t>& shape() const { return node_->shape; }
    size_t ndim() const { return node_->shape.size(); }
    size_t size() const { return node_->value.size(); }
    size_t rows() const;
    size_t cols() const;

    std::vector<double>& data() { return node_->value; }
    const std::vector<double>& data() const { return node_->value; }
    double at(size_t i) const { return node_->value[i]; }

    // Scalar access; throws unless the tensor holds exactly one element.
    double value() const;

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    std::vector<double>& grad();
    const std::vector<double>& grad() const;
    void zero_grad();

    Tensor clone() const; // deep copy, detached from the graph

    std::shared_ptr<TensorNode> node() const { return node_; }

private:
    std::shared_ptr<TensorNode> node_;
};

// ---- graph -----------------------------------------------------------

// Reverse-mode accumulation from a scalar loss. Grads add up across
// calls; callers reset with zero_grad / zero_grads between steps.
void backward(const Tensor& loss);

// Allocate-and-zero the grad buffer of every tensor in the list.
void zero_grads(const std::vector<Tensor>& params);

// ---- elementwise and linear algebra ----------------------------------

Tensor add(const Tensor& a, const Tensor& b);      // same shape
Tensor sub(const Tensor& a, const Tensor& b);      // same shape
Tensor mul(const Tensor& a, const Tensor& b);      // Hadamard, same shape
Tensor add_bias_cols(const Tensor& x, const Tensor& v); // x [R,C] + v[C] per row
Tensor add_bias_rows(const Tensor& x, const Tensor& v); // x [R,C] + v[R] per column
Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);
Tensor neg(const Tensor& x);
Tensor matmul(const Tensor& a, const Tensor& b);   // [m,k]x[k,n] -> [m,n]
Tensor transpose(const Tensor& x);                 // 2-D

// ---- convolution and resampling (channels-first [C, T]) ---------------

// No implicit padding; pad explicitly. T_out = (T - K)/stride + 1.
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, size_t stride);
Tensor pad_replicate1d(const Tensor& x, size_t left, size_t right);
Tensor upsample_repeat1d(const Tensor& x, size_t factor);
Tensor mean_pool1d(const Tensor& x, size_t window); // trailing remainder dropped

// ---- nonlinearities and normalization ---------------------------------

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x); // exact erf form
// Normalizes the last axis (each row of a 2-D tensor). gamma/beta sized
// to that axis.
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 double eps = 1e-5);
Tensor softmax_rows(const Tensor& x); // max-subtracted, last axis

// ---- reductions and losses --------------------------------------------

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_squares(const Tensor& x);
Tensor l1_loss(const Tensor& a, const Tensor& b);  // mean |a-b|
Tensor mse_loss(const Tensor& a, const Tensor& b); // mean (a-b)^2
// Mean negative log-likelihood of integer targets under row-wise
// softmax of logits [N, V].
Tensor cross_entropy(const Tensor& logits, const std::vector<size_t>& targets);

// ---- shape and indexing -----------------------------------------------

Tensor reshape(const Tensor& x, std::vector<size_t> shape);
Tensor concat_rows(const std::vector<Tensor>& parts); // along axis 0
Tensor concat_cols(const std::vector<Tensor>& parts); // along axis 1
Tensor slice_rows(const Tensor& x, size_t start, size_t n);
Tensor slice_cols(const Tensor& x, size_t start, size_t n);
Tensor embed_rows(const Tensor& table, const std::vector<size_t>& ids);
// Merge non-overlapping 2x2 neighborhoods of an H x W grid of D-vectors
// (rows of x in row-major grid order) into (H/2)(W/2) rows of width 4D.
Tensor merge_2x2(const Tensor& x, size_t grid_h, size_t grid_w);

// Constant copy cut off from the graph (stop-gradient).
Tensor detach(const Tensor& x);

// Value replacement with an identity-Jacobian backward contract: the
// forward result carries `values`, the backward pass hands the incoming
// gradient to x unchanged. This is the quantization straight-through
// hook.
Tensor straight_through(const Tensor& x, std::vector<double> values);

std::string shape_str(const std::vector<size_t>& shape);

} // namespace omni
