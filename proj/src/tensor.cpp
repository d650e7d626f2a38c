#include "omni/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace omni {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

size_t shape_numel(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t d : shape) n *= d;
    return n;
}

[[noreturn]] void fail(const std::string& op, const std::string& what) {
    throw std::invalid_argument(op + ": " + what);
}

void check_same_shape(const std::string& op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        fail(op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

std::shared_ptr<TensorNode> make_leaf(std::vector<size_t> shape, std::vector<double> data,
                                      bool requires_grad) {
    if (shape_numel(shape) != data.size())
        fail("tensor", "shape " + shape_str(shape) + " does not match data length " +
                           std::to_string(data.size()));
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return n;
}

// Finished-op check: catches the first non-finite value at the op that
// produced it, which is the NaN diagnostic the trainers rely on.
void check_finite(const TensorNode& n) {
    for (size_t i = 0; i < n.value.size(); ++i) {
        if (!std::isfinite(n.value[i]))
            throw std::runtime_error(n.op + ": non-finite output at flat index " +
                                     std::to_string(i));
    }
}

Tensor make_op(std::string op, std::vector<size_t> shape,
               std::vector<std::shared_ptr<TensorNode>> parents,
               std::function<std::vector<double>()> forward,
               std::function<void(TensorNode&)> backprop) {
    auto n = std::make_shared<TensorNode>();
    n->op = std::move(op);
    n->shape = std::move(shape);
    n->parents = std::move(parents);
    for (const auto& p : n->parents)
        if (p->requires_grad) n->requires_grad = true;
    n->value = forward();
    if (n->value.size() != shape_numel(n->shape))
        throw std::logic_error(n->op + ": forward produced wrong element count");
    check_finite(*n);
    if (n->requires_grad) n->backprop = std::move(backprop);
    return Tensor(n);
}

// Gradient accumulation guarded by requires_grad so constants never
// allocate buffers.
void accum(TensorNode& parent, size_t idx, double v) {
    if (!parent.requires_grad) return;
    parent.ensure_grad();
    parent.grad[idx] += v;
}

bool wants_grad(const TensorNode& parent) { return parent.requires_grad; }

} // namespace

std::string shape_str(const std::vector<size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

// ---- Tensor ----------------------------------------------------------

Tensor Tensor::zeros(std::vector<size_t> shape, bool requires_grad) {
    size_t n = shape_numel(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(std::vector<size_t> shape, double v, bool requires_grad) {
    size_t n = shape_numel(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<double>(n, v), requires_grad));
}

Tensor Tensor::from_data(std::vector<size_t> shape, std::vector<double> data,
                         bool requires_grad) {
    return Tensor(make_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return Tensor(make_leaf({1}, {v}, requires_grad));
}

Tensor Tensor::randn(std::vector<size_t> shape, Rng& rng, double stddev, bool requires_grad) {
    size_t n = shape_numel(shape);
    std::vector<double> d(n);
    for (double& x : d) x = rng.normal() * stddev;
    return Tensor(make_leaf(std::move(shape), std::move(d), requires_grad));
}

size_t Tensor::rows() const {
    if (ndim() != 2) fail("rows", "tensor is not 2-D: " + shape_str(shape()));
    return node_->shape[0];
}

size_t Tensor::cols() const {
    if (ndim() != 2) fail("cols", "tensor is not 2-D: " + shape_str(shape()));
    return node_->shape[1];
}

double Tensor::value() const {
    if (size() != 1) fail("value", "tensor " + shape_str(shape()) + " is not scalar");
    return node_->value[0];
}

std::vector<double>& Tensor::grad() {
    node_->ensure_grad();
    return node_->grad;
}

const std::vector<double>& Tensor::grad() const {
    node_->ensure_grad();
    return node_->grad;
}

void Tensor::zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

Tensor Tensor::clone() const {
    return Tensor(make_leaf(node_->shape, node_->value, node_->requires_grad));
}

// ---- graph -----------------------------------------------------------

void backward(const Tensor& loss) {
    if (loss.size() != 1)
        fail("backward", "loss must be scalar, got " + shape_str(loss.shape()));
    auto root = loss.node();
    if (!root->requires_grad) return;

    // Iterative post-order DFS; parent order is fixed, so the visit
    // order (and therefore float accumulation order) is deterministic.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorNode* p = node->parents[next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // Interior op-node grads are scratch for this pass; leaf grads keep
    // accumulating across passes until the caller resets them.
    for (TensorNode* n : order)
        if (n->backprop) n->grad.assign(n->value.size(), 0.0);

    root->ensure_grad();
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backprop) {
            n->ensure_grad();
            n->backprop(*n);
        }
    }
}

void zero_grads(const std::vector<Tensor>& params) {
    for (const auto& p : params) p.node()->grad.assign(p.size(), 0.0);
}

// ---- elementwise ------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape("add", a, b);
    auto an = a.node(), bn = b.node();
    return make_op(
        "add", a.shape(), {an, bn},
        [an, bn] {
            std::vector<double> out(an->value.size());
            for (size_t i = 0; i < out.size(); ++i) out[i] = an->value[i] + bn->value[i];
            return out;
        },
        [](TensorNode& n) {
            auto& pa = *n.parents[0];
            auto& pb = *n.parents[1];
            for (size_t i = 0; i < n.grad.size(); ++i) {
                accum(pa, i, n.grad[i]);
                accum(pb, i, n.grad[i]);
            }
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape("sub", a, b);
    auto an = a.node(), bn = b.node();
    return make_op(
        "sub", a.shape(), {an, bn},
        [an, bn] {
            std::vector<double> out(an->value.size());
            for (size_t i = 0; i < out.size(); ++i) out[i] = an->value[i] - bn->value[i];
            return out;
        },
        [](TensorNode& n) {
            auto& pa = *n.parents[0];
            auto& pb = *n.parents[1];
            for (size_t i = 0; i < n.grad.size(); ++i) {
                accum(pa, i, n.grad[i]);
                accum(pb, i, -n.grad[i]);
            }
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape("mul", a, b);
    auto an = a.node(), bn = b.node();
    return make_op(
        "mul", a.shape(), {an, bn},
        [an, bn] {
            std::vector<double> out(an->value.size());
            for (size_t i = 0; i < out.size(); ++i) out[i] = an->value[i] * bn->value[i];
            return out;
        },
        [](TensorNode& n) {
            auto& pa = *n.parents[0];
            auto& pb = *n.parents[1];
            for (size_t i = 0; i < n.grad.size(); ++i) {
                accum(pa, i, n.grad[i] * pb.value[i]);
                accum(pb, i, n.grad[i] * pa.value[i]);
            }
        });
}

Tensor add_bias_cols(const Tensor& x, const Tensor& v) {
    if (x.ndim() != 2 || v.ndim() != 1 || v.shape()[0] != x.cols())
        fail("add_bias_cols", "expected [R,C] + [C], got " + shape_str(x.shape()) + " + " +
                                  shape_str(v.shape()));
    auto xn = x.node(), vn = v.node();
    size_t R = x.rows(), C = x.cols();
    return make_op(
        "add_bias_cols", x.shape(), {xn, vn},
        [xn, vn, R, C] {
            std::vector<double> out(R * C);
            for (size_t r = 0; r < R; ++r)
                for (size_t c = 0; c < C; ++c) out[r * C + c] = xn->value[r * C + c] + vn->value[c];
            return out;
        },
        [R, C](TensorNode& n) {
            auto& px = *n.parents[0];
            auto& pv = *n.parents[1];
            for (size_t r = 0; r < R; ++r)
                for (size_t c = 0; c < C; ++c) {
                    accum(px, r * C + c, n.grad[r * C + c]);
                    accum(pv, c, n.grad[r * C + c]);
                }
        });
}

Tensor add_bias_rows(const Tensor& x, const Tensor& v) {
    if (x.ndim() != 2 || v.ndim() != 1 || v.shape()[0] != x.rows())
        fail("add_bias_rows", "expected [R,C] + [R], got " + shape_str(x.shape()) + " + " +
                                  shape_str(v.shape()));
    auto xn = x.node(), vn = v.node();
    size_t R = x.rows(), C = x.cols();
    return make_op(
        "add_bias_rows", x.shape(), {xn, vn},
        [xn, vn, R, C] {
            std::vector<double> out(R * C);
            for (size_t r = 0; r < R; ++r)
                for (size_t c = 0; c < C; ++c) out[r * C + c] = xn->value[r * C + c] + vn->value[r];
            return out;
        },
        [R, C](TensorNode& n) {
            auto& px = *n.parents[0];
            auto& pv = *n.parents[1];
            for (size_t r = 0; r < R; ++r)
                for (size_t c = 0; c < C; ++c) {
                    accum(px, r * C + c, n.grad[r * C + c]);
                    accum(pv, r, n.grad[r * C + c]);
                }
        });
}

Tensor scale(const Tensor& x, double c) {
    auto xn = x.node();
    return make_op(
        "scale", x.shape(), {xn},
        [xn, c] {
            std::vector<double> out(xn->value.size());
            for (size_t i = 0; i < out.size(); ++i) out[i] = xn->value[i] * c;
            return out;
        },
        [c](TensorNode& n) {
            auto& p = *n.parents[0];
            for (size_t i = 0; i < n.grad.size(); ++i) accum(p, i, n.grad[i] * c);
        });
}

Tensor add_scalar(const Tensor& x, double c) {
    auto xn = x.node();
    return make_op(
        "add_scalar", x.shape(), {xn},
        [xn, c] {
            std::vector<double> out(xn->value.size());
            for (size_t i = 0; i < out.size(); ++i) out[i] = xn->value[i] + c;
            return out;
        },
        [](TensorNode& n) {
            auto& p = *n.parents[0];
            for (size_t i = 0; i < n.grad.size(); ++i) accum(p, i, n.grad[i]);
        });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows())
        fail("matmul", "incompatible shapes " + shape_str(a.shape()) + " x " +
                           shape_str(b.shape()));
    auto an = a.node(), bn = b.node();
    size_t M = a.rows(), K = a.cols(), N = b.cols();
    return make_op(
        "matmul", {M, N}, {an, bn},
        [an, bn, M, K, N] {
            std::vector<double> out(M * N, 0.0);
            for (size_t m = 0; m < M; ++m)
                for (size_t k = 0; k < K; ++k) {
                    double av = an->value[m * K + k];
                    if (av == 0.0) continue;
                    const double* brow = &bn->value[k * N];
                    double* orow = &out[m * N];
                    for (size_t n2 = 0; n2 < N; ++n2) orow[n2] += av * brow[n2];
                }
            return out;
        },
        [M, K, N](TensorNode& n) {
            auto& pa = *n.parents[0];
            auto& pb = *n.parents[1];
            if (wants_grad(pa)) {
                pa.ensure_grad();
                // dA = dC . B^T
                for (size_t m = 0; m < M; ++m)
                    for (size_t k = 0; k < K; ++k) {
                        double s = 0.0;
                        const double* grow = &n.grad[m * N];
                        const double* brow = &pb.value[k * N];
                        for (size_t n2 = 0; n2 < N; ++n2) s += grow[n2] * brow[n2];
                        pa.grad[m * K + k] += s;
                    }
            }
            if (wants_grad(pb)) {
                pb.ensure_grad();
                // dB = A^T . dC
                for (size_t k = 0; k < K; ++k)
                    for (size_t m = 0; m < M; ++m) {
                        double av = pa.value[m * K + k];
                        if (av == 0.0) continue;
                        const double* grow = &n.grad[m * N];
                        double* brow = &pb.grad[k * N];
                        for (size_t n2 = 0; n2 < N; ++n2) brow[n2] += av * grow[n2];
                    }
            }
        });
}

Tensor transpose(const Tensor& x) {
    if (x.ndim() != 2) fail("transpose", "expected 2-D, got " + shape_str(x.shape()));
    auto xn = x.node();
    size_t R = x.rows(), C = x.cols();
    return make_op(
        "transpose", {C, R}, {xn},
        [xn, R, C] {
            std::vector<double> out(R * C);
            for (size_t r = 0; r < R; ++r)
                for (size_t c = 0; c < C; ++c) out[c * R + r] = xn->value[r * C + c];
            return out;
        },
        [R, C](TensorNode& n) {
            auto& p = *n.parents[0];
            for (size_t r = 0; r < R; ++r)
                for (size_t c = 0; c < C; ++c) accum(p, r * C + c, n.grad[c * R + r]);
        });
}

// ---- convolution ------------------------------------------------------

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, size_t stride) {
    if (x.ndim() != 2 || w.ndim() != 3)
        fail("conv1d", "expected x [Cin,T], w [Cout,Cin,K]; got " + shape_str(x.shape()) +
                           ", " + shape_str(w.shape()));
    size_t Cin = x.shape()[0], T = x.shape()[1];
    size_t Cout = w.shape()[0], K = w.shape()[2];
    if (w.shape()[1] != Cin)
        fail("conv1d", "weight expects " + std::to_string(w.shape()[1]) +
                           " input channels, input has " + std::to_string(Cin));
    if (b.ndim() != 1 || b.shape()[0] != Cout)
        fail("conv1d", "bias shape " + shape_str(b.shape()) + " does not match Cout " +
                           std::to_string(Cout));
    if (stride == 0) fail("conv1d", "stride must be >= 1");
    if (T < K)
        fail("conv1d", "input length " + std::to_string(T) + " shorter than kernel " +
                           std::to_string(K));
    size_t Tout = (T - K) / stride + 1;
    auto xn = x.node(), wn = w.node(), bn = b.node();
    return make_op(
        "conv1d", {Cout, Tout}, {xn, wn, bn},
        [=] {
            std::vector<double> out(Cout * Tout);
            for (size_t o = 0; o < Cout; ++o)
                for (size_t t = 0; t < Tout; ++t) {
                    double s = bn->value[o];
                    size_t base = t * stride;
                    for (size_t c = 0; c < Cin; ++c) {
                        const double* xr = &xn->value[c * T + base];
                        const double* wr = &wn->value[(o * Cin + c) * K];
                        for (size_t k = 0; k < K; ++k) s += wr[k] * xr[k];
                    }
                    out[o * Tout + t] = s;
                }
            return out;
        },
        [Cin, T, Cout, K, Tout, stride](TensorNode& n) {
            auto& px = *n.parents[0];
            auto& pw = *n.parents[1];
            auto& pb = *n.parents[2];
            bool gx = wants_grad(px), gw = wants_grad(pw), gb = wants_grad(pb);
            if (gx) px.ensure_grad();
            if (gw) pw.ensure_grad();
            if (gb) pb.ensure_grad();
            for (size_t o = 0; o < Cout; ++o)
                for (size_t t = 0; t < Tout; ++t) {
                    double g = n.grad[o * Tout + t];
                    if (g == 0.0) continue;
                    if (gb) pb.grad[o] += g;
                    size_t base = t * stride;
                    for (size_t c = 0; c < Cin; ++c) {
                        const double* xr = &px.value[c * T + base];
                        const double* wr = &pw.value[(o * Cin + c) * K];
                        for (size_t k = 0; k < K; ++k) {
                            if (gx) px.grad[c * T + base + k] += g * wr[k];
                            if (gw) pw.grad[(o * Cin + c) * K + k] += g * xr[k];
                        }
                    }
                }
        });
}

Tensor pad_replicate1d(const Tensor& x, size_t left, size_t right) {
    if (x.ndim() != 2) fail("pad_replicate1d", "expected [C,T], got " + shape_str(x.shape()));
    size_t C = x.shape()[0], T = x.shape()[1];
    if (T == 0) fail("pad_replicate1d", "empty time axis");
    size_t Tout = T + left + right;
    auto xn = x.node();
    return make_op(
        "pad_replicate1d", {C, Tout}, {xn},
        [xn, C, T, left, Tout] {
            std::vector<double> out(C * Tout);
            for (size_t c = 0; c < C; ++c)
                for (size_t t = 0; t < Tout; ++t) {
                    size_t src = t < left ? 0 : std::min(t - left, T - 1);
                    out[c * Tout + t] = xn->value[c * T + src];
                }
            return out;
        },
        [C, T, left, Tout](TensorNode& n) {
            auto& p = *n.parents[0];
            for (size_t c = 0; c < C; ++c)
                for (size_t t = 0; t < Tout; ++t) {
                    size_t src = t < left ? 0 : std::min(t - left, T - 1);
                    accum(p, c * T + src, n.grad[c * Tout + t]);
                }
        });
}

Tensor upsample_repeat1d(const Tensor& x, size_t factor) {
    if (x.ndim() != 2) fail("upsample_repeat1d", "expected [C,T], got " + shape_str(x.shape()));
    if (factor == 0) fail("upsample_repeat1d", "factor must be >= 1");
    size_t C = x.shape()[0], T = x.shape()[1], Tout = T * factor;
    auto xn = x.node();
    return make_op(
        "upsample_repeat1d", {C, Tout}, {xn},
        [xn, C, T, factor, Tout] {
            std::vector<double> out(C * Tout);
            for (size_t c = 0; c < C; ++c)
                for (size_t t = 0; t < Tout; ++t) out[c * Tout + t] = xn->value[c * T + t / factor];
            return out;
        },
        [C, T, factor, Tout](TensorNode& n) {
            auto& p = *n.parents[0];
            for (size_t c = 0; c < C; ++c)
                for (size_t t = 0; t < Tout; ++t) accum(p, c * T + t / factor, n.grad[c * Tout + t]);
        });
}

Tensor mean_pool1d(const Tensor& x, size_t window) {
    if (x.ndim() != 2) fail("mean_pool1d", "expected [C,T], got " + shape_str(x.shape()));
    if (window == 0) fail("mean_pool1d", "window must be >= 1");
    size_t C = x.shape()[0], T = x.shape()[1], Tout = T / window;
    if (Tout == 0) fail("mean_pool1d", "time axis shorter than window");
    auto xn = x.node();
    double inv = 1.0 / static_cast<double>(window);
    return make_op(
        "mean_pool1d", {C, Tout}, {xn},
        [xn, C, T, window, Tout, inv] {
            std::vector<double> out(C * Tout);
            for (size_t c = 0; c < C; ++c)
                for (size_t t = 0; t < Tout; ++t) {
                    double s = 0.0;
                    for (size_t k = 0; k < window; ++k) s += xn->value[c * T + t * window + k];
                    out[c * Tout + t] = s * inv;
                }
            return out;
        },
        [C, T, window, Tout, inv](TensorNode& n) {
            auto& p = *n.parents[0];
            for (size_t c = 0; c < C; ++c)
                for (size_t t = 0; t < Tout; ++t) {
                    double g = n.grad[c * Tout + t] * inv;
                    for (size_t k = 0; k < window; ++k) accum(p, c * T + t * window + k, g);
                }
        });
}

// ---- nonlinearities ----------------------------------------------------

Tensor relu(const Tensor& x) {
    auto xn = x.node();
    return make_op(
        "relu", x.shape(), {xn},
        [xn] {
            std::vector<double> out(xn->value.size());
            for (size_t i = 0; i < out.size(); ++i) out[i] = xn->value[i] > 0.0 ? xn->value[i] : 0.0;
            return out;
        },
        [](TensorNode& n) {
            auto& p = *n.parents[0];
            for (size_t i = 0; i < n.grad.size(); ++i)
                if (p.value[i] > 0.0) accum(p, i, n.grad[i]);
        });
}

Tensor gelu(const Tensor& x) {
    auto xn = x.node();
    return make_op(
        "gelu", x.shape(), {xn},
        [xn] {
            std::vector<double> out(xn->value.size());
            for (size_t i = 0; i < out.size(); ++i) {
                double v = xn->value[i];
                out[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
            }
            return out;
        },
        [](TensorNode& n) {
            auto& p = *n.parents[0];
            for (size_t i = 0; i < n.grad.size(); ++i) {
                double v = p.value[i];
                double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                accum(p, i, n.grad[i] * (cdf + v * pdf));
            }
        });
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    size_t D = x.ndim() == 2 ? x.cols() : x.shape().back();
    if (x.ndim() > 2) fail("layernorm", "expected 1-D or 2-D, got " + shape_str(x.shape()));
    if (gamma.ndim() != 1 || gamma.shape()[0] != D || beta.ndim() != 1 || beta.shape()[0] != D)
        fail("layernorm", "gamma/beta must be [" + std::to_string(D) + "], got " +
                              shape_str(gamma.shape()) + ", " + shape_str(beta.shape()));
    size_t R = x.ndim() == 2 ? x.rows() : 1;
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    // Normalized rows are cached on a side buffer for the backward pass.
    auto norm = std::make_shared<std::vector<double>>();
    auto istd = std::make_shared<std::vector<double>>();
    return make_op(
        "layernorm", x.shape(), {xn, gn, bn},
        [xn, gn, bn, R, D, eps, norm, istd] {
            std::vector<double> out(R * D);
            norm->resize(R * D);
            istd->resize(R);
            for (size_t r = 0; r < R; ++r) {
                const double* row = &xn->value[r * D];
                double mu = 0.0;
                for (size_t d = 0; d < D; ++d) mu += row[d];
                mu /= static_cast<double>(D);
                double var = 0.0;
                for (size_t d = 0; d < D; ++d) {
                    double dv = row[d] - mu;
                    var += dv * dv;
                }
                var /= static_cast<double>(D);
                double is = 1.0 / std::sqrt(var + eps);
                (*istd)[r] = is;
                for (size_t d = 0; d < D; ++d) {
                    double y = (row[d] - mu) * is;
                    (*norm)[r * D + d] = y;
                    out[r * D + d] = y * gn->value[d] + bn->value[d];
                }
            }
            return out;
        },
        [R, D, norm, istd](TensorNode& n) {
            auto& px = *n.parents[0];
            auto& pg = *n.parents[1];
            auto& pb = *n.parents[2];
            for (size_t r = 0; r < R; ++r) {
                const double* g = &n.grad[r * D];
                const double* y = &(*norm)[r * D];
                double mean_dy = 0.0, mean_dyy = 0.0;
                for (size_t d = 0; d < D; ++d) {
                    double dy = g[d] * pg.value[d];
                    mean_dy += dy;
                    mean_dyy += dy * y[d];
                }
                mean_dy /= static_cast<double>(D);
                mean_dyy /= static_cast<double>(D);
                for (size_t d = 0; d < D; ++d) {
                    double dy = g[d] * pg.value[d];
                    accum(px, r * D + d, (*istd)[r] * (dy - mean_dy - y[d] * mean_dyy));
                    accum(pg, d, g[d] * y[d]);
                    accum(pb, d, g[d]);
                }
            }
        });
}

Tensor softmax_rows(const Tensor& x) {
    if (x.ndim() > 2) fail("softmax_rows", "expected 1-D or 2-D, got " + shape_str(x.shape()));
    size_t R = x.ndim() == 2 ? x.rows() : 1;
    size_t D = x.ndim() == 2 ? x.cols() : x.shape()[0];
    auto xn = x.node();
    return make_op(
        "softmax_rows", x.shape(), {xn},
        [xn, R, D] {
            std::vector<double> out(R * D);
            for (size_t r = 0; r < R; ++r) {
                const double* row = &xn->value[r * D];
                double mx = row[0];
                for (size_t d = 1; d < D; ++d) mx = std::max(mx, row[d]);
                double z = 0.0;
                for (size_t d = 0; d < D; ++d) {
                    out[r * D + d] = std::exp(row[d] - mx);
                    z += out[r * D + d];
                }
                for (size_t d = 0; d < D; ++d) out[r * D + d] /= z;
            }
            return out;
        },
        [R, D](TensorNode& n) {
            auto& p = *n.parents[0];
            for (size_t r = 0; r < R; ++r) {
                const double* y = &n.value[r * D];
                const double* g = &n.grad[r * D];
                double dot = 0.0;
                for (size_t d = 0; d < D; ++d) dot += g[d] * y[d];
                for (size_t d = 0; d < D; ++d) accum(p, r * D + d, y[d] * (g[d] - dot));
            }
        });
}

// ---- reductions --------------------------------------------------------

Tensor sum(const Tensor& x) {
    auto xn = x.node();
    return make_op(
        "sum", {1}, {xn},
        [xn] {
            double s = 0.0;
            for (double v : xn->value) s += v;
            return std::vector<double>{s};
        },
        [](TensorNode& n) {
            auto& p = *n.parents[0];
            for (size_t i = 0; i < p.value.size(); ++i) accum(p, i, n.grad[0]);
        });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor sum_squares(const Tensor& x) {
    auto xn = x.node();
    return make_op(
        "sum_squares", {1}, {xn},
        [xn] {
            double s = 0.0;
            for (double v : xn->value) s += v * v;
            return std::vector<double>{s};
        },
        [](TensorNode& n) {
            auto& p = *n.parents[0];
            for (size_t i = 0; i < p.value.size(); ++i) accum(p, i, 2.0 * p.value[i] * n.grad[0]);
        });
}

Tensor l1_loss(const Tensor& a, const Tensor& b) {
    check_same_shape("l1_loss", a, b);
    auto an = a.node(), bn = b.node();
    double inv = 1.0 / static_cast<double>(a.size());
    return make_op(
        "l1_loss", {1}, {an, bn},
        [an, bn, inv] {
            double s = 0.0;
            for (size_t i = 0; i < an->value.size(); ++i)
                s += std::abs(an->value[i] - bn->value[i]);
            return std::vector<double>{s * inv};
        },
        [inv](TensorNode& n) {
            auto& pa = *n.parents[0];
            auto& pb = *n.parents[1];
            for (size_t i = 0; i < pa.value.size(); ++i) {
                double d = pa.value[i] - pb.value[i];
                double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                accum(pa, i, n.grad[0] * s * inv);
                accum(pb, i, -n.grad[0] * s * inv);
            }
        });
}

Tensor mse_loss(const Tensor& a, const Tensor& b) {
    check_same_shape("mse_loss", a, b);
    auto an = a.node(), bn = b.node();
    double inv = 1.0 / static_cast<double>(a.size());
    return make_op(
        "mse_loss", {1}, {an, bn},
        [an, bn, inv] {
            double s = 0.0;
            for (size_t i = 0; i < an->value.size(); ++i) {
                double d = an->value[i] - bn->value[i];
                s += d * d;
            }
            return std::vector<double>{s * inv};
        },
        [inv](TensorNode& n) {
            auto& pa = *n.parents[0];
            auto& pb = *n.parents[1];
            for (size_t i = 0; i < pa.value.size(); ++i) {
                double d = pa.value[i] - pb.value[i];
                accum(pa, i, 2.0 * d * inv * n.grad[0]);
                accum(pb, i, -2.0 * d * inv * n.grad[0]);
            }
        });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<size_t>& targets) {
    if (logits.ndim() != 2) fail("cross_entropy", "logits must be [N,V], got " + shape_str(logits.shape()));
    size_t N = logits.rows(), V = logits.cols();
    if (targets.size() != N)
        fail("cross_entropy", std::to_string(targets.size()) + " targets for " +
                                  std::to_string(N) + " rows");
    for (size_t t : targets)
        if (t >= V) fail("cross_entropy", "target id " + std::to_string(t) + " >= vocab " + std::to_string(V));
    auto ln = logits.node();
    // Softmax probabilities cached for the backward pass.
    auto probs = std::make_shared<std::vector<double>>();
    return make_op(
        "cross_entropy", {1}, {ln},
        [ln, targets, N, V, probs] {
            probs->resize(N * V);
            double loss = 0.0;
            for (size_t r = 0; r < N; ++r) {
                const double* row = &ln->value[r * V];
                double mx = row[0];
                for (size_t v = 1; v < V; ++v) mx = std::max(mx, row[v]);
                double z = 0.0;
                for (size_t v = 0; v < V; ++v) {
                    (*probs)[r * V + v] = std::exp(row[v] - mx);
                    z += (*probs)[r * V + v];
                }
                for (size_t v = 0; v < V; ++v) (*probs)[r * V + v] /= z;
                loss -= std::log(std::max((*probs)[r * V + targets[r]], 1e-300));
            }
            return std::vector<double>{loss / static_cast<double>(N)};
        },
        [targets, N, V, probs](TensorNode& n) {
            auto& p = *n.parents[0];
            double inv = n.grad[0] / static_cast<double>(N);
            for (size_t r = 0; r < N; ++r)
                for (size_t v = 0; v < V; ++v) {
                    double g = (*probs)[r * V + v] - (targets[r] == v ? 1.0 : 0.0);
                    accum(p, r * V + v, g * inv);
                }
        });
}

// ---- shape and indexing ------------------------------------------------

Tensor reshape(const Tensor& x, std::vector<size_t> shape) {
    if (shape_numel(shape) != x.size())
        fail("reshape", "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    auto xn = x.node();
    return make_op(
        "reshape", std::move(shape), {xn}, [xn] { return xn->value; },
        [](TensorNode& n) {
            auto& p = *n.parents[0];
            for (size_t i = 0; i < n.grad.size(); ++i) accum(p, i, n.grad[i]);
        });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) fail("concat_rows", "empty part list");
    size_t C = parts[0].cols(), R = 0;
    std::vector<std::shared_ptr<TensorNode>> ps;
    for (const auto& p : parts) {
        if (p.ndim() != 2 || p.cols() != C)
            fail("concat_rows", "column mismatch: " + shape_str(p.shape()) + " vs width " +
                                    std::to_string(C));
        R += p.rows();
        ps.push_back(p.node());
    }
    return make_op(
        "concat_rows", {R, C}, ps,
        [ps, R, C] {
            std::vector<double> out;
            out.reserve(R * C);
            for (const auto& p : ps) out.insert(out.end(), p->value.begin(), p->value.end());
            return out;
        },
        [](TensorNode& n) {
            size_t off = 0;
            for (auto& pp : n.parents) {
                for (size_t i = 0; i < pp->value.size(); ++i) accum(*pp, i, n.grad[off + i]);
                off += pp->value.size();
            }
        });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) fail("concat_cols", "empty part list");
    size_t R = parts[0].rows(), C = 0;
    std::vector<std::shared_ptr<TensorNode>> ps;
    std::vector<size_t> widths;
    for (const auto& p : parts) {
        if (p.ndim() != 2 || p.rows() != R)
            fail("concat_cols", "row mismatch: " + shape_str(p.shape()) + " vs height " +
                                    std::to_string(R));
        C += p.cols();
        widths.push_back(p.cols());
        ps.push_back(p.node());
    }
    return make_op(
        "concat_cols", {R, C}, ps,
        [ps, widths, R, C] {
            std::vector<double> out(R * C);
            size_t off = 0;
            for (size_t i = 0; i < ps.size(); ++i) {
                size_t w = widths[i];
                for (size_t r = 0; r < R; ++r)
                    for (size_t c = 0; c < w; ++c) out[r * C + off + c] = ps[i]->value[r * w + c];
                off += w;
            }
            return out;
        },
        [widths, R, C](TensorNode& n) {
            size_t off = 0;
            for (size_t i = 0; i < n.parents.size(); ++i) {
                size_t w = widths[i];
                auto& p = *n.parents[i];
                for (size_t r = 0; r < R; ++r)
                    for (size_t c = 0; c < w; ++c) accum(p, r * w + c, n.grad[r * C + off + c]);
                off += w;
            }
        });
}

Tensor slice_rows(const Tensor& x, size_t start, size_t n) {
    if (x.ndim() != 2) fail("slice_rows", "expected 2-D, got " + shape_str(x.shape()));
    if (start + n > x.rows())
        fail("slice_rows", "range [" + std::to_string(start) + ", " + std::to_string(start + n) +
                               ") out of " + std::to_string(x.rows()) + " rows");
    size_t C = x.cols();
    auto xn = x.node();
    return make_op(
        "slice_rows", {n, C}, {xn},
        [xn, start, n, C] {
            return std::vector<double>(xn->value.begin() + start * C,
                                       xn->value.begin() + (start + n) * C);
        },
        [start, C](TensorNode& nd) {
            auto& p = *nd.parents[0];
            for (size_t i = 0; i < nd.grad.size(); ++i) accum(p, start * C + i, nd.grad[i]);
        });
}

Tensor slice_cols(const Tensor& x, size_t start, size_t n) {
    if (x.ndim() != 2) fail("slice_cols", "expected 2-D, got " + shape_str(x.shape()));
    if (start + n > x.cols())
        fail("slice_cols", "range [" + std::to_string(start) + ", " + std::to_string(start + n) +
                               ") out of " + std::to_string(x.cols()) + " cols");
    size_t R = x.rows(), C = x.cols();
    auto xn = x.node();
    return make_op(
        "slice_cols", {R, n}, {xn},
        [xn, start, n, R, C] {
            std::vector<double> out(R * n);
            for (size_t r = 0; r < R; ++r)
                for (size_t c = 0; c < n; ++c) out[r * n + c] = xn->value[r * C + start + c];
            return out;
        },
        [start, n, R, C](TensorNode& nd) {
            auto& p = *nd.parents[0];
            for (size_t r = 0; r < R; ++r)
                for (size_t c = 0; c < n; ++c) accum(p, r * C + start + c, nd.grad[r * n + c]);
        });
}

Tensor embed_rows(const Tensor& table, const std::vector<size_t>& ids) {
    if (table.ndim() != 2) fail("embed_rows", "table must be 2-D, got " + shape_str(table.shape()));
    size_t V = table.rows(), D = table.cols();
    for (size_t id : ids)
        if (id >= V) fail("embed_rows", "row id " + std::to_string(id) + " >= table rows " + std::to_string(V));
    auto tn = table.node();
    size_t N = ids.size();
    return make_op(
        "embed_rows", {N, D}, {tn},
        [tn, ids, D, N] {
            std::vector<double> out(N * D);
            for (size_t i = 0; i < N; ++i)
                std::copy_n(&tn->value[ids[i] * D], D, &out[i * D]);
            return out;
        },
        [ids, D](TensorNode& n) {
            auto& p = *n.parents[0];
            for (size_t i = 0; i < ids.size(); ++i)
                for (size_t d = 0; d < D; ++d) accum(p, ids[i] * D + d, n.grad[i * D + d]);
        });
}

Tensor merge_2x2(const Tensor& x, size_t grid_h, size_t grid_w) {
    if (x.ndim() != 2) fail("merge_2x2", "expected [H*W, D], got " + shape_str(x.shape()));
    if (grid_h * grid_w != x.rows())
        fail("merge_2x2", "grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w) +
                              " does not cover " + std::to_string(x.rows()) + " rows");
    if (grid_h % 2 != 0 || grid_w % 2 != 0)
        fail("merge_2x2", "grid dimensions must be even, got " + std::to_string(grid_h) + "x" +
                              std::to_string(grid_w));
    size_t D = x.cols();
    size_t Ho = grid_h / 2, Wo = grid_w / 2;
    auto xn = x.node();
    // Output row (i,j) = rows (2i,2j), (2i,2j+1), (2i+1,2j), (2i+1,2j+1) side by side.
    auto src_of = [grid_w](size_t out_row, size_t quadrant, size_t Wo2) {
        size_t i = out_row / Wo2, j = out_row % Wo2;
        size_t di = quadrant / 2, dj = quadrant % 2;
        return (2 * i + di) * grid_w + (2 * j + dj);
    };
    return make_op(
        "merge_2x2", {Ho * Wo, 4 * D}, {xn},
        [xn, Ho, Wo, D, src_of] {
            std::vector<double> out(Ho * Wo * 4 * D);
            for (size_t r = 0; r < Ho * Wo; ++r)
                for (size_t q = 0; q < 4; ++q)
                    std::copy_n(&xn->value[src_of(r, q, Wo) * D], D, &out[r * 4 * D + q * D]);
            return out;
        },
        [Ho, Wo, D, src_of](TensorNode& n) {
            auto& p = *n.parents[0];
            for (size_t r = 0; r < Ho * Wo; ++r)
                for (size_t q = 0; q < 4; ++q)
                    for (size_t d = 0; d < D; ++d)
                        accum(p, src_of(r, q, Wo) * D + d, n.grad[r * 4 * D + q * D + d]);
        });
}

Tensor detach(const Tensor& x) {
    return Tensor::from_data(x.shape(), x.data(), false);
}

Tensor straight_through(const Tensor& x, std::vector<double> values) {
    if (values.size() != x.size())
        fail("straight_through", "value count " + std::to_string(values.size()) +
                                     " does not match input " + shape_str(x.shape()));
    auto xn = x.node();
    auto vals = std::make_shared<std::vector<double>>(std::move(values));
    return make_op(
        "straight_through", x.shape(), {xn}, [vals] { return *vals; },
        [](TensorNode& n) {
            auto& p = *n.parents[0];
            for (size_t i = 0; i < n.grad.size(); ++i) accum(p, i, n.grad[i]);
        });
}

} // namespace omni
