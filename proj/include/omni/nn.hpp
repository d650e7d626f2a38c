#pragma once

#include <string>
#include <utility>
#include <vector>

#include "omni/rng.hpp"
#include "omni/tensor.hpp"

namespace omni {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Dense layer over row vectors: [T, in] -> [T, out].
struct Linear {
    Tensor w; // [in, out]
    Tensor b; // [out]

    static Linear init(size_t in, size_t out, Rng& rng, double weight_scale,
                       bool trainable = true);
    Tensor forward(const Tensor& x) const;
    void collect(std::vector<Tensor>& out) const;
    void named(const std::string& prefix, NamedTensors& out) const;
};

// Channels-first convolution with symmetric replicate padding applied
// before the kernel. T_out = (T + 2 pad - k) / stride + 1.
struct Conv1d {
    Tensor w; // [Cout, Cin, K]
    Tensor b; // [Cout]
    size_t stride = 1;
    size_t pad = 0;

    static Conv1d init(size_t cin, size_t cout, size_t k, size_t stride, size_t pad, Rng& rng,
                       bool trainable = true);
    Tensor forward(const Tensor& x) const;
    void collect(std::vector<Tensor>& out) const;
    void named(const std::string& prefix, NamedTensors& out) const;
};

// Fixed sin/cos position code, [T, dim], no parameters.
Tensor sinusoidal_pe(size_t len, size_t dim);

struct TransformerConfig {
    size_t dim = 64;
    size_t layers = 2;
    size_t heads = 4;
    bool causal = true;
    bool add_positions = true;  // add sinusoidal_pe inside forward
    double init_scale = 0.02;
};

// Pre-norm residual transformer over row sequences, [T, dim] -> [T, dim].
class Transformer {
public:
    Transformer(const TransformerConfig& cfg, Rng& rng, bool trainable = true);

    Tensor forward(const Tensor& x) const;
    const TransformerConfig& config() const { return cfg_; }

    std::vector<Tensor> params() const;
    void named(const std::string& prefix, NamedTensors& out) const;
    bool any_trainable() const;

private:
    struct Block {
        Tensor ln1_g, ln1_b;
        Linear q, k, v, o;
        Tensor ln2_g, ln2_b;
        Linear fc1, fc2;
    };
    TransformerConfig cfg_;
    std::vector<Block> blocks_;
    Tensor lnf_g_, lnf_b_;
};

// Loads values into an existing parameter set by name; every parameter
// must be present with a matching shape.
void load_named(const NamedTensors& params, const NamedTensors& stored);

} // namespace omni
