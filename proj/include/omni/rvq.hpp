#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "omni/rng.hpp"
#include "omni/tensor.hpp"

namespace omni {

struct RvqConfig {
    size_t layers = 8;
    size_t entries = 64; // K per codebook
    size_t dim = 64;     // shared vector dimension
    double ema_decay = 0.99;
    double commitment_weight = 0.25;
    // ema_update calls an entry may go unused before it is re-seeded
    // from a live residual.
    size_t restart_after = 50;
};

// One frame's code path through the stack, one index per layer.
struct CodeFrame {
    std::vector<uint16_t> codes;

    bool operator==(const CodeFrame&) const = default;
};

struct QuantizeResult {
    CodeFrame frame;
    std::vector<double> quantized;      // sum of chosen entries
    std::vector<double> residual_norms; // after each layer's subtraction
};

// Stack of residual codebooks. Entry 0 of every layer is pinned to the
// zero vector and never trained, which makes per-layer residual norms
// non-increasing for every input: the zero code is always admissible
// and greedy nearest-neighbor can only do better.
//
// quantize/dequantize are const and safe to call concurrently;
// ema_update mutates the stack and needs exclusive access.
class RvqStack {
public:
    RvqStack(const RvqConfig& cfg, Rng& rng);

    const RvqConfig& config() const { return cfg_; }

    // Greedy residual quantization, ties broken toward the lowest index.
    QuantizeResult quantize(const std::vector<double>& x) const;
    std::vector<double> dequantize(const CodeFrame& cf) const;

    // Row-wise forms over [T, D] matrices.
    std::vector<CodeFrame> encode_rows(const Tensor& x) const;
    Tensor decode_rows(const std::vector<CodeFrame>& frames) const;

    // Quantized forward value with an identity Jacobian back to x, so
    // encoder gradients skip the discrete step. The commitment penalty
    // is reported separately and scaled by the caller.
    Tensor quantize_st(const Tensor& x) const;
    Tensor commitment_loss(const Tensor& x) const; // mean squared gap to the frozen quantization

    // EMA codebook update with snapshot assignment: all residual paths
    // are computed against the pre-call stack, then counts, sums, and
    // vectors move. Entries (other than the pinned zero) that stay
    // unused for restart_after consecutive calls are re-seeded from a
    // random residual of the current batch.
    void ema_update(const std::vector<std::vector<double>>& batch, double decay);
    void ema_update(const Tensor& batch, double decay);

    struct LayerUsage {
        double entropy = 0.0;    // nats
        double perplexity = 1.0; // exp(entropy)
    };
    std::vector<LayerUsage> usage_stats(const std::vector<CodeFrame>& history) const;

    std::vector<std::pair<std::string, Tensor>> named_tensors() const; // "rvq.layer{i}.vectors"
    void load_tensors(const std::vector<std::pair<std::string, Tensor>>& named);

    const std::vector<double>& layer_vectors(size_t layer) const { return vectors_[layer]; }
    double entry(size_t layer, size_t k, size_t d) const {
        return vectors_[layer][k * cfg_.dim + d];
    }
    void set_entry_for_test(size_t layer, size_t k, const std::vector<double>& v);

private:
    size_t nearest(size_t layer, const std::vector<double>& r) const;

    RvqConfig cfg_;
    Rng rng_;
    std::vector<std::vector<double>> vectors_;   // per layer [K*D]
    std::vector<std::vector<double>> ema_counts_; // per layer [K]
    std::vector<std::vector<double>> ema_sums_;   // per layer [K*D]
    std::vector<std::vector<uint32_t>> unused_streak_;
};

} // namespace omni
