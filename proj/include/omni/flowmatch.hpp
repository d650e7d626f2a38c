#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "omni/adam.hpp"
#include "omni/codec.hpp"
#include "omni/nn.hpp"
#include "omni/rng.hpp"
#include "omni/tensor.hpp"

namespace omni {

struct CFMConfig {
    double sigma_min = 1e-4; // noise floor of the probability path
    size_t mid_blocks = 2;   // intermediate residual blocks (reference design uses 12)
    size_t euler_steps = 10;
    size_t mel_bins = 80;
    size_t hidden = 32;   // channel width
    size_t cond_dim = 64; // conditioning track width
    size_t time_dim = 16; // sinusoidal time feature count
    uint64_t seed = 4242;
};

// Straight-line probability path between noise x0 and data x1:
//   x_t = (1 - (1 - sigma_min) t) x0 + t x1
// with the constant target field u = x1 - (1 - sigma_min) x0.
Tensor ot_interpolant(const Tensor& x0, const Tensor& x1, double t, double sigma_min);
Tensor ot_target(const Tensor& x0, const Tensor& x1, double sigma_min);

// Velocity predictor over [mel_bins, T] states: an hourglass of one
// stride-2 down block, mid_blocks residual blocks, and one up block
// with a skip from the pre-down activations. The scalar time modulates
// every stage as a per-channel scale and shift; the conditioning track
// joins at the stem.
class VectorFieldNet {
public:
    VectorFieldNet(const CFMConfig& cfg, Rng& rng);

    // x, output: [mel_bins, T]; cond: [cond_dim, T]; T even.
    Tensor forward(const Tensor& x, double t, const Tensor& cond) const;

    const CFMConfig& config() const { return cfg_; }
    std::vector<Tensor> params() const;
    void named(const std::string& prefix, NamedTensors& out) const;

private:
    Tensor time_features(double t) const;

    CFMConfig cfg_;
    // every stage runs conv, per-position channel norm, time scale and
    // shift, then gelu
    struct Norm {
        Tensor g, b;
    };
    Conv1d stem_;
    Norm norm_stem_;
    Linear time_stem_;
    Conv1d down_;
    Norm norm_down_;
    Linear time_down_;
    struct Mid {
        Conv1d c1, c2;
        Norm norm;
        Linear time;
    };
    std::vector<Mid> mids_;
    Conv1d up_;
    Norm norm_up_;
    Linear time_up_;
    Conv1d head_;
    Linear gate_; // scalar time gate on the state bypass
};

// Deterministic-input form: every stochastic quantity is an argument,
// so gradients can be checked against finite differences.
Tensor cfm_loss_at(const VectorFieldNet& net, const Tensor& x1, const Tensor& cond, double t,
                   const Tensor& x0);
// Training form: draws t ~ U(0,1) and x0 ~ N(0,I) from the rng.
Tensor cfm_loss(const VectorFieldNet& net, const Tensor& x1, const Tensor& cond, Rng& rng);

using FieldFn = std::function<Tensor(const Tensor& x, double t)>;

// Fixed-step Euler integration from x0 over t in [0,1): steps updates
// of size 1/steps at t = k/steps. Exact for constant fields.
Tensor euler_integrate(const FieldFn& field, const Tensor& x0, size_t steps);

// Conditioned sampling path: x0 ~ N(0,I) from the rng, field from the net.
Tensor euler_sample(const VectorFieldNet& net, const Tensor& cond, size_t steps, Rng& rng);

// Token-conditioned Mel refinement head. Conditioning is the codec's
// dequantized latent track, repeated out to the Mel frame rate; the
// sampled normalized Mel is expanded to a waveform with griffin_lim.
class FlowRefiner {
public:
    FlowRefiner(const CFMConfig& cfg);

    const VectorFieldNet& net() const { return net_; }
    CFMConfig config() const { return cfg_; }

    Tensor cond_from_tokens(const AudioCodec& codec, const AudioTokenSeq& seq) const;

    // One Adam step on cfm_loss for target Mel x1 (normalized) under cond.
    double train_step(const Tensor& x1, const Tensor& cond, Rng& rng);

    Waveform refine(const AudioCodec& codec, const AudioTokenSeq& seq, size_t steps,
                    uint64_t sample_seed, size_t griffin_lim_iters = 32) const;

    std::vector<Tensor> trainable_params() const { return net_.params(); }
    NamedTensors named_tensors() const;
    void save(const std::string& path) const;
    void load(const std::string& path);

private:
    CFMConfig cfg_;
    Rng rng_;
    VectorFieldNet net_;
    std::unique_ptr<Adam> opt_;
};

} // namespace omni
