#pragma once

#include <cstddef>
#include <vector>

#include "omni/tensor.hpp"

namespace omni {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Bias-corrected Adam over a fixed parameter list. Moment buffers match
// parameter shapes; grads are left untouched so the caller owns the
// reset between steps. A parameter whose grad buffer was never
// allocated (zero_grads not called, no backward reached it) is an
// error.
class Adam {
public:
    Adam(std::vector<Tensor> params, AdamConfig cfg);

    void step();

    // scheduler hook; takes effect from the next step
    void set_lr(double lr) { cfg_.lr = lr; }

    size_t step_count() const { return step_; }
    const AdamConfig& config() const { return cfg_; }
    const std::vector<Tensor>& params() const { return params_; }

private:
    std::vector<Tensor> params_;
    AdamConfig cfg_;
    size_t step_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

} // namespace omni
