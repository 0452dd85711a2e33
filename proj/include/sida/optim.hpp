#pragma once

#include "sida/numkit.hpp"

#include <span>

namespace sida {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// Adam with decoupled weight decay. Moment buffers are allocated on the
/// first step and keyed by position in the parameter list, so callers must
/// pass parameters in the same order every step.
class AdamW {
public:
    explicit AdamW(AdamWConfig config = {}) : config_(config) {}

    void step(std::span<Matrix* const> params, std::span<const Matrix* const> grads);

    const AdamWConfig& config() const { return config_; }
    void set_lr(double lr) { config_.lr = lr; }
    std::size_t steps_taken() const { return steps_; }

private:
    AdamWConfig config_;
    std::vector<Matrix> first_;
    std::vector<Matrix> second_;
    std::size_t steps_ = 0;
};

/// Global L2 norm over a gradient list.
double global_norm(std::span<const Matrix* const> grads);

/// Rescale gradients in place so their global norm is at most `max_norm`.
void clip_global_norm(std::span<Matrix* const> grads, double max_norm);

}  // namespace sida
