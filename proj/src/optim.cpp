#include "sida/optim.hpp"

namespace sida {

void AdamW::step(std::span<Matrix* const> params, std::span<const Matrix* const> grads) {
    require(params.size() == grads.size(), "AdamW: parameter/gradient count mismatch");
    if (first_.empty()) {
        first_.reserve(params.size());
        second_.reserve(params.size());
        for (const Matrix* p : params) {
            first_.push_back(Matrix::Zero(p->rows(), p->cols()));
            second_.push_back(Matrix::Zero(p->rows(), p->cols()));
        }
    }
    require(first_.size() == params.size(), "AdamW: parameter list changed between steps");
    ++steps_;
    const double bias1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double bias2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Matrix& p = *params[i];
        const Matrix& g = *grads[i];
        require(p.rows() == g.rows() && p.cols() == g.cols(), "AdamW: gradient shape mismatch");
        first_[i] = config_.beta1 * first_[i] + (1.0 - config_.beta1) * g;
        second_[i] = config_.beta2 * second_[i] + (1.0 - config_.beta2) * g.cwiseProduct(g);
        p *= 1.0 - config_.lr * config_.weight_decay;
        p.array() -= config_.lr * (first_[i].array() / bias1) / ((second_[i].array() / bias2).sqrt() + config_.eps);
    }
}

double global_norm(std::span<const Matrix* const> grads) {
    double sq = 0.0;
    for (const Matrix* g : grads) sq += g->squaredNorm();
    return std::sqrt(sq);
}

void clip_global_norm(std::span<Matrix* const> grads, double max_norm) {
    double sq = 0.0;
    for (const Matrix* g : grads) sq += g->squaredNorm();
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double scale = max_norm / norm;
        for (Matrix* g : grads) *g *= scale;
    }
}

}  // namespace sida
