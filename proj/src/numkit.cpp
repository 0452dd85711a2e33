#include "sida/numkit.hpp"

namespace sida {

Matrix softmax_rows(const Matrix& scores) {
    Matrix out(scores.rows(), scores.cols());
    for (Eigen::Index r = 0; r < scores.rows(); ++r) out.row(r) = softmax(scores.row(r).transpose()).transpose();
    return out;
}

Matrix sparsemax_rows(const Matrix& scores) {
    Matrix out(scores.rows(), scores.cols());
    for (Eigen::Index r = 0; r < scores.rows(); ++r) out.row(r) = sparsemax(scores.row(r).transpose()).transpose();
    return out;
}

Matrix softmax_rows_backward(const Matrix& probs, const Matrix& grad_out) {
    require(probs.rows() == grad_out.rows() && probs.cols() == grad_out.cols(), "softmax_rows_backward: shape mismatch");
    Matrix out(probs.rows(), probs.cols());
    for (Eigen::Index r = 0; r < probs.rows(); ++r)
        out.row(r) = softmax_backward(probs.row(r).transpose(), grad_out.row(r).transpose()).transpose();
    return out;
}

Matrix sparsemax_rows_backward(const Matrix& probs, const Matrix& grad_out) {
    require(probs.rows() == grad_out.rows() && probs.cols() == grad_out.cols(), "sparsemax_rows_backward: shape mismatch");
    Matrix out(probs.rows(), probs.cols());
    for (Eigen::Index r = 0; r < probs.rows(); ++r)
        out.row(r) = sparsemax_backward(probs.row(r).transpose(), grad_out.row(r).transpose()).transpose();
    return out;
}

double grad_check(const DifferentiableFn& f, const Matrix& params, double eps) {
    require(eps > 0, "grad_check: eps must be positive");
    Matrix analytic = Matrix::Zero(params.rows(), params.cols());
    const double base = f(params, &analytic);
    if (!std::isfinite(base) || !all_finite(analytic)) throw NumericError("grad_check: non-finite objective or gradient");

    Matrix probe = params;
    double worst = 0.0;
    for (Eigen::Index i = 0; i < params.size(); ++i) {
        const double original = probe.data()[i];
        probe.data()[i] = original + eps;
        const double up = f(probe, nullptr);
        probe.data()[i] = original - eps;
        const double down = f(probe, nullptr);
        probe.data()[i] = original;
        if (!std::isfinite(up) || !std::isfinite(down)) throw NumericError("grad_check: non-finite objective under perturbation");
        const double numeric = (up - down) / (2.0 * eps);
        const double a = analytic.data()[i];
        worst = std::max(worst, std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-8));
    }
    return worst;
}

}  // namespace sida
