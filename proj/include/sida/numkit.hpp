#pragma once

// Dense numeric kernel shared by the MoE model and the expert predictor.
//
// Everything operates on Eigen dense types. Row vectors are the canonical
// layout for per-token activations: a sequence of n embeddings is an n x d
// row-major matrix, so `x.row(t)` is the embedding of token t.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace sida {

template <typename Scalar>
using MatrixT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorT = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixT<double>;
using Vector = VectorT<double>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using IndexList = std::vector<std::size_t>;

/// Raised when a caller breaks a documented precondition.
class ContractViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Raised when a computation produces NaN/Inf or cannot be carried out.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require(bool ok, const std::string& what) {
    if (!ok) throw ContractViolation(what);
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& x) {
    return x.derived().array().isFinite().all();
}

/// Numerically stable softmax (max-shifted).
template <typename Derived>
VectorT<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& z) {
    using Scalar = typename Derived::Scalar;
    require(z.size() > 0, "softmax: empty input");
    const Scalar shift = z.maxCoeff();
    VectorT<Scalar> e(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) e(i) = std::exp(z(i) - shift);
    return e / e.sum();
}

template <typename Derived>
VectorT<typename Derived::Scalar> log_softmax(const Eigen::MatrixBase<Derived>& z) {
    using Scalar = typename Derived::Scalar;
    require(z.size() > 0, "log_softmax: empty input");
    const Scalar shift = z.maxCoeff();
    Scalar sum = 0;
    for (Eigen::Index i = 0; i < z.size(); ++i) sum += std::exp(z(i) - shift);
    const Scalar lse = shift + std::log(sum);
    VectorT<Scalar> out(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) out(i) = z(i) - lse;
    return out;
}

/// Threshold tau of the simplex projection: sparsemax(z) = max(z - tau, 0).
template <typename Derived>
typename Derived::Scalar sparsemax_threshold(const Eigen::MatrixBase<Derived>& z) {
    using Scalar = typename Derived::Scalar;
    require(z.size() > 0, "sparsemax: empty input");
    std::vector<Scalar> sorted(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) sorted[i] = z(i);
    std::sort(sorted.begin(), sorted.end(), std::greater<Scalar>());
    Scalar cumulative = 0;
    Scalar support_sum = 0;
    std::size_t support = 0;
    for (std::size_t k = 1; k <= sorted.size(); ++k) {
        cumulative += sorted[k - 1];
        if (Scalar(1) + Scalar(k) * sorted[k - 1] > cumulative) {
            support = k;
            support_sum = cumulative;
        }
    }
    return (support_sum - Scalar(1)) / Scalar(support);
}

/// Euclidean projection of z onto the probability simplex.
template <typename Derived>
VectorT<typename Derived::Scalar> sparsemax(const Eigen::MatrixBase<Derived>& z) {
    using Scalar = typename Derived::Scalar;
    const Scalar tau = sparsemax_threshold(z);
    VectorT<Scalar> out(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) out(i) = std::max(z(i) - tau, Scalar(0));
    return out;
}

/// Vector-Jacobian product of sparsemax at output p: on the support S the
/// Jacobian is I - 11^T/|S|, zero elsewhere.
template <typename DerivedP, typename DerivedG>
VectorT<typename DerivedP::Scalar> sparsemax_backward(const Eigen::MatrixBase<DerivedP>& p,
                                                      const Eigen::MatrixBase<DerivedG>& grad_out) {
    using Scalar = typename DerivedP::Scalar;
    require(p.size() == grad_out.size(), "sparsemax_backward: size mismatch");
    Scalar sum = 0;
    std::size_t support = 0;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        if (p(i) > Scalar(0)) {
            sum += grad_out(i);
            ++support;
        }
    }
    const Scalar mean = support ? sum / Scalar(support) : Scalar(0);
    VectorT<Scalar> out(p.size());
    for (Eigen::Index i = 0; i < p.size(); ++i) out(i) = p(i) > Scalar(0) ? grad_out(i) - mean : Scalar(0);
    return out;
}

/// Vector-Jacobian product of softmax at output p.
template <typename DerivedP, typename DerivedG>
VectorT<typename DerivedP::Scalar> softmax_backward(const Eigen::MatrixBase<DerivedP>& p,
                                                    const Eigen::MatrixBase<DerivedG>& grad_out) {
    require(p.size() == grad_out.size(), "softmax_backward: size mismatch");
    const auto dot = p.dot(grad_out);
    return (p.array() * (grad_out.array() - dot)).matrix();
}

/// Indices of the k largest entries, descending by value, lowest index first on ties.
template <typename Derived>
IndexList topk(const Eigen::MatrixBase<Derived>& z, std::size_t k) {
    const auto n = static_cast<std::size_t>(z.size());
    require(k >= 1 && k <= n, "topk: k=" + std::to_string(k) + " out of range for length " + std::to_string(n));
    IndexList order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (z(a) != z(b)) return z(a) > z(b);
                          return a < b;
                      });
    order.resize(k);
    return order;
}

template <typename Derived>
std::size_t argmax(const Eigen::MatrixBase<Derived>& z) {
    return topk(z, 1).front();
}

/// Rowwise softmax of a matrix.
Matrix softmax_rows(const Matrix& scores);
/// Rowwise sparsemax of a matrix.
Matrix sparsemax_rows(const Matrix& scores);
/// Rowwise VJP of softmax_rows given its output.
Matrix softmax_rows_backward(const Matrix& probs, const Matrix& grad_out);
/// Rowwise VJP of sparsemax_rows given its output.
Matrix sparsemax_rows_backward(const Matrix& probs, const Matrix& grad_out);

inline double sigmoid(double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

/// Scalar objective with analytic gradient: returns f(params) and, when
/// `grad` is non-null, writes df/dparams into it.
using DifferentiableFn = std::function<double(const Matrix& params, Matrix* grad)>;

/// Central-difference check of an analytic gradient. Returns the maximum over
/// entries of |analytic - numeric| / (|analytic| + |numeric| + 1e-8).
double grad_check(const DifferentiableFn& f, const Matrix& params, double eps);

}  // namespace sida
