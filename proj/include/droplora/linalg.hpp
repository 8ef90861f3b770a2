#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <vector>

#include "droplora/errors.hpp"
#include "droplora/tensor.hpp"

namespace droplora {

/// Relative threshold under which singular values count as zero everywhere a
/// numerical rank is measured.
inline constexpr double kRankRelTol = 1e-9;

inline std::vector<double> singular_values(const TensorPtr& t) {
    detail::require_matrix(*t, "singular_values");
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(detail::mat(*t));
    const auto& sv = svd.singularValues();
    return {sv.data(), sv.data() + sv.size()};
}

inline double frobenius_norm(const TensorPtr& t) {
    double acc = 0.0;
    for (double v : t->data) acc += v * v;
    return std::sqrt(acc);
}

/// Count of singular values above kRankRelTol * sigma_max.
inline std::size_t numerical_rank(const TensorPtr& t) {
    const auto sv = singular_values(t);
    if (sv.empty() || sv.front() == 0.0) return 0;
    const double cutoff = kRankRelTol * sv.front();
    return static_cast<std::size_t>(
        std::count_if(sv.begin(), sv.end(), [cutoff](double s) { return s > cutoff; }));
}

/// Frobenius norm of the optimal rank-r approximation residual: the square
/// root of the discarded singular values' energy.
inline double eckart_young_error(const TensorPtr& t, std::size_t r) {
    const auto sv = singular_values(t);
    double acc = 0.0;
    for (std::size_t i = r; i < sv.size(); ++i) acc += sv[i] * sv[i];
    return std::sqrt(acc);
}

/// Orthonormal basis of the column space (left singular vectors above the
/// rank cutoff). Returns an empty pointer for the zero matrix, whose column
/// space has no usable basis.
inline TensorPtr orthonormal_column_basis(const TensorPtr& t) {
    detail::require_matrix(*t, "orthonormal_column_basis");
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(detail::mat(*t), Eigen::ComputeThinU);
    const auto& sv = svd.singularValues();
    if (sv.size() == 0 || sv(0) == 0.0) return nullptr;
    const double cutoff = kRankRelTol * sv(0);
    Eigen::Index q = 0;
    while (q < sv.size() && sv(q) > cutoff) ++q;
    auto basis = zeros({t->rows(), static_cast<std::size_t>(q)});
    detail::mat_mut(basis->data, basis->rows(), basis->cols()) = svd.matrixU().leftCols(q);
    return basis;
}

/// Canonical angles between the column spaces of two orthonormal bases,
/// ascending in [0, pi/2]; min(q1, q2) angles come back. Small angles use the
/// sine-based formula, since acos of a near-one cosine loses half the digits.
inline std::vector<double> principal_angles(const TensorPtr& basis1, const TensorPtr& basis2) {
    if (basis1->rows() != basis2->rows())
        throw DimensionError("principal_angles: ambient dimensions disagree: " +
                             shape_str(basis1->shape) + " vs " + shape_str(basis2->shape));
    // Project the smaller basis against the larger so every singular value
    // pairs with a genuine angle.
    const bool swap = basis1->cols() > basis2->cols();
    const Eigen::MatrixXd u = detail::mat(swap ? *basis2 : *basis1);
    const Eigen::MatrixXd v = detail::mat(swap ? *basis1 : *basis2);

    Eigen::JacobiSVD<Eigen::MatrixXd> cos_svd(v.transpose() * u);
    std::vector<double> cosines(cos_svd.singularValues().data(),
                                cos_svd.singularValues().data() +
                                    cos_svd.singularValues().size()); // descending
    Eigen::JacobiSVD<Eigen::MatrixXd> sin_svd(u - v * (v.transpose() * u));
    std::vector<double> sines(sin_svd.singularValues().data(),
                              sin_svd.singularValues().data() +
                                  sin_svd.singularValues().size());
    std::sort(sines.begin(), sines.end()); // ascending, pairs with descending cosines

    std::vector<double> angles(cosines.size());
    for (std::size_t i = 0; i < angles.size(); ++i) {
        const double c = std::clamp(cosines[i], 0.0, 1.0);
        const double s = std::clamp(sines[i], 0.0, 1.0);
        angles[i] = c * c > 0.5 ? std::asin(s) : std::acos(c);
    }
    std::sort(angles.begin(), angles.end());
    return angles;
}

} // namespace droplora
