#pragma once

#include <odestim/dynamics.hpp>
#include <odestim/error.hpp>

#include <cmath>

namespace odestim {

struct HuberParams {
    double delta = 1.0;
};

namespace detail {
inline void check_delta(double delta) {
    if (!(delta > 0.0)) throw Error(ErrorKind::NonPositiveDelta, "Huber threshold must be positive");
}
} // namespace detail

/// Quadratic z^2/2 inside |z| <= delta, linear delta(|z| - delta/2) outside.
inline double huber(double z, double delta) {
    detail::check_delta(delta);
    const double a = std::abs(z);
    return a <= delta ? 0.5 * z * z : delta * (a - 0.5 * delta);
}

/// d huber / dz: z inside the knee, delta * sign(z) outside.
inline double huber_grad(double z, double delta) {
    detail::check_delta(delta);
    if (std::abs(z) <= delta) return z;
    return z > 0.0 ? delta : -delta;
}

/// sum_ij residual_ij^2 / sigma_ij^2.
inline double weighted_l2(const Eigen::Ref<const Matrix>& residuals, const Eigen::Ref<const Matrix>& sigmas) {
    if (residuals.rows() != sigmas.rows() || residuals.cols() != sigmas.cols())
        throw Error(ErrorKind::ShapeMismatch, "residual and sigma matrices differ in shape");
    if ((sigmas.array() <= 0.0).any() || sigmas.hasNaN())
        throw Error(ErrorKind::NonPositiveSigma, "measurement standard deviations must be positive");
    return (residuals.array() / sigmas.array()).square().sum();
}

} // namespace odestim
