#pragma once

#include <odestim/dynamics.hpp>
#include <odestim/error.hpp>
#include <odestim/rng.hpp>

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <cstdint>
#include <mutex>
#include <string>
#include <vector>

namespace odestim {

enum class NoiseKind { White, Pink };
enum class NoiseMode { Multiplicative, Additive };

inline std::string to_string(NoiseKind k) { return k == NoiseKind::White ? "white" : "pink"; }
inline std::string to_string(NoiseMode m) { return m == NoiseMode::Multiplicative ? "mult" : "add"; }

inline NoiseKind parse_noise_kind(const std::string& s) {
    if (s == "white" || s == "gaussian") return NoiseKind::White;
    if (s == "pink") return NoiseKind::Pink;
    throw Error(ErrorKind::ConfigError, "unknown noise kind '" + s + "' (valid: white, pink)");
}

inline NoiseMode parse_noise_mode(const std::string& s) {
    if (s == "mult" || s == "multiplicative") return NoiseMode::Multiplicative;
    if (s == "add" || s == "additive") return NoiseMode::Additive;
    throw Error(ErrorKind::ConfigError, "unknown noise mode '" + s + "' (valid: mult, add)");
}

struct NoiseSpec {
    NoiseKind kind = NoiseKind::White;
    double intensity = 0.0;
    NoiseMode mode = NoiseMode::Multiplicative;
    std::uint64_t seed = 0;
};

/// n i.i.d. standard normal draws (Box-Muller over mt19937_64, see Rng).
inline std::vector<double> white_noise(std::size_t n, std::uint64_t seed) {
    if (n < 1) throw Error(ErrorKind::BadHyperparameter, "white_noise needs n >= 1");
    Rng rng(seed);
    std::vector<double> out(n);
    for (auto& x : out) x = rng.normal();
    return out;
}

namespace detail {

// FFTW planning is not thread-safe; execution on distinct plans is.
inline std::mutex& fftw_planner_mutex() {
    static std::mutex m;
    return m;
}

inline void standardize(std::vector<double>& x) {
    const auto n = static_cast<double>(x.size());
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= n;
    double var = 0.0;
    for (double& v : x) {
        v -= mean;
        var += v * v;
    }
    const double sd = std::sqrt(var / n);
    for (double& v : x) v /= sd;
    // second pass removes the residual rounding in the mean
    double m2 = 0.0;
    for (double v : x) m2 += v;
    m2 /= n;
    for (double& v : x) v -= m2;
}

} // namespace detail

/// 1/f noise by spectral shaping: the spectrum of a white Gaussian sequence
/// is scaled by 1/sqrt(k) at bin k (DC zeroed), transformed back, then
/// standardised to zero mean and unit population variance.
inline std::vector<double> pink_noise(std::size_t n, std::uint64_t seed) {
    if (n < 8) throw Error(ErrorKind::BadHyperparameter, "pink_noise needs n >= 8");
    std::vector<double> x = white_noise(n, seed);
    const std::size_t bins = n / 2 + 1;
    std::vector<std::complex<double>> spec(bins);

    fftw_plan fwd;
    fftw_plan inv;
    {
        std::lock_guard lock(detail::fftw_planner_mutex());
        fwd = fftw_plan_dft_r2c_1d(static_cast<int>(n), x.data(), reinterpret_cast<fftw_complex*>(spec.data()),
                                   FFTW_ESTIMATE);
        inv = fftw_plan_dft_c2r_1d(static_cast<int>(n), reinterpret_cast<fftw_complex*>(spec.data()), x.data(),
                                   FFTW_ESTIMATE);
    }
    fftw_execute(fwd);
    spec[0] = 0.0;
    for (std::size_t k = 1; k < bins; ++k) spec[k] /= std::sqrt(static_cast<double>(k));
    fftw_execute(inv);
    {
        std::lock_guard lock(detail::fftw_planner_mutex());
        fftw_destroy_plan(fwd);
        fftw_destroy_plan(inv);
    }
    detail::standardize(x);
    return x;
}

inline std::vector<double> noise_samples(NoiseKind kind, std::size_t n, std::uint64_t seed) {
    return kind == NoiseKind::White ? white_noise(n, seed) : pink_noise(n, seed);
}

/// Observation noise on a clean trajectory. Component i uses its own stream
/// seeded with spec.seed + i.
///   Multiplicative: x (1 + eta e)
///   Additive:       x + eta s_i e, s_i the sample std of clean component i
inline Trajectory corrupt(const Trajectory& clean, const NoiseSpec& spec) {
    if (clean.empty() || clean.dim() == 0) throw Error(ErrorKind::EmptyTrajectory, "cannot corrupt an empty trajectory");
    if (!(spec.intensity >= 0.0)) throw Error(ErrorKind::BadHyperparameter, "noise intensity must be nonnegative");
    Trajectory noisy = clean;
    if (spec.intensity == 0.0) return noisy;

    const std::size_t n = clean.size();
    for (std::size_t i = 0; i < clean.dim(); ++i) {
        const auto col = static_cast<Eigen::Index>(i);
        const auto eps = noise_samples(spec.kind, n, spec.seed + i);
        if (spec.mode == NoiseMode::Multiplicative) {
            for (std::size_t j = 0; j < n; ++j)
                noisy.states(static_cast<Eigen::Index>(j), col) *= 1.0 + spec.intensity * eps[j];
        } else {
            const auto c = clean.states.col(col);
            const double mean = c.mean();
            const double sd = n > 1 ? std::sqrt((c.array() - mean).square().sum() / static_cast<double>(n - 1)) : 0.0;
            for (std::size_t j = 0; j < n; ++j)
                noisy.states(static_cast<Eigen::Index>(j), col) += spec.intensity * sd * eps[j];
        }
    }
    return noisy;
}

} // namespace odestim
