#pragma once

#include <odestim/dynamics.hpp>
#include <odestim/error.hpp>

#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <ostream>
#include <limits>
#include <string>
#include <vector>

namespace odestim {

struct AdamHyper {
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Moment estimates and step counter for one Adam run.
///
/// `lr_scale` is an optional per-coordinate multiplier on `lr`; when empty
/// every coordinate uses `lr` as is.
struct AdamState {
    Vector m;
    Vector v;
    std::size_t t = 0;
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    Vector lr_scale;

    std::size_t dim() const noexcept { return static_cast<std::size_t>(m.size()); }
    /// m / (1 - beta1^t); meaningful once t >= 1.
    Vector m_hat() const { return m / (1.0 - std::pow(beta1, static_cast<double>(t))); }
    /// v / (1 - beta2^t); meaningful once t >= 1.
    Vector v_hat() const { return v / (1.0 - std::pow(beta2, static_cast<double>(t))); }
};

inline AdamState adam_new(std::size_t dim, double lr = 0.001, double beta1 = 0.9, double beta2 = 0.999,
                          double eps = 1e-8) {
    if (dim < 1) throw Error(ErrorKind::BadHyperparameter, "Adam needs at least one parameter");
    if (!(lr > 0.0)) throw Error(ErrorKind::BadHyperparameter, "learning rate must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
        throw Error(ErrorKind::BadHyperparameter, "Adam decay rates must lie in [0, 1)");
    if (!(eps >= 0.0)) throw Error(ErrorKind::BadHyperparameter, "Adam epsilon must be nonnegative");
    AdamState s;
    s.m = Vector::Zero(static_cast<Eigen::Index>(dim));
    s.v = Vector::Zero(static_cast<Eigen::Index>(dim));
    s.lr = lr;
    s.beta1 = beta1;
    s.beta2 = beta2;
    s.eps = eps;
    return s;
}

inline AdamState adam_new(std::size_t dim, const AdamHyper& h) { return adam_new(dim, h.lr, h.beta1, h.beta2, h.eps); }

/// One Adam update: moments, bias correction (t is incremented first, so the
/// first call corrects with t = 1), then the parameter step.
inline Vector adam_step(AdamState& state, const ConstVectorRef& params, const ConstVectorRef& grads) {
    if (static_cast<std::size_t>(params.size()) != state.dim() || static_cast<std::size_t>(grads.size()) != state.dim())
        throw Error(ErrorKind::LengthMismatch, "Adam state has " + std::to_string(state.dim()) +
                                                   " coordinates; got params " + std::to_string(params.size()) +
                                                   ", grads " + std::to_string(grads.size()));
    if (!grads.allFinite()) throw Error(ErrorKind::NonFiniteGradient, "gradient has non-finite components");
    if (state.lr_scale.size() != 0 && static_cast<std::size_t>(state.lr_scale.size()) != state.dim())
        throw Error(ErrorKind::LengthMismatch, "lr_scale length does not match Adam state");

    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads;
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads.cwiseProduct(grads);
    state.t += 1;

    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    Vector out(params.size());
    for (Eigen::Index i = 0; i < params.size(); ++i) {
        const double m_hat = state.m[i] / c1;
        const double v_hat = state.v[i] / c2;
        const double lr = state.lr_scale.size() ? state.lr * state.lr_scale[i] : state.lr;
        out[i] = params[i] - lr / (std::sqrt(v_hat) + state.eps) * m_hat;
    }
    return out;
}

/// Objective evaluated at theta: returns the loss and writes the gradient.
using Objective = std::function<double(const Vector& theta, Vector& grad)>;

struct MinimizeOptions {
    /// Stop once the best loss improved by less than `min_improvement` over the
    /// last `patience` steps. Zero patience disables early stopping.
    std::size_t patience = 0;
    double min_improvement = 1e-10;
    /// Learning rate at the last step as a fraction of the initial one; the
    /// rate decays geometrically in between. 1 keeps it constant.
    double final_lr_fraction = 1.0;
};

struct MinimizeResult {
    Vector best_theta;
    Vector last_theta;                     // the final iterate evaluated
    double best_loss = std::numeric_limits<double>::infinity();
    std::size_t best_step = 0;
    std::vector<double> loss_history;      // loss of the iterate evaluated at each step
    std::vector<double> best_loss_history; // running minimum of loss_history
};

/// Runs Adam for up to `steps` iterations and returns the lowest-loss iterate
/// seen, which need not be the last one.
inline MinimizeResult minimize(const Objective& objective, const ConstVectorRef& theta0, std::size_t steps,
                               AdamState& state, const MinimizeOptions& options = {}) {
    if (steps < 1) throw Error(ErrorKind::BadHyperparameter, "minimize needs at least one step");
    if (!(options.final_lr_fraction > 0.0 && options.final_lr_fraction <= 1.0))
        throw Error(ErrorKind::BadHyperparameter, "final_lr_fraction must lie in (0, 1]");
    const double lr0 = state.lr;
    const double decay = steps > 1 ? std::pow(options.final_lr_fraction, 1.0 / static_cast<double>(steps - 1)) : 1.0;
    MinimizeResult result;
    result.loss_history.reserve(steps);
    result.best_loss_history.reserve(steps);

    Vector theta = theta0;
    Vector grad(theta.size());
    result.best_theta = theta;
    for (std::size_t step = 0; step < steps; ++step) {
        grad.setZero();
        const double loss = objective(theta, grad);
        if (!std::isfinite(loss))
            throw Error(ErrorKind::NonFiniteLoss, "loss became non-finite at step " + std::to_string(step));
        result.loss_history.push_back(loss);
        if (loss < result.best_loss) {
            result.best_loss = loss;
            result.best_theta = theta;
            result.best_step = step;
        }
        result.best_loss_history.push_back(result.best_loss);

        if (options.patience > 0 && step >= options.patience) {
            const double earlier = result.best_loss_history[step - options.patience];
            if (earlier - result.best_loss < options.min_improvement) break;
        }
        if (step + 1 < steps) {
            state.lr = lr0 * std::pow(decay, static_cast<double>(step));
            theta = adam_step(state, theta, grad);
        }
    }
    state.lr = lr0;
    result.last_theta = std::move(theta);
    return result;
}

/// Loss history as CSV with header `step,loss`, full precision.
inline void write_loss_history_csv(std::ostream& out, const std::vector<double>& history) {
    out << "step,loss\n";
    out.precision(17);
    for (std::size_t i = 0; i < history.size(); ++i) out << i << ',' << history[i] << '\n';
}

inline void write_loss_history_csv(const std::string& path, const std::vector<double>& history) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorKind::IoError, "cannot write '" + path + "'");
    write_loss_history_csv(out, history);
}

} // namespace odestim
