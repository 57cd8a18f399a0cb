#pragma once

#include <odestim/dynamics.hpp>
#include <odestim/error.hpp>
#include <odestim/loss.hpp>
#include <odestim/net.hpp>
#include <odestim/optim.hpp>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace odestim {

enum class Estimator { Collocation, Shooting };

inline std::string to_string(Estimator e) { return e == Estimator::Collocation ? "collocation" : "shooting"; }

inline Estimator parse_estimator(const std::string& s) {
    if (s == "collocation") return Estimator::Collocation;
    if (s == "shooting") return Estimator::Shooting;
    throw Error(ErrorKind::ConfigError, "unknown estimator '" + s + "' (valid: collocation, shooting)");
}

/// How the ODE residual between consecutive grid points is formed.
///   Trapezoid: (phi_{k+1} - phi_k)/dt - (f_k + f_{k+1})/2   (second order)
///   Forward:   (phi_{k+1} - phi_k)/dt - f_k                  (first order)
enum class ResidualScheme { Trapezoid, Forward };

inline std::string to_string(ResidualScheme s) { return s == ResidualScheme::Trapezoid ? "trapezoid" : "forward"; }

inline ResidualScheme parse_residual_scheme(const std::string& s) {
    if (s == "trapezoid") return ResidualScheme::Trapezoid;
    if (s == "forward") return ResidualScheme::Forward;
    throw Error(ErrorKind::ConfigError, "unknown residual scheme '" + s + "' (valid: trapezoid, forward)");
}

struct EstimationProblem {
    OdeSystem system;
    Trajectory observations;
    Vector x0;
    HuberParams huber;
    double lambda_data = 1.0;
    double lambda_ode = 1.0;
    double lambda_ic = 1.0;
    std::size_t net_hidden = 64;
    Activation net_activation = Activation::Tanh;
    Vector p_init;
    AdamHyper adam;
    std::size_t steps = 20000;
    std::uint64_t seed = 0;

    ResidualScheme residual = ResidualScheme::Trapezoid;
    /// Grid steps spanned by one ODE residual; 1 compares neighbouring points.
    std::size_t residual_window = 1;
    /// Adam step for parameter j is param_lr * |p_init_j| (1 when p_init_j = 0).
    double param_lr = 0.01;
    /// Data-only steps before the physical parameters are released.
    std::size_t warmup_steps = 0;
    /// Parameter-only steps (network frozen) between warm-up and joint training.
    std::size_t param_steps = 0;
    /// Maximum first-layer slope for the spread initialisation; 0 keeps Glorot.
    double init_slope = 0.0;
    /// Per-phase learning-rate decay: final rate as a fraction of the initial.
    double final_lr_fraction = 1.0;
    /// Early stop (per phase): patience in steps, 0 disables.
    std::size_t patience = 0;
    /// Relative central-difference step used by the shooting gradient.
    double fd_step = 1e-6;
};

struct EstimateResult {
    Estimator method = Estimator::Collocation;
    Vector p_hat;
    double final_huber = 0.0;
    std::vector<double> loss_history;
    std::vector<double> best_loss_history;
    std::optional<Mlp> net;
    double wall_time = 0.0;
    std::size_t steps_run = 0;
};

/// Cost with its gradient over the concatenated vector [flatten(net); p].
struct CostValue {
    double loss = 0.0;
    double data = 0.0;
    double ode = 0.0;
    double ic = 0.0;
    Vector grad;
};

namespace detail {

inline void validate(const EstimationProblem& problem) {
    const auto& obs = problem.observations;
    const auto& sys = problem.system;
    if (obs.empty()) throw Error(ErrorKind::EmptyTrajectory, "no observations");
    if (obs.dim() != sys.dim)
        throw Error(ErrorKind::DimensionMismatch, "observations have " + std::to_string(obs.dim()) +
                                                      " components; system '" + sys.name + "' has " +
                                                      std::to_string(sys.dim));
    if (static_cast<std::size_t>(problem.x0.size()) != sys.dim)
        throw Error(ErrorKind::DimensionMismatch, "initial state length does not match system");
    if (static_cast<std::size_t>(problem.p_init.size()) != sys.n_params())
        throw Error(ErrorKind::LengthMismatch, "initial parameter guess length does not match system");
    if (obs.size() < 2) throw Error(ErrorKind::EmptyTrajectory, "need at least two observation times");
    if (problem.lambda_data < 0.0 || problem.lambda_ode < 0.0 || problem.lambda_ic < 0.0 ||
        problem.lambda_data + problem.lambda_ode <= 0.0)
        throw Error(ErrorKind::BadHyperparameter, "cost weights must be nonnegative with lambda_data + lambda_ode > 0");
    if (!(problem.huber.delta > 0.0)) throw Error(ErrorKind::NonPositiveDelta, "Huber threshold must be positive");
    const double span = obs.times.back() - obs.times.front();
    const double h = span / static_cast<double>(obs.size() - 1);
    for (std::size_t j = 1; j < obs.size(); ++j) {
        const double step = obs.times[j] - obs.times[j - 1];
        if (!(step > 0.0)) throw Error(ErrorKind::ParseError, "observation times must be strictly increasing");
        // the final step of an integrated grid may be shortened
        if (j + 1 < obs.size() && std::abs(step - h) > 1e-6 * h)
            throw Error(ErrorKind::BadHyperparameter, "observation grid must be uniform");
    }
}

/// Per-component (mean, population std) of the observations; std falls back
/// to 1 for constant components.
inline std::pair<Vector, Vector> observation_scale(const Trajectory& obs) {
    const Vector mean = obs.states.colwise().mean().transpose();
    Vector sd(mean.size());
    for (Eigen::Index i = 0; i < mean.size(); ++i) {
        const double var = (obs.states.col(i).array() - mean[i]).square().mean();
        sd[i] = var > 0.0 ? std::sqrt(var) : 1.0;
    }
    return {mean, sd};
}

} // namespace detail

/// Mean over grid points of the summed per-component Huber penalty between a
/// state trajectory and the observations, on the observation-normalised
/// scale. This is the reported "final Huber loss" of every estimator.
inline double data_huber(const Eigen::Ref<const RowMatrix>& states, const Trajectory& obs, const Vector& scale,
                         double delta) {
    double sum = 0.0;
    for (Eigen::Index j = 0; j < states.rows(); ++j)
        for (Eigen::Index i = 0; i < states.cols(); ++i)
            sum += huber((states(j, i) - obs.states(j, i)) / scale[i], delta);
    return sum / static_cast<double>(states.rows());
}

/// Evaluates the Huber collocation cost for a fixed problem many times.
/// Holds scratch buffers, so one instance must not be shared across threads.
///
/// loss = lambda_data * mean_j sum_i H((phi_i(t_j) - zeta_ij) / s_i)
///      + lambda_ode  * sum_k sum_i H(r_ki / s_i) T_k / W
///      + lambda_ic   * sum_i H((phi_i(t_0) - x0_i) / s_i)
///
/// s_i is the observation std of component i. The ODE residual compares the
/// change of phi over W grid steps with the quadrature of f over the same
/// span T_k = t_{k+W} - t_k:
///
///   r_k = (phi(t_{k+W}) - phi(t_k) - sum_{l=k}^{k+W-1} h_l seg_l) / T_k
///
/// with seg_l = (f_l + f_{l+1})/2 (trapezoid) or f_l (forward), f_l = f(t_l,
/// phi(t_l), p). W = 1 with the forward scheme is the plain forward-difference
/// residual.
class CollocationCost {
public:
    explicit CollocationCost(const EstimationProblem& problem) : problem_(problem) {
        detail::validate(problem);
        std::tie(mean_, scale_) = detail::observation_scale(problem.observations);
        const auto& t = problem.observations.times;
        dt_.resize(t.size() - 1);
        for (std::size_t k = 0; k + 1 < t.size(); ++k) dt_[k] = t[k + 1] - t[k];
        inputs_ = Eigen::Map<const Vector>(t.data(), static_cast<Eigen::Index>(t.size()));
    }

    const Vector& mean() const noexcept { return mean_; }
    const Vector& scale() const noexcept { return scale_; }

    /// Fresh network with the problem's normalisation and initialisation.
    Mlp make_net() const {
        const auto& p = problem_;
        Mlp net = init(1, p.net_hidden, p.system.dim, p.net_activation, p.seed);
        if (p.init_slope > 0.0) spread_first_layer(net, p.init_slope, p.seed ^ 0x5bd1e995ULL);
        net.set_time_window(p.observations.times.front(), p.observations.times.back());
        net.set_output_scale(mean_, scale_);
        return net;
    }

    /// Loss and gradient over [flatten(net); p]. Terms with zero weight are
    /// skipped (and contribute zero gradient).
    CostValue evaluate(const Mlp& net, const ConstVectorRef& p, bool with_ode = true) const {
        ForwardTape& tape = work_.tape;
        forward_into(net, inputs_, tape);
        CostValue out = evaluate_states(tape.y, p, with_ode);
        backward_into(net, tape, work_.gy, work_.grads);
        const Vector gp = std::move(out.grad);
        out.grad.resize(static_cast<Eigen::Index>(net.param_count()) + gp.size());
        out.grad << work_.grads.params, gp;
        return out;
    }

    /// The same cost for an arbitrary state trajectory y on the observation
    /// grid. `grad` holds only the p part; d loss / d y is left in
    /// state_grad().
    CostValue evaluate_states(const Eigen::Ref<const RowMatrix>& y, const ConstVectorRef& p, bool with_ode = true) const {
        const auto& sys = problem_.system;
        const auto& obs = problem_.observations;
        const double delta = problem_.huber.delta;
        const auto m = static_cast<Eigen::Index>(sys.dim);
        const auto np = static_cast<Eigen::Index>(sys.n_params());
        const auto K = static_cast<Eigen::Index>(obs.size());
        if (y.rows() != K || y.cols() != m)
            throw Error(ErrorKind::ShapeMismatch, "state trajectory must be " + std::to_string(K) + "x" +
                                                      std::to_string(m));
        if (p.size() != np) throw Error(ErrorKind::LengthMismatch, "parameter vector length does not match system");

        RowMatrix& gy = work_.gy;
        gy.setZero(K, m);
        Vector gp = Vector::Zero(np);
        CostValue out;

        if (problem_.lambda_data > 0.0) {
            const double w = problem_.lambda_data / static_cast<double>(K);
            double sum = 0.0;
            for (Eigen::Index j = 0; j < K; ++j)
                for (Eigen::Index i = 0; i < m; ++i) {
                    const double z = (y(j, i) - obs.states(j, i)) / scale_[i];
                    sum += huber(z, delta);
                    gy(j, i) += w * huber_grad(z, delta) / scale_[i];
                }
            out.data = w * sum;
        }

        if (problem_.lambda_ic > 0.0) {
            double sum = 0.0;
            for (Eigen::Index i = 0; i < m; ++i) {
                const double z = (y(0, i) - problem_.x0[i]) / scale_[i];
                sum += huber(z, delta);
                gy(0, i) += problem_.lambda_ic * huber_grad(z, delta) / scale_[i];
            }
            out.ic = problem_.lambda_ic * sum;
        }

        if (with_ode && problem_.lambda_ode > 0.0) {
            const bool trap = problem_.residual == ResidualScheme::Trapezoid;
            const auto& t = obs.times;
            const Eigen::Index W = std::min<Eigen::Index>(static_cast<Eigen::Index>(problem_.residual_window), K - 1);
            const Eigen::Index windows = K - W;

            // f and its Jacobians at every grid point
            RowMatrix& f = work_.f;
            f.resize(K, m);
            auto& jx = work_.jx;
            auto& jp = work_.jp;
            if (jx.size() != static_cast<std::size_t>(K)) {
                jx.assign(static_cast<std::size_t>(K), Matrix::Zero(m, m));
                jp.assign(static_cast<std::size_t>(K), Matrix::Zero(m, np));
            }
            Vector fk(m);
            for (Eigen::Index k = 0; k < K; ++k) {
                const auto ku = static_cast<std::size_t>(k);
                const Vector xk = y.row(k).transpose();
                sys.rhs_fn(t[ku], xk, p, fk);
                f.row(k) = fk.transpose();
                sys.jac_x_fn(t[ku], xk, p, jx[ku]);
                sys.jac_p_fn(t[ku], xk, p, jp[ku]);
            }

            // prefix sums of the quadrature increments h_i * seg_i and of h_i
            RowMatrix& acc = work_.acc;
            acc.setZero(K, m);
            std::vector<double>& hsum = work_.hsum;
            hsum.assign(static_cast<std::size_t>(K), 0.0);
            for (Eigen::Index i = 0; i + 1 < K; ++i) {
                const double h = dt_[static_cast<std::size_t>(i)];
                const auto seg = trap ? (0.5 * (f.row(i) + f.row(i + 1))).eval() : f.row(i).eval();
                acc.row(i + 1) = acc.row(i) + h * seg;
                hsum[static_cast<std::size_t>(i + 1)] = hsum[static_cast<std::size_t>(i)] + h;
            }

            // residual over window [k, k+W]: (phi_{k+W} - phi_k - integral of f) / H_k
            RowMatrix& gw = work_.gw; // d loss / d numerator_k
            gw.resize(windows, m);
            double sum = 0.0;
            for (Eigen::Index k = 0; k < windows; ++k) {
                const double span = hsum[static_cast<std::size_t>(k + W)] - hsum[static_cast<std::size_t>(k)];
                const double w = problem_.lambda_ode * span / static_cast<double>(W);
                for (Eigen::Index i = 0; i < m; ++i) {
                    const double r = (y(k + W, i) - y(k, i) - (acc(k + W, i) - acc(k, i))) / span;
                    const double z = r / scale_[i];
                    sum += w * huber(z, delta);
                    gw(k, i) = w * huber_grad(z, delta) / (scale_[i] * span);
                }
                gy.row(k + W) += gw.row(k);
                gy.row(k) -= gw.row(k);
            }
            out.ode = sum;

            // d loss / d seg_i = -h_i * (sum of gw over windows containing segment i)
            RowMatrix& u = work_.u; // d loss / d f_i
            u.setZero(K, m);
            Eigen::RowVectorXd running = Eigen::RowVectorXd::Zero(m);
            for (Eigen::Index i = 0; i + 1 < K; ++i) {
                if (i < windows) running += gw.row(i);
                if (i - W >= 0) running -= gw.row(i - W);
                const Eigen::RowVectorXd dseg = -dt_[static_cast<std::size_t>(i)] * running;
                if (trap) {
                    u.row(i) += 0.5 * dseg;
                    u.row(i + 1) += 0.5 * dseg;
                } else {
                    u.row(i) += dseg;
                }
            }
            for (Eigen::Index k = 0; k < K; ++k) {
                const auto ku = static_cast<std::size_t>(k);
                gy.row(k) += u.row(k) * jx[ku];
                gp += (u.row(k) * jp[ku]).transpose();
            }
        }

        out.loss = out.data + out.ode + out.ic;
        if (!std::isfinite(out.loss)) throw Error(ErrorKind::NonFiniteLoss, "collocation cost is non-finite");
        out.grad = std::move(gp);
        return out;
    }

    /// d loss / d y of the last evaluation.
    const RowMatrix& state_grad() const noexcept { return work_.gy; }

    const std::vector<double>& times() const noexcept { return problem_.observations.times; }

private:
    struct Workspace {
        ForwardTape tape;
        RowMatrix gy;
        RowMatrix f;
        RowMatrix acc;
        RowMatrix gw;
        RowMatrix u;
        std::vector<double> hsum;
        std::vector<Matrix> jx;
        std::vector<Matrix> jp;
        Gradients grads;
    };

    const EstimationProblem& problem_;
    Vector mean_;
    Vector scale_;
    std::vector<double> dt_;
    RowMatrix inputs_;
    mutable Workspace work_;
};

/// One evaluation of the collocation cost for (net, p).
inline CostValue collocation_cost(const Mlp& net, const ConstVectorRef& p, const EstimationProblem& problem) {
    return CollocationCost(problem).evaluate(net, p);
}

namespace detail {

inline Vector param_lr_scale(const EstimationProblem& problem) {
    Vector s(problem.p_init.size());
    for (Eigen::Index j = 0; j < s.size(); ++j) {
        const double a = std::abs(problem.p_init[j]);
        s[j] = a > 0.0 ? a : 1.0;
    }
    return s;
}

inline void append(std::vector<double>& dst, const std::vector<double>& src) { dst.insert(dst.end(), src.begin(), src.end()); }

inline double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

} // namespace detail

/// Joint Huber collocation fit of a trajectory network and the physical
/// parameters, minimised with Adam. Training runs in up to three phases:
///   1. warm-up: network only, data + initial-condition terms
///   2. parameters only, network frozen, full cost
///   3. joint, full cost
/// Each phase continues from the best iterate of the previous one.
inline EstimateResult fit_collocation(const EstimationProblem& problem) {
    const auto start = std::chrono::steady_clock::now();
    CollocationCost cost(problem);
    Mlp net = cost.make_net();
    Vector p = problem.p_init;
    const auto nw = static_cast<Eigen::Index>(net.param_count());
    const auto np = p.size();

    EstimateResult result;
    result.method = Estimator::Collocation;
    MinimizeOptions options;
    options.patience = problem.patience;
    options.final_lr_fraction = problem.final_lr_fraction;

    auto run_phase = [&](std::size_t steps, const Objective& objective, const Vector& theta0, AdamState state) {
        MinimizeResult r = minimize(objective, theta0, steps, state, options);
        detail::append(result.loss_history, r.loss_history);
        result.steps_run += r.loss_history.size();
        return r;
    };

    if (problem.warmup_steps > 0) {
        Objective obj = [&](const Vector& w, Vector& grad) {
            const CostValue c = cost.evaluate(unflatten(net, w), p, false);
            grad = c.grad.head(nw);
            return c.loss;
        };
        net = unflatten(net, run_phase(problem.warmup_steps, obj, flatten(net), adam_new(nw, problem.adam)).best_theta);
    }

    if (problem.param_steps > 0 && problem.lambda_ode > 0.0) {
        Objective obj = [&](const Vector& q, Vector& grad) {
            const CostValue c = cost.evaluate(net, q);
            grad = c.grad.tail(np);
            return c.loss;
        };
        AdamState st = adam_new(static_cast<std::size_t>(np), problem.param_lr, problem.adam.beta1, problem.adam.beta2,
                                problem.adam.eps);
        st.lr_scale = detail::param_lr_scale(problem);
        p = run_phase(problem.param_steps, obj, p, st).best_theta;
    }

    if (problem.steps > 0) {
        Objective obj = [&](const Vector& theta, Vector& grad) {
            const CostValue c = cost.evaluate(unflatten(net, theta.head(nw)), theta.tail(np));
            grad = c.grad;
            return c.loss;
        };
        Vector theta(nw + np);
        theta << flatten(net), p;
        AdamState st = adam_new(static_cast<std::size_t>(nw + np), problem.adam);
        st.lr_scale = Vector::Ones(nw + np);
        st.lr_scale.tail(np) = detail::param_lr_scale(problem) * (problem.param_lr / problem.adam.lr);

        const MinimizeResult r = run_phase(problem.steps, obj, theta, st);
        net = unflatten(net, r.best_theta.head(nw));
        p = r.best_theta.tail(np);
    }

    // running minimum over the whole concatenated history
    double best = std::numeric_limits<double>::infinity();
    for (double l : result.loss_history) result.best_loss_history.push_back(best = std::min(best, l));

    result.p_hat = p;
    result.final_huber = data_huber(forward_batch(net, problem.observations.times), problem.observations, cost.scale(),
                                    problem.huber.delta);
    result.net = std::move(net);
    result.wall_time = detail::seconds_since(start);
    return result;
}

// ---------------------------------------------------------------------------
// Direct shooting
// ---------------------------------------------------------------------------

/// Objective of the shooting baseline: integrate from the known x0 over the
/// observation grid and take `data_huber` against the observations.
/// Returns `divergence_penalty` when integration fails.
class ShootingObjective {
public:
    static constexpr double divergence_penalty = 1e6;

    explicit ShootingObjective(const EstimationProblem& problem) : problem_(problem) {
        detail::validate(problem);
        scale_ = detail::observation_scale(problem.observations).second;
    }

    const Vector& scale() const noexcept { return scale_; }

    RowMatrix simulate(const ConstVectorRef& p) const {
        const auto& t = problem_.observations.times;
        RowMatrix states(static_cast<Eigen::Index>(t.size()), static_cast<Eigen::Index>(problem_.system.dim));
        Vector x = problem_.x0;
        states.row(0) = x.transpose();
        for (std::size_t j = 1; j < t.size(); ++j) {
            x = rk4_step(problem_.system, t[j - 1], x, p, t[j] - t[j - 1]);
            states.row(static_cast<Eigen::Index>(j)) = x.transpose();
        }
        return states;
    }

    double value(const ConstVectorRef& p) const {
        try {
            const double v = data_huber(simulate(p), problem_.observations, scale_, problem_.huber.delta);
            return std::isfinite(v) ? std::min(v, divergence_penalty) : divergence_penalty;
        } catch (const Error& e) {
            if (e.kind() == ErrorKind::NonFiniteState) return divergence_penalty;
            throw;
        }
    }

    /// Value plus central-difference gradient, step fd_step * max(|p_j|, 1e-3).
    double value_and_grad(const ConstVectorRef& p, Vector& grad) const {
        grad.resize(p.size());
        Vector q = p;
        for (Eigen::Index j = 0; j < p.size(); ++j) {
            const double h = problem_.fd_step * std::max(std::abs(p[j]), 1e-3);
            q[j] = p[j] + h;
            const double up = value(q);
            q[j] = p[j] - h;
            const double down = value(q);
            q[j] = p[j];
            grad[j] = (up - down) / (2.0 * h);
        }
        return value(p);
    }

private:
    const EstimationProblem& problem_;
    Vector scale_;
};

/// Baseline: Adam on the shooting objective, no network involved.
inline EstimateResult fit_shooting(const EstimationProblem& problem) {
    const auto start = std::chrono::steady_clock::now();
    ShootingObjective objective(problem);
    EstimateResult result;
    result.method = Estimator::Shooting;

    AdamState st = adam_new(static_cast<std::size_t>(problem.p_init.size()), problem.param_lr, problem.adam.beta1,
                            problem.adam.beta2, problem.adam.eps);
    st.lr_scale = detail::param_lr_scale(problem);
    MinimizeOptions options;
    options.patience = problem.patience;
    Objective obj = [&](const Vector& p, Vector& grad) { return objective.value_and_grad(p, grad); };
    const std::size_t steps = std::max<std::size_t>(problem.steps, 1);
    MinimizeResult r = minimize(obj, problem.p_init, steps, st, options);

    result.p_hat = r.best_theta;
    result.final_huber = r.best_loss;
    result.loss_history = std::move(r.loss_history);
    result.best_loss_history = std::move(r.best_loss_history);
    result.steps_run = result.loss_history.size();
    result.wall_time = detail::seconds_since(start);
    return result;
}

inline EstimateResult fit(const EstimationProblem& problem, Estimator method) {
    return method == Estimator::Collocation ? fit_collocation(problem) : fit_shooting(problem);
}

} // namespace odestim
