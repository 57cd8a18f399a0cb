#pragma once

#include <odestim/error.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace odestim {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using VectorRef = Eigen::Ref<Vector>;
using ConstVectorRef = Eigen::Ref<const Vector>;
using MatrixRef = Eigen::Ref<Matrix>;

/// Right-hand side f(t, x, p), written into `dx`.
using RhsFn = std::function<void(double t, const ConstVectorRef& x, const ConstVectorRef& p, VectorRef dx)>;
/// Jacobian of f with respect to x (dim x dim) or p (dim x n_params), written into `jac`.
using JacobianFn = std::function<void(double t, const ConstVectorRef& x, const ConstVectorRef& p, MatrixRef jac)>;

/// A named dynamical system dx/dt = f(t, x, p) with analytic Jacobians.
///
/// Parameters are positional; `param_names` only labels them for output.
/// Every built-in system is affine in p, but nothing here relies on that.
struct OdeSystem {
    std::string name;
    std::size_t dim = 0;
    std::vector<std::string> param_names;
    RhsFn rhs_fn;
    JacobianFn jac_x_fn;
    JacobianFn jac_p_fn;
    Vector true_params;
    Vector default_init;
    double default_t0 = 0.0;
    double default_tf = 1.0;
    double default_dt = 0.01;

    std::size_t n_params() const noexcept { return param_names.size(); }

    Vector rhs(double t, const ConstVectorRef& x, const ConstVectorRef& p) const {
        Vector dx(static_cast<Eigen::Index>(dim));
        rhs_fn(t, x, p, dx);
        return dx;
    }

    Matrix jac_x(double t, const ConstVectorRef& x, const ConstVectorRef& p) const {
        Matrix j = Matrix::Zero(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim));
        jac_x_fn(t, x, p, j);
        return j;
    }

    Matrix jac_p(double t, const ConstVectorRef& x, const ConstVectorRef& p) const {
        Matrix j = Matrix::Zero(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(n_params()));
        jac_p_fn(t, x, p, j);
        return j;
    }
};

/// Time grid plus one state row per grid point.
struct Trajectory {
    std::vector<double> times;
    RowMatrix states; // times.size() x dim

    std::size_t size() const noexcept { return times.size(); }
    std::size_t dim() const noexcept { return static_cast<std::size_t>(states.cols()); }
    bool empty() const noexcept { return times.empty(); }
};

// ---------------------------------------------------------------------------
// The four benchmark systems
// ---------------------------------------------------------------------------

/// Two-dimensional damped oscillator with cubic terms:
///   dx1/dt = p1 x1^3 + p2 x2^3,  dx2/dt = p3 x1^3 + p4 x2^3.
inline OdeSystem make_damped_cubic() {
    OdeSystem s;
    s.name = "damped_cubic";
    s.dim = 2;
    s.param_names = {"p1", "p2", "p3", "p4"};
    s.rhs_fn = [](double, const ConstVectorRef& x, const ConstVectorRef& p, VectorRef dx) {
        const double c1 = x[0] * x[0] * x[0];
        const double c2 = x[1] * x[1] * x[1];
        dx[0] = p[0] * c1 + p[1] * c2;
        dx[1] = p[2] * c1 + p[3] * c2;
    };
    s.jac_x_fn = [](double, const ConstVectorRef& x, const ConstVectorRef& p, MatrixRef j) {
        const double q1 = 3.0 * x[0] * x[0];
        const double q2 = 3.0 * x[1] * x[1];
        j(0, 0) = p[0] * q1;
        j(0, 1) = p[1] * q2;
        j(1, 0) = p[2] * q1;
        j(1, 1) = p[3] * q2;
    };
    s.jac_p_fn = [](double, const ConstVectorRef& x, const ConstVectorRef&, MatrixRef j) {
        const double c1 = x[0] * x[0] * x[0];
        const double c2 = x[1] * x[1] * x[1];
        j.setZero();
        j(0, 0) = c1;
        j(0, 1) = c2;
        j(1, 2) = c1;
        j(1, 3) = c2;
    };
    s.true_params = (Vector(4) << -0.1, 2.0, -2.0, -0.1).finished();
    s.default_init = (Vector(2) << 2.0, 0.0).finished();
    s.default_t0 = 0.0;
    s.default_tf = 10.0;
    s.default_dt = 0.01;
    return s;
}

/// Van der Pol oscillator in first-order form:
///   dx1/dt = x2,  dx2/dt = mu (1 - x1^2) x2 - x1.
inline OdeSystem make_van_der_pol() {
    OdeSystem s;
    s.name = "van_der_pol";
    s.dim = 2;
    s.param_names = {"mu"};
    s.rhs_fn = [](double, const ConstVectorRef& x, const ConstVectorRef& p, VectorRef dx) {
        dx[0] = x[1];
        dx[1] = p[0] * (1.0 - x[0] * x[0]) * x[1] - x[0];
    };
    s.jac_x_fn = [](double, const ConstVectorRef& x, const ConstVectorRef& p, MatrixRef j) {
        j(0, 0) = 0.0;
        j(0, 1) = 1.0;
        j(1, 0) = -2.0 * p[0] * x[0] * x[1] - 1.0;
        j(1, 1) = p[0] * (1.0 - x[0] * x[0]);
    };
    s.jac_p_fn = [](double, const ConstVectorRef& x, const ConstVectorRef&, MatrixRef j) {
        j(0, 0) = 0.0;
        j(1, 0) = (1.0 - x[0] * x[0]) * x[1];
    };
    s.true_params = (Vector(1) << 2.0).finished();
    s.default_init = (Vector(2) << 2.0, 0.0).finished();
    s.default_t0 = 0.0;
    s.default_tf = 20.0;
    s.default_dt = 0.01;
    return s;
}

/// Predator-prey model, parameters ordered (alpha, beta, gamma, delta):
///   dx/dt = alpha x - beta x y,  dy/dt = delta x y - gamma y.
inline OdeSystem make_lotka_volterra() {
    OdeSystem s;
    s.name = "lotka_volterra";
    s.dim = 2;
    s.param_names = {"alpha", "beta", "gamma", "delta"};
    s.rhs_fn = [](double, const ConstVectorRef& x, const ConstVectorRef& p, VectorRef dx) {
        dx[0] = p[0] * x[0] - p[1] * x[0] * x[1];
        dx[1] = p[3] * x[0] * x[1] - p[2] * x[1];
    };
    s.jac_x_fn = [](double, const ConstVectorRef& x, const ConstVectorRef& p, MatrixRef j) {
        j(0, 0) = p[0] - p[1] * x[1];
        j(0, 1) = -p[1] * x[0];
        j(1, 0) = p[3] * x[1];
        j(1, 1) = p[3] * x[0] - p[2];
    };
    s.jac_p_fn = [](double, const ConstVectorRef& x, const ConstVectorRef&, MatrixRef j) {
        j.setZero();
        j(0, 0) = x[0];
        j(0, 1) = -x[0] * x[1];
        j(1, 2) = -x[1];
        j(1, 3) = x[0] * x[1];
    };
    s.true_params = (Vector(4) << 1.0, 0.5, 0.5, 2.0).finished();
    s.default_init = (Vector(2) << 2.0, 1.0).finished();
    s.default_t0 = 0.0;
    s.default_tf = 10.0;
    s.default_dt = 0.01;
    return s;
}

/// Lorenz system, parameters ordered (sigma, rho, beta).
inline OdeSystem make_lorenz() {
    OdeSystem s;
    s.name = "lorenz";
    s.dim = 3;
    s.param_names = {"sigma", "rho", "beta"};
    s.rhs_fn = [](double, const ConstVectorRef& x, const ConstVectorRef& p, VectorRef dx) {
        dx[0] = p[0] * (x[1] - x[0]);
        dx[1] = x[0] * (p[1] - x[2]) - x[1];
        dx[2] = x[0] * x[1] - p[2] * x[2];
    };
    s.jac_x_fn = [](double, const ConstVectorRef& x, const ConstVectorRef& p, MatrixRef j) {
        j(0, 0) = -p[0];
        j(0, 1) = p[0];
        j(0, 2) = 0.0;
        j(1, 0) = p[1] - x[2];
        j(1, 1) = -1.0;
        j(1, 2) = -x[0];
        j(2, 0) = x[1];
        j(2, 1) = x[0];
        j(2, 2) = -p[2];
    };
    s.jac_p_fn = [](double, const ConstVectorRef& x, const ConstVectorRef&, MatrixRef j) {
        j.setZero();
        j(0, 0) = x[1] - x[0];
        j(1, 1) = x[0];
        j(2, 2) = -x[2];
    };
    s.true_params = (Vector(3) << 10.0, 28.0, 8.0 / 3.0).finished();
    s.default_init = (Vector(3) << -8.0, 7.0, 27.0).finished();
    s.default_t0 = 0.0;
    s.default_tf = 25.0;
    s.default_dt = 0.01;
    return s;
}

inline const std::vector<std::string>& system_names() {
    static const std::vector<std::string> names = {"damped_cubic", "van_der_pol", "lotka_volterra", "lorenz"};
    return names;
}

/// Looks a built-in system up by name. A few short aliases are accepted.
inline OdeSystem make_system(const std::string& name) {
    if (name == "damped_cubic" || name == "damped") return make_damped_cubic();
    if (name == "van_der_pol" || name == "vdp") return make_van_der_pol();
    if (name == "lotka_volterra" || name == "lv") return make_lotka_volterra();
    if (name == "lorenz") return make_lorenz();
    std::string valid;
    for (const auto& n : system_names()) valid += (valid.empty() ? "" : ", ") + n;
    throw Error(ErrorKind::UnknownSystem, "unknown system '" + name + "' (valid: " + valid + ")");
}

// ---------------------------------------------------------------------------
// Integration
// ---------------------------------------------------------------------------

namespace detail {

inline bool all_finite(const ConstVectorRef& v) noexcept { return v.allFinite(); }

[[noreturn]] inline void throw_non_finite(double t) {
    std::ostringstream msg;
    msg << std::setprecision(17) << "state became non-finite at t=" << t;
    throw Error(ErrorKind::NonFiniteState, msg.str());
}

} // namespace detail

/// One classical fourth-order Runge-Kutta step of size h from (t, x).
inline Vector rk4_step(const OdeSystem& system, double t, const ConstVectorRef& x, const ConstVectorRef& p, double h) {
    if (!(h > 0.0)) throw Error(ErrorKind::BadHyperparameter, "rk4_step requires h > 0");
    if (!detail::all_finite(x)) detail::throw_non_finite(t);

    const auto n = x.size();
    Vector k1(n), k2(n), k3(n), k4(n);
    system.rhs_fn(t, x, p, k1);
    if (!k1.allFinite()) detail::throw_non_finite(t);
    system.rhs_fn(t + 0.5 * h, x + 0.5 * h * k1, p, k2);
    if (!k2.allFinite()) detail::throw_non_finite(t + 0.5 * h);
    system.rhs_fn(t + 0.5 * h, x + 0.5 * h * k2, p, k3);
    if (!k3.allFinite()) detail::throw_non_finite(t + 0.5 * h);
    system.rhs_fn(t + h, x + h * k3, p, k4);
    if (!k4.allFinite()) detail::throw_non_finite(t + h);

    Vector out = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!out.allFinite()) detail::throw_non_finite(t + h);
    return out;
}

/// Grid t0, t0+dt, ..., ending exactly at tf. A non-integral span gets one
/// shortened final step.
inline std::vector<double> uniform_grid(double t0, double tf, double dt) {
    if (!(tf > t0)) throw Error(ErrorKind::BadHyperparameter, "time span requires tf > t0");
    if (!(dt > 0.0)) throw Error(ErrorKind::BadHyperparameter, "time step requires dt > 0");

    const double ratio = (tf - t0) / dt;
    auto steps = static_cast<std::size_t>(std::floor(ratio));
    const bool integral = std::abs(ratio - std::round(ratio)) <= 1e-9 * std::max(1.0, ratio);
    if (integral) steps = static_cast<std::size_t>(std::llround(ratio));

    std::vector<double> grid;
    grid.reserve(steps + 2);
    for (std::size_t j = 0; j <= steps; ++j) grid.push_back(t0 + static_cast<double>(j) * dt);
    if (integral) {
        grid.back() = tf;
    } else {
        grid.push_back(tf);
    }
    return grid;
}

/// Fixed-step RK4 from (t0, x0) to tf on `uniform_grid(t0, tf, dt)`.
inline Trajectory integrate(const OdeSystem& system, const ConstVectorRef& x0, const ConstVectorRef& p, double t0,
                            double tf, double dt) {
    if (static_cast<std::size_t>(x0.size()) != system.dim)
        throw Error(ErrorKind::DimensionMismatch, "initial state length does not match system dimension");
    if (static_cast<std::size_t>(p.size()) != system.n_params())
        throw Error(ErrorKind::LengthMismatch, "parameter vector length does not match system");

    Trajectory traj;
    traj.times = uniform_grid(t0, tf, dt);
    traj.states.resize(static_cast<Eigen::Index>(traj.times.size()), static_cast<Eigen::Index>(system.dim));
    Vector x = x0;
    if (!x.allFinite()) detail::throw_non_finite(t0);
    traj.states.row(0) = x.transpose();
    for (std::size_t j = 1; j < traj.times.size(); ++j) {
        const double h = traj.times[j] - traj.times[j - 1];
        x = rk4_step(system, traj.times[j - 1], x, p, h);
        traj.states.row(static_cast<Eigen::Index>(j)) = x.transpose();
    }
    return traj;
}

/// Integrates with the system's default initial state, span and step.
inline Trajectory integrate_default(const OdeSystem& system, const ConstVectorRef& p) {
    return integrate(system, system.default_init, p, system.default_t0, system.default_tf, system.default_dt);
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Header `t,x1,...,xm`; 17 significant digits so values round-trip exactly.
inline void write_trajectory_csv(std::ostream& out, const Trajectory& traj) {
    out << "t";
    for (std::size_t i = 0; i < traj.dim(); ++i) out << ",x" << (i + 1);
    out << '\n';
    out << std::setprecision(17);
    for (std::size_t j = 0; j < traj.size(); ++j) {
        out << traj.times[j];
        for (std::size_t i = 0; i < traj.dim(); ++i)
            out << ',' << traj.states(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i));
        out << '\n';
    }
}

inline void write_trajectory_csv(const std::string& path, const Trajectory& traj) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorKind::IoError, "cannot open '" + path + "' for writing");
    write_trajectory_csv(out, traj);
    if (!out) throw Error(ErrorKind::IoError, "failed writing '" + path + "'");
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string field;
    std::istringstream ss(line);
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    return fields;
}

inline double parse_double(const std::string& text, std::size_t line_no) {
    std::size_t used = 0;
    double value = 0.0;
    try {
        value = std::stod(text, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    while (used < text.size() && (text[used] == ' ' || text[used] == '\r')) ++used;
    if (text.empty() || used != text.size())
        throw Error(ErrorKind::ParseError, "line " + std::to_string(line_no) + ": cannot parse number '" + text + "'");
    return value;
}

} // namespace detail

/// Reads a trajectory CSV written by `write_trajectory_csv` (or any file with
/// a header row and a leading time column). Parse errors name the line.
inline Trajectory read_trajectory_csv(std::istream& in) {
    std::string line;
    std::size_t line_no = 0;
    if (!std::getline(in, line)) throw Error(ErrorKind::ParseError, "line 1: missing header");
    ++line_no;
    const auto header = detail::split_csv_line(line);
    if (header.size() < 2 || header[0] != "t")
        throw Error(ErrorKind::ParseError, "line 1: header must start with 't' followed by state columns");
    const std::size_t dim = header.size() - 1;

    std::vector<double> times;
    std::vector<double> flat;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = detail::split_csv_line(line);
        if (fields.size() != dim + 1)
            throw Error(ErrorKind::ParseError, "line " + std::to_string(line_no) + ": expected " +
                                                   std::to_string(dim + 1) + " fields, found " +
                                                   std::to_string(fields.size()));
        times.push_back(detail::parse_double(fields[0], line_no));
        for (std::size_t i = 1; i < fields.size(); ++i) flat.push_back(detail::parse_double(fields[i], line_no));
        if (times.size() > 1 && !(times.back() > times[times.size() - 2]))
            throw Error(ErrorKind::ParseError, "line " + std::to_string(line_no) + ": times must be strictly increasing");
    }
    if (times.empty()) throw Error(ErrorKind::EmptyTrajectory, "trajectory file has no data rows");

    Trajectory traj;
    traj.times = std::move(times);
    traj.states = Eigen::Map<RowMatrix>(flat.data(), static_cast<Eigen::Index>(traj.times.size()),
                                        static_cast<Eigen::Index>(dim));
    return traj;
}

inline Trajectory read_trajectory_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::IoError, "cannot open '" + path + "'");
    return read_trajectory_csv(in);
}

} // namespace odestim
