#pragma once

#include <odestim/dynamics.hpp>
#include <odestim/error.hpp>
#include <odestim/rng.hpp>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace odestim {

enum class Activation { ReLU, Logistic, Tanh };

inline std::string to_string(Activation a) {
    switch (a) {
    case Activation::ReLU: return "relu";
    case Activation::Logistic: return "logistic";
    case Activation::Tanh: return "tanh";
    }
    return "tanh";
}

inline Activation parse_activation(const std::string& name) {
    if (name == "relu") return Activation::ReLU;
    if (name == "logistic" || name == "sigmoid") return Activation::Logistic;
    if (name == "tanh") return Activation::Tanh;
    throw Error(ErrorKind::ConfigError, "unknown activation '" + name + "' (valid: relu, logistic, tanh)");
}

/// Single-hidden-layer perceptron with a linear output layer:
///
///   y = out_mean + out_std .* (W2 * act(W1 * (in_scale .* x + in_shift) + b1) + b2)
///
/// The affine input/output maps are fixed normalisation constants, not
/// trainable parameters; `flatten` covers W1, b1, W2, b2 only.
struct Mlp {
    std::size_t in_dim = 1;
    std::size_t hidden = 1;
    std::size_t out_dim = 1;
    Activation activation = Activation::Tanh;
    Matrix W1; // hidden x in_dim
    Vector b1; // hidden
    Matrix W2; // out_dim x hidden
    Vector b2; // out_dim
    Vector in_scale;  // in_dim
    Vector in_shift;  // in_dim
    Vector out_mean;  // out_dim
    Vector out_std;   // out_dim

    std::size_t param_count() const noexcept { return hidden * in_dim + hidden + out_dim * hidden + out_dim; }

    /// Maps [t0, tf] onto [-1, 1] (time-input nets only).
    void set_time_window(double t0, double tf) {
        in_scale = Vector::Constant(static_cast<Eigen::Index>(in_dim), 2.0 / (tf - t0));
        in_shift = Vector::Constant(static_cast<Eigen::Index>(in_dim), -(tf + t0) / (tf - t0));
    }

    void set_output_scale(const ConstVectorRef& mean, const ConstVectorRef& stddev) {
        if (static_cast<std::size_t>(mean.size()) != out_dim || static_cast<std::size_t>(stddev.size()) != out_dim)
            throw Error(ErrorKind::LengthMismatch, "output scale length does not match network output");
        out_mean = mean;
        out_std = stddev;
    }
};

/// Glorot-uniform weights in [-a, a], a = sqrt(6 / (fan_in + fan_out)),
/// zero biases, identity input/output maps. W1 is drawn before W2, each
/// row-major, from one seeded stream.
inline Mlp init(std::size_t in_dim, std::size_t hidden, std::size_t out_dim, Activation activation,
                std::uint64_t seed) {
    if (in_dim < 1 || hidden < 1 || out_dim < 1)
        throw Error(ErrorKind::BadHyperparameter, "network dimensions must be at least 1");
    Mlp net;
    net.in_dim = in_dim;
    net.hidden = hidden;
    net.out_dim = out_dim;
    net.activation = activation;
    const auto h = static_cast<Eigen::Index>(hidden);
    const auto i = static_cast<Eigen::Index>(in_dim);
    const auto o = static_cast<Eigen::Index>(out_dim);
    net.W1.resize(h, i);
    net.W2.resize(o, h);
    net.b1 = Vector::Zero(h);
    net.b2 = Vector::Zero(o);
    net.in_scale = Vector::Ones(i);
    net.in_shift = Vector::Zero(i);
    net.out_mean = Vector::Zero(o);
    net.out_std = Vector::Ones(o);

    Rng rng(seed);
    const double a1 = std::sqrt(6.0 / static_cast<double>(in_dim + hidden));
    for (Eigen::Index r = 0; r < h; ++r)
        for (Eigen::Index c = 0; c < i; ++c) net.W1(r, c) = rng.uniform(-a1, a1);
    const double a2 = std::sqrt(6.0 / static_cast<double>(hidden + out_dim));
    for (Eigen::Index r = 0; r < o; ++r)
        for (Eigen::Index c = 0; c < h; ++c) net.W2(r, c) = rng.uniform(-a2, a2);
    return net;
}

/// Re-draws the first layer of a scalar-input net so each hidden unit has its
/// transition at a point drawn uniformly in [-1, 1] (the normalised input
/// window) with slope magnitude uniform in [0.2, 1] * max_slope.
inline void spread_first_layer(Mlp& net, double max_slope, std::uint64_t seed) {
    if (net.in_dim != 1) throw Error(ErrorKind::ShapeMismatch, "spread_first_layer needs a scalar-input network");
    if (!(max_slope > 0.0)) throw Error(ErrorKind::BadHyperparameter, "max_slope must be positive");
    Rng rng(seed);
    for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(net.hidden); ++j) {
        const double sign = rng.uniform01() < 0.5 ? -1.0 : 1.0;
        const double slope = sign * rng.uniform(0.2, 1.0) * max_slope;
        const double centre = rng.uniform(-1.0, 1.0);
        net.W1(j, 0) = slope;
        net.b1[j] = -slope * centre;
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

namespace detail {

inline void activate(Activation a, const Matrix& z, Matrix& h) { // h may alias z
    switch (a) {
    case Activation::ReLU: h = z.array().max(0.0).matrix(); break;
    case Activation::Logistic: h = (1.0 / (1.0 + (-z.array()).exp())).matrix(); break;
    case Activation::Tanh: h = (1.0 - 2.0 / ((2.0 * z.array()).exp() + 1.0)).matrix(); break;
    }
}


} // namespace detail

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

/// Intermediate values of one batched forward pass, kept for backward.
/// Columns index batch points. Buffers are reused when a tape is refilled
/// with the same batch size.
struct ForwardTape {
    Matrix xn;   // in_dim x K normalised inputs
    Matrix h;    // hidden x K activations
    Matrix yn;   // out_dim x K normalised outputs
    RowMatrix y; // K x out_dim outputs in data units
    mutable Matrix dz; // hidden x K scratch for backward
    mutable Matrix g;  // out_dim x K scratch for backward
};

/// Batched forward pass over inputs given as K x in_dim rows, into `tape`.
inline void forward_into(const Mlp& net, const Eigen::Ref<const RowMatrix>& inputs, ForwardTape& tape) {
    if (static_cast<std::size_t>(inputs.cols()) != net.in_dim && inputs.rows() > 0)
        throw Error(ErrorKind::ShapeMismatch, "input width does not match network");
    const Eigen::Index k = inputs.rows();
    tape.xn.resize(static_cast<Eigen::Index>(net.in_dim), k);
    tape.xn = ((inputs.transpose().array().colwise() * net.in_scale.array()).colwise() + net.in_shift.array()).matrix();
    tape.h.resize(static_cast<Eigen::Index>(net.hidden), k);
    tape.h.noalias() = net.W1 * tape.xn;
    tape.h.colwise() += net.b1;
    detail::activate(net.activation, tape.h, tape.h);
    tape.yn.resize(static_cast<Eigen::Index>(net.out_dim), k);
    tape.yn.noalias() = net.W2 * tape.h;
    tape.yn.colwise() += net.b2;
    tape.y.resize(k, static_cast<Eigen::Index>(net.out_dim));
    tape.y = ((tape.yn.array().colwise() * net.out_std.array()).colwise() + net.out_mean.array()).matrix().transpose();
}

inline ForwardTape forward_tape(const Mlp& net, const Eigen::Ref<const RowMatrix>& inputs) {
    ForwardTape tape;
    forward_into(net, inputs, tape);
    return tape;
}

inline RowMatrix time_inputs(const std::vector<double>& times) {
    return Eigen::Map<const Vector>(times.data(), static_cast<Eigen::Index>(times.size()));
}

inline ForwardTape forward_tape(const Mlp& net, const std::vector<double>& times) {
    if (net.in_dim != 1) throw Error(ErrorKind::ShapeMismatch, "time-input API needs in_dim == 1");
    return forward_tape(net, time_inputs(times));
}

/// K x out_dim matrix; row i is the network output at times[i].
inline RowMatrix forward_batch(const Mlp& net, const std::vector<double>& times) {
    return forward_tape(net, times).y;
}

inline Vector forward(const Mlp& net, double t) {
    return forward_batch(net, std::vector<double>{t}).row(0).transpose();
}

struct Gradients {
    Vector params;      // ordered as flatten()
    Vector input_grads; // K entries (scalar-input nets), d/dt of sum_i out_grads[i] . y(t_i)
};

/// Reverse-mode gradient of sum_i out_grads.row(i) . y(t_i) using a tape
/// from `forward_into`. ReLU's slope at exactly zero is taken as zero.
inline void backward_into(const Mlp& net, const ForwardTape& tape, const Eigen::Ref<const RowMatrix>& out_grads,
                          Gradients& out) {
    const Eigen::Index k = tape.h.cols();
    if (out_grads.rows() != k || static_cast<std::size_t>(out_grads.cols()) != net.out_dim)
        throw Error(ErrorKind::ShapeMismatch, "out_grads must be " + std::to_string(k) + " x " +
                                                  std::to_string(net.out_dim));
    // d/dyn = out_std .* d/dy
    tape.g.resize(static_cast<Eigen::Index>(net.out_dim), k);
    tape.g = (out_grads.transpose().array().colwise() * net.out_std.array()).matrix();
    tape.dz.resize(static_cast<Eigen::Index>(net.hidden), k);
    tape.dz.noalias() = net.W2.transpose() * tape.g;
    switch (net.activation) {
    case Activation::ReLU: tape.dz.array() *= (tape.h.array() > 0.0).cast<double>(); break;
    case Activation::Logistic: tape.dz.array() *= tape.h.array() * (1.0 - tape.h.array()); break;
    case Activation::Tanh: tape.dz.array() *= 1.0 - tape.h.array().square(); break;
    }

    out.params.resize(static_cast<Eigen::Index>(net.param_count()));
    const auto hid = static_cast<Eigen::Index>(net.hidden);
    const auto ind = static_cast<Eigen::Index>(net.in_dim);
    const auto outd = static_cast<Eigen::Index>(net.out_dim);
    Eigen::Index off = 0;
    // row-major views into the flat vector
    Eigen::Map<RowMatrix>(out.params.data() + off, hid, ind).noalias() = tape.dz * tape.xn.transpose();
    off += hid * ind;
    out.params.segment(off, hid) = tape.dz.rowwise().sum();
    off += hid;
    Eigen::Map<RowMatrix>(out.params.data() + off, outd, hid).noalias() = tape.g * tape.h.transpose();
    off += outd * hid;
    out.params.segment(off, outd) = tape.g.rowwise().sum();

    if (net.in_dim == 1) {
        out.input_grads.resize(k);
        out.input_grads.transpose().noalias() = net.W1.col(0).transpose() * tape.dz;
        out.input_grads *= net.in_scale[0];
    } else {
        out.input_grads.resize(0);
    }
}

inline Gradients backward(const Mlp& net, const ForwardTape& tape, const Eigen::Ref<const RowMatrix>& out_grads) {
    Gradients out;
    backward_into(net, tape, out_grads, out);
    return out;
}

inline Gradients backward(const Mlp& net, const std::vector<double>& times, const Eigen::Ref<const RowMatrix>& out_grads) {
    if (out_grads.rows() != static_cast<Eigen::Index>(times.size()) ||
        static_cast<std::size_t>(out_grads.cols()) != net.out_dim)
        throw Error(ErrorKind::ShapeMismatch, "out_grads shape does not match forward_batch output");
    return backward(net, forward_tape(net, times), out_grads);
}

// ---------------------------------------------------------------------------
// Flat parameter view
// ---------------------------------------------------------------------------

/// W1 row-major, b1, W2 row-major, b2.
inline Vector flatten(const Mlp& net) {
    Vector v(static_cast<Eigen::Index>(net.param_count()));
    Eigen::Index off = 0;
    for (Eigen::Index r = 0; r < net.W1.rows(); ++r)
        for (Eigen::Index c = 0; c < net.W1.cols(); ++c) v[off++] = net.W1(r, c);
    v.segment(off, net.b1.size()) = net.b1;
    off += net.b1.size();
    for (Eigen::Index r = 0; r < net.W2.rows(); ++r)
        for (Eigen::Index c = 0; c < net.W2.cols(); ++c) v[off++] = net.W2(r, c);
    v.segment(off, net.b2.size()) = net.b2;
    return v;
}

inline Mlp unflatten(const Mlp& net, const ConstVectorRef& params) {
    if (static_cast<std::size_t>(params.size()) != net.param_count())
        throw Error(ErrorKind::LengthMismatch, "expected " + std::to_string(net.param_count()) +
                                                   " parameters, got " + std::to_string(params.size()));
    Mlp out = net;
    Eigen::Index off = 0;
    for (Eigen::Index r = 0; r < out.W1.rows(); ++r)
        for (Eigen::Index c = 0; c < out.W1.cols(); ++c) out.W1(r, c) = params[off++];
    out.b1 = params.segment(off, out.b1.size());
    off += out.b1.size();
    for (Eigen::Index r = 0; r < out.W2.rows(); ++r)
        for (Eigen::Index c = 0; c < out.W2.cols(); ++c) out.W2(r, c) = params[off++];
    out.b2 = params.segment(off, out.b2.size());
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------
//
// <prefix>.params.csv : header "index,value", one row per flattened parameter
// <prefix>.net.txt    : "key = value" lines; vector values comma-separated
//   in_dim, hidden, out_dim, activation, in_scale, in_shift, out_mean, out_std

namespace detail {

inline std::string join(const ConstVectorRef& v) {
    std::ostringstream s;
    s << std::setprecision(17);
    for (Eigen::Index i = 0; i < v.size(); ++i) s << (i ? "," : "") << v[i];
    return s.str();
}

inline Vector split_numbers(const std::string& text, std::size_t expected, const std::string& key) {
    std::vector<double> values;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) values.push_back(parse_double(item, 0));
    if (values.size() != expected)
        throw Error(ErrorKind::ParseError, "checkpoint key '" + key + "' expects " + std::to_string(expected) + " values");
    return Eigen::Map<Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

} // namespace detail

inline void save_checkpoint(const Mlp& net, const std::string& prefix) {
    {
        std::ofstream out(prefix + ".net.txt");
        if (!out) throw Error(ErrorKind::IoError, "cannot write '" + prefix + ".net.txt'");
        out << "in_dim = " << net.in_dim << '\n'
            << "hidden = " << net.hidden << '\n'
            << "out_dim = " << net.out_dim << '\n'
            << "activation = " << to_string(net.activation) << '\n'
            << "in_scale = " << detail::join(net.in_scale) << '\n'
            << "in_shift = " << detail::join(net.in_shift) << '\n'
            << "out_mean = " << detail::join(net.out_mean) << '\n'
            << "out_std = " << detail::join(net.out_std) << '\n';
    }
    std::ofstream out(prefix + ".params.csv");
    if (!out) throw Error(ErrorKind::IoError, "cannot write '" + prefix + ".params.csv'");
    const Vector v = flatten(net);
    out << "index,value\n" << std::setprecision(17);
    for (Eigen::Index i = 0; i < v.size(); ++i) out << i << ',' << v[i] << '\n';
}

inline Mlp load_checkpoint(const std::string& prefix) {
    std::ifstream hdr(prefix + ".net.txt");
    if (!hdr) throw Error(ErrorKind::IoError, "cannot open '" + prefix + ".net.txt'");
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(hdr, line)) {
        line = detail::trim(line);
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw Error(ErrorKind::ParseError, "checkpoint header line without '='");
        kv[detail::trim(line.substr(0, eq))] = detail::trim(line.substr(eq + 1));
    }
    auto need = [&](const std::string& key) -> const std::string& {
        auto it = kv.find(key);
        if (it == kv.end()) throw Error(ErrorKind::ParseError, "checkpoint header missing '" + key + "'");
        return it->second;
    };
    const auto in_dim = static_cast<std::size_t>(std::stoul(need("in_dim")));
    const auto hidden = static_cast<std::size_t>(std::stoul(need("hidden")));
    const auto out_dim = static_cast<std::size_t>(std::stoul(need("out_dim")));
    Mlp net = init(in_dim, hidden, out_dim, parse_activation(need("activation")), 0);
    net.in_scale = detail::split_numbers(need("in_scale"), in_dim, "in_scale");
    net.in_shift = detail::split_numbers(need("in_shift"), in_dim, "in_shift");
    net.out_mean = detail::split_numbers(need("out_mean"), out_dim, "out_mean");
    net.out_std = detail::split_numbers(need("out_std"), out_dim, "out_std");

    std::ifstream in(prefix + ".params.csv");
    if (!in) throw Error(ErrorKind::IoError, "cannot open '" + prefix + ".params.csv'");
    std::getline(in, line);
    std::vector<double> values;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::trim(line).empty()) continue;
        const auto fields = detail::split_csv_line(detail::trim(line));
        if (fields.size() != 2) throw Error(ErrorKind::ParseError, "line " + std::to_string(line_no) + ": expected index,value");
        values.push_back(detail::parse_double(fields[1], line_no));
    }
    return unflatten(net, Eigen::Map<Vector>(values.data(), static_cast<Eigen::Index>(values.size())));
}

} // namespace odestim
