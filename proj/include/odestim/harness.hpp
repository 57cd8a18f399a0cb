#pragma once

#include <odestim/dynamics.hpp>
#include <odestim/error.hpp>
#include <odestim/estimator.hpp>
#include <odestim/noise.hpp>
#include <odestim/rng.hpp>

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

namespace odestim {

namespace fs = std::filesystem;

/// One noise kind and the intensities it is swept over.
struct NoiseSweep {
    NoiseKind kind = NoiseKind::White;
    std::vector<double> intensities;
};

/// Estimator hyperparameters as they appear in a config file. `p_init`, when
/// set, overrides `p_init_scale * true_params`.
struct FitSettings {
    std::size_t net_hidden = 64;
    Activation activation = Activation::Tanh;
    AdamHyper adam;
    std::size_t steps = 20000;
    std::size_t warmup_steps = 0;
    std::size_t param_steps = 0;
    double param_lr = 0.01;
    double lambda_data = 1.0;
    double lambda_ode = 1.0;
    double lambda_ic = 1.0;
    double huber_delta = 1.0;
    ResidualScheme residual = ResidualScheme::Trapezoid;
    std::size_t residual_window = 1;
    double init_slope = 0.0;
    double final_lr_fraction = 1.0;
    std::size_t patience = 0;
    double fd_step = 1e-6;
    double p_init_scale = 0.5;
    std::optional<std::vector<double>> p_init;
};

struct ExperimentConfig {
    std::string system = "damped_cubic";
    Estimator estimator = Estimator::Collocation;
    NoiseMode mode = NoiseMode::Multiplicative;
    std::vector<NoiseSweep> sweeps{{NoiseKind::White, {1e-4, 1e-3, 1e-2, 1e-1}}, {NoiseKind::Pink, {1e-3}}};
    /// Intensity of the Gaussian-vs-pink comparison table.
    double comparison_eta = 1e-3;
    std::size_t repetitions = 10;
    std::uint64_t base_seed = 0;
    std::size_t jobs = 1;
    std::string output = "results";
    FitSettings fit;
};

namespace detail {

template <typename T>
T yaml_as(const YAML::Node& node, const std::string& key) {
    try {
        return node.as<T>();
    } catch (const YAML::Exception&) {
        throw Error(ErrorKind::ConfigError, "bad value for '" + key + "'");
    }
}

inline void reject_unknown(const YAML::Node& map, const std::set<std::string>& known, const std::string& where) {
    if (!map.IsMap()) throw Error(ErrorKind::ConfigError, "'" + where + "' must be a mapping");
    for (const auto& kv : map) {
        const auto key = kv.first.as<std::string>();
        if (!known.count(key)) {
            std::string valid;
            for (const auto& k : known) valid += (valid.empty() ? "" : ", ") + k;
            throw Error(ErrorKind::ConfigError,
                        "unknown key '" + key + "' in " + where + " (valid: " + valid + ")");
        }
    }
}

inline FitSettings parse_fit(const YAML::Node& n) {
    static const std::set<std::string> keys{
        "net_hidden", "activation", "lr",          "beta1",       "beta2",      "eps",        "steps",
        "warmup_steps", "param_steps", "param_lr", "lambda_data", "lambda_ode", "lambda_ic", "huber_delta",
        "residual",   "residual_window", "init_slope", "final_lr_fraction", "patience", "fd_step", "p_init_scale", "p_init"};
    reject_unknown(n, keys, "fit");
    FitSettings f;
    auto get = [&](const char* key, auto& field) {
        if (n[key]) field = yaml_as<std::decay_t<decltype(field)>>(n[key], key);
    };
    get("net_hidden", f.net_hidden);
    if (n["activation"]) f.activation = parse_activation(yaml_as<std::string>(n["activation"], "activation"));
    get("lr", f.adam.lr);
    get("beta1", f.adam.beta1);
    get("beta2", f.adam.beta2);
    get("eps", f.adam.eps);
    get("steps", f.steps);
    get("warmup_steps", f.warmup_steps);
    get("param_steps", f.param_steps);
    get("param_lr", f.param_lr);
    get("lambda_data", f.lambda_data);
    get("lambda_ode", f.lambda_ode);
    get("lambda_ic", f.lambda_ic);
    get("huber_delta", f.huber_delta);
    if (n["residual"]) f.residual = parse_residual_scheme(yaml_as<std::string>(n["residual"], "residual"));
    get("residual_window", f.residual_window);
    get("init_slope", f.init_slope);
    get("final_lr_fraction", f.final_lr_fraction);
    get("patience", f.patience);
    get("fd_step", f.fd_step);
    get("p_init_scale", f.p_init_scale);
    if (n["p_init"]) f.p_init = yaml_as<std::vector<double>>(n["p_init"], "p_init");
    return f;
}

} // namespace detail

/// Checks the invariants that do not depend on the data.
inline void validate(const ExperimentConfig& cfg) {
    const OdeSystem sys = make_system(cfg.system);
    if (cfg.repetitions < 1) throw Error(ErrorKind::ConfigError, "repetitions must be >= 1");
    if (cfg.sweeps.empty()) throw Error(ErrorKind::ConfigError, "no noise intensities to run");
    for (const auto& s : cfg.sweeps)
        for (double eta : s.intensities)
            if (!(eta >= 0.0) || !std::isfinite(eta))
                throw Error(ErrorKind::ConfigError, "noise intensities must be finite and >= 0");
    if (!(cfg.comparison_eta >= 0.0)) throw Error(ErrorKind::ConfigError, "comparison_eta must be >= 0");
    if (cfg.fit.p_init && cfg.fit.p_init->size() != sys.n_params())
        throw Error(ErrorKind::ConfigError, "p_init has " + std::to_string(cfg.fit.p_init->size()) +
                                                " entries; system '" + sys.name + "' has " +
                                                std::to_string(sys.n_params()) + " parameters");
    if (cfg.fit.net_hidden < 1) throw Error(ErrorKind::ConfigError, "net_hidden must be >= 1");
    if (cfg.fit.residual_window < 1) throw Error(ErrorKind::ConfigError, "residual_window must be >= 1");
    if (!(cfg.fit.final_lr_fraction > 0.0 && cfg.fit.final_lr_fraction <= 1.0))
        throw Error(ErrorKind::ConfigError, "final_lr_fraction must lie in (0, 1]");
}

/// Config file: YAML with top-level keys system, estimator, repetitions,
/// base_seed, jobs, output, noise {mode, comparison_eta, white, pink} and
/// fit {...}. Every key is optional; unknown keys are errors.
inline ExperimentConfig parse_config(const std::string& text) {
    YAML::Node root;
    try {
        root = YAML::Load(text);
    } catch (const YAML::Exception& e) {
        throw Error(ErrorKind::ConfigError, std::string("malformed config: ") + e.what());
    }
    ExperimentConfig cfg;
    if (root.IsNull()) return cfg;
    detail::reject_unknown(root, {"system", "estimator", "repetitions", "base_seed", "jobs", "output", "noise", "fit"},
                           "config");
    if (root["system"]) cfg.system = make_system(detail::yaml_as<std::string>(root["system"], "system")).name;
    if (root["estimator"]) cfg.estimator = parse_estimator(detail::yaml_as<std::string>(root["estimator"], "estimator"));
    if (root["repetitions"]) {
        const long reps = detail::yaml_as<long>(root["repetitions"], "repetitions");
        if (reps < 1) throw Error(ErrorKind::ConfigError, "repetitions must be >= 1");
        cfg.repetitions = static_cast<std::size_t>(reps);
    }
    if (root["base_seed"]) cfg.base_seed = detail::yaml_as<std::uint64_t>(root["base_seed"], "base_seed");
    if (root["jobs"]) cfg.jobs = detail::yaml_as<std::size_t>(root["jobs"], "jobs");
    if (root["output"]) cfg.output = detail::yaml_as<std::string>(root["output"], "output");
    if (const auto noise = root["noise"]) {
        detail::reject_unknown(noise, {"mode", "comparison_eta", "white", "pink"}, "noise");
        if (noise["mode"]) cfg.mode = parse_noise_mode(detail::yaml_as<std::string>(noise["mode"], "mode"));
        if (noise["comparison_eta"])
            cfg.comparison_eta = detail::yaml_as<double>(noise["comparison_eta"], "comparison_eta");
        if (noise["white"] || noise["pink"]) {
            cfg.sweeps.clear();
            for (auto kind : {NoiseKind::White, NoiseKind::Pink}) {
                const auto key = to_string(kind);
                if (noise[key]) cfg.sweeps.push_back({kind, detail::yaml_as<std::vector<double>>(noise[key], key)});
            }
        }
    }
    if (root["fit"]) cfg.fit = detail::parse_fit(root["fit"]);
    validate(cfg);
    return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::IoError, "cannot open config '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

/// Estimation problem for one run of `cfg` on the given observations.
inline EstimationProblem make_problem(const ExperimentConfig& cfg, const OdeSystem& sys, Trajectory observations,
                                      std::uint64_t seed) {
    EstimationProblem pr;
    pr.system = sys;
    pr.observations = std::move(observations);
    pr.x0 = sys.default_init;
    pr.huber.delta = cfg.fit.huber_delta;
    pr.lambda_data = cfg.fit.lambda_data;
    pr.lambda_ode = cfg.fit.lambda_ode;
    pr.lambda_ic = cfg.fit.lambda_ic;
    pr.net_hidden = cfg.fit.net_hidden;
    pr.net_activation = cfg.fit.activation;
    if (cfg.fit.p_init)
        pr.p_init = Eigen::Map<const Vector>(cfg.fit.p_init->data(), static_cast<Eigen::Index>(cfg.fit.p_init->size()));
    else
        pr.p_init = cfg.fit.p_init_scale * sys.true_params;
    pr.adam = cfg.fit.adam;
    pr.steps = cfg.fit.steps;
    pr.seed = seed;
    pr.residual = cfg.fit.residual;
    pr.residual_window = cfg.fit.residual_window;
    pr.param_lr = cfg.fit.param_lr;
    pr.warmup_steps = cfg.fit.warmup_steps;
    pr.param_steps = cfg.fit.param_steps;
    pr.init_slope = cfg.fit.init_slope;
    pr.final_lr_fraction = cfg.fit.final_lr_fraction;
    pr.patience = cfg.fit.patience;
    pr.fd_step = cfg.fit.fd_step;
    return pr;
}

/// Shortest decimal text that reads back to the same double.
inline std::string format_double(double v) {
    char buf[32];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

/// Noise seed of one run: base_seed + FNV-1a of "kind|eta|rep" passed through
/// the SplitMix64 finaliser. eta enters in its shortest round-trip decimal
/// form, so the value is identical on every platform.
inline std::uint64_t run_seed(std::uint64_t base_seed, NoiseKind kind, double eta, std::size_t rep) {
    const std::string key = to_string(kind) + "|" + format_double(eta) + "|" + std::to_string(rep);
    return base_seed + mix64(fnv1a(key));
}

struct RunRecord {
    std::string system;
    Estimator estimator = Estimator::Collocation;
    NoiseKind kind = NoiseKind::White;
    NoiseMode mode = NoiseMode::Multiplicative;
    double eta = 0.0;
    std::size_t rep = 0;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    std::vector<std::string> param_names;
    Vector p_hat;
    double final_huber = 0.0;
    std::size_t steps = 0;
    double wall_time = 0.0;
    // kept in memory for plotting, not serialised
    std::optional<EstimateResult> result;
    std::optional<Trajectory> noisy;
};

/// Called after each finished run with (record, finished count, total count).
using ProgressFn = std::function<void(const RunRecord&, std::size_t, std::size_t)>;

/// Every (kind, eta, rep) run of the config, in sweep order. Runs execute on
/// up to cfg.jobs threads; the result order never depends on scheduling.
/// Numerical failures are recorded in the run, not thrown.
inline std::vector<RunRecord> run_experiment(const ExperimentConfig& cfg, const ProgressFn& progress = {}) {
    validate(cfg);
    const OdeSystem sys = make_system(cfg.system);
    const Trajectory clean = integrate_default(sys, sys.true_params);

    std::vector<RunRecord> runs;
    for (const auto& sweep : cfg.sweeps)
        for (double eta : sweep.intensities)
            for (std::size_t rep = 0; rep < cfg.repetitions; ++rep) {
                RunRecord r;
                r.system = sys.name;
                r.estimator = cfg.estimator;
                r.kind = sweep.kind;
                r.mode = cfg.mode;
                r.eta = eta;
                r.rep = rep;
                r.seed = run_seed(cfg.base_seed, sweep.kind, eta, rep);
                r.param_names = sys.param_names;
                runs.push_back(std::move(r));
            }

    auto execute = [&](RunRecord& r) {
        Trajectory noisy = corrupt(clean, {r.kind, r.eta, r.mode, r.seed});
        try {
            EstimationProblem pr = make_problem(cfg, sys, noisy, mix64(r.seed));
            EstimateResult res = fit(pr, cfg.estimator);
            r.p_hat = res.p_hat;
            r.final_huber = res.final_huber;
            r.steps = res.steps_run;
            r.wall_time = res.wall_time;
            r.ok = r.p_hat.allFinite();
            if (!r.ok) r.error = "non-finite estimate";
            r.result = std::move(res);
        } catch (const Error& e) {
            switch (e.kind()) {
            case ErrorKind::NonFiniteLoss:
            case ErrorKind::NonFiniteGradient:
            case ErrorKind::NonFiniteState:
                r.ok = false;
                r.error = e.what();
                break;
            default:
                throw;
            }
        }
        r.noisy = std::move(noisy);
    };

    std::atomic<std::size_t> next{0};
    std::size_t done = 0;
    std::mutex mu;
    std::exception_ptr failure;
    auto worker = [&] {
        for (std::size_t i; (i = next++) < runs.size();) {
            try {
                execute(runs[i]);
            } catch (...) {
                std::lock_guard lock(mu);
                if (!failure) failure = std::current_exception();
                next = runs.size();
                return;
            }
            std::lock_guard lock(mu);
            ++done;
            if (progress) progress(runs[i], done, runs.size());
        }
    };
    const std::size_t jobs = std::clamp<std::size_t>(cfg.jobs, 1, std::max<std::size_t>(runs.size(), 1));
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (failure) std::rethrow_exception(failure);
    return runs;
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

struct AggregateRow {
    std::string system;
    Estimator estimator = Estimator::Collocation;
    NoiseKind kind = NoiseKind::White;
    double eta = 0.0;
    std::vector<std::string> param_names;
    Vector mean;
    Vector stddev;  // sample std, 0 for a single run
    double mean_huber = 0.0;
    std::size_t runs = 0;
    std::size_t failed = 0;
};

using AggregateResult = std::vector<AggregateRow>;

namespace detail {

// Sorting before summation makes the result independent of run order.
inline double sorted_sum(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    double s = 0.0;
    for (double x : v) s += x;
    return s;
}

} // namespace detail

/// Mean and sample std of p_hat and the mean final Huber loss per
/// (system, estimator, kind, eta), over successful runs. Rows are ordered by
/// that key.
inline AggregateResult aggregate(const std::vector<RunRecord>& runs) {
    if (runs.empty()) throw Error(ErrorKind::EmptyResults, "no runs to aggregate");
    using Key = std::tuple<std::string, int, int, double>;
    std::map<Key, std::vector<const RunRecord*>> groups;
    for (const auto& r : runs)
        groups[{r.system, static_cast<int>(r.estimator), static_cast<int>(r.kind), r.eta}].push_back(&r);

    AggregateResult out;
    for (const auto& [key, members] : groups) {
        AggregateRow row;
        row.system = members.front()->system;
        row.estimator = members.front()->estimator;
        row.kind = members.front()->kind;
        row.eta = members.front()->eta;
        row.param_names = members.front()->param_names;
        std::vector<const RunRecord*> ok;
        for (const auto* r : members) (r->ok ? ok.push_back(r) : void(++row.failed));
        row.runs = ok.size();
        const auto np = static_cast<Eigen::Index>(row.param_names.size());
        row.mean = Vector::Constant(np, std::numeric_limits<double>::quiet_NaN());
        row.stddev = Vector::Constant(np, std::numeric_limits<double>::quiet_NaN());
        row.mean_huber = std::numeric_limits<double>::quiet_NaN();
        if (!ok.empty()) {
            const auto n = static_cast<double>(ok.size());
            for (Eigen::Index j = 0; j < np; ++j) {
                std::vector<double> v;
                for (const auto* r : ok) {
                    if (r->p_hat.size() != np)
                        throw Error(ErrorKind::DimensionMismatch, "runs of one group disagree on parameter count");
                    v.push_back(r->p_hat[j]);
                }
                const double m = detail::sorted_sum(v) / n;
                std::vector<double> sq;
                for (double x : v) sq.push_back((x - m) * (x - m));
                row.mean[j] = m;
                row.stddev[j] = ok.size() > 1 ? std::sqrt(detail::sorted_sum(sq) / (n - 1.0)) : 0.0;
            }
            std::vector<double> h;
            for (const auto* r : ok) h.push_back(r->final_huber);
            row.mean_huber = detail::sorted_sum(h) / n;
        }
        out.push_back(std::move(row));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

/// Writes all files or none: each goes to a temporary sibling first and the
/// renames happen only after every write succeeded.
inline void write_files_atomic(const std::vector<std::pair<fs::path, std::string>>& files) {
    std::vector<fs::path> tmps;
    try {
        for (const auto& [path, content] : files) {
            if (path.has_parent_path()) fs::create_directories(path.parent_path());
            fs::path tmp = path;
            tmp += ".tmp";
            std::ofstream out(tmp, std::ios::binary);
            if (!out) throw Error(ErrorKind::IoError, "cannot write '" + tmp.string() + "'");
            tmps.push_back(tmp);
            out << content;
            out.close();
            if (!out) throw Error(ErrorKind::IoError, "write failed for '" + tmp.string() + "'");
        }
        for (std::size_t i = 0; i < files.size(); ++i) fs::rename(tmps[i], files[i].first);
    } catch (const fs::filesystem_error& e) {
        for (const auto& t : tmps) fs::remove(t);
        throw Error(ErrorKind::IoError, e.what());
    } catch (...) {
        for (const auto& t : tmps) {
            std::error_code ec;
            fs::remove(t, ec);
        }
        throw;
    }
}

inline std::string join_strings(const std::vector<std::string>& parts, const std::string& sep) {
    std::string s;
    for (std::size_t i = 0; i < parts.size(); ++i) s += (i ? sep : "") + parts[i];
    return s;
}

namespace detail {
inline std::string sanitize(std::string s) {
    for (char& c : s)
        if (c == ',' || c == '\n' || c == '\r') c = ';';
    return s;
}
} // namespace detail

/// Per-run rows; p_hat and param_names are ';'-joined so that systems with
/// different parameter counts can share one file. Wall time is kept out so
/// reruns produce identical bytes (see timing_csv).
inline std::string runs_csv(const std::vector<RunRecord>& runs) {
    std::ostringstream os;
    os << "system,estimator,kind,mode,eta,rep,seed,status,final_huber,steps,param_names,p_hat,error\n";
    for (const auto& r : runs) {
        std::vector<std::string> p;
        for (Eigen::Index j = 0; j < r.p_hat.size(); ++j) p.push_back(format_double(r.p_hat[j]));
        os << r.system << ',' << to_string(r.estimator) << ',' << to_string(r.kind) << ',' << to_string(r.mode) << ','
           << format_double(r.eta) << ',' << r.rep << ',' << r.seed << ',' << (r.ok ? "ok" : "failed") << ','
           << format_double(r.final_huber) << ',' << r.steps << ',' << join_strings(r.param_names, ";") << ','
           << join_strings(p, ";") << ',' << detail::sanitize(r.error) << '\n';
    }
    return os.str();
}

inline std::string timing_csv(const std::vector<RunRecord>& runs) {
    std::ostringstream os;
    os << "system,kind,eta,rep,wall_time\n";
    for (const auto& r : runs)
        os << r.system << ',' << to_string(r.kind) << ',' << format_double(r.eta) << ',' << r.rep << ','
           << format_double(r.wall_time) << '\n';
    return os.str();
}

/// Inverse of runs_csv.
inline std::vector<RunRecord> parse_runs_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    std::vector<RunRecord> runs;
    auto split = [](const std::string& s, char sep) {
        std::vector<std::string> out;
        if (s.empty()) return out;
        std::string cur;
        for (char c : s) {
            if (c == sep) {
                out.push_back(cur);
                cur.clear();
            } else {
                cur += c;
            }
        }
        out.push_back(cur);
        return out;
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line_no == 1) {
            if (line.rfind("system,", 0) != 0) throw Error(ErrorKind::ParseError, "line 1: missing runs header");
            continue;
        }
        if (line.empty()) continue;
        const auto f = split(line, ',');
        if (f.size() != 13)
            throw Error(ErrorKind::ParseError, "line " + std::to_string(line_no) + ": expected 13 fields, got " +
                                                   std::to_string(f.size()));
        RunRecord r;
        try {
            r.system = f[0];
            r.estimator = parse_estimator(f[1]);
            r.kind = parse_noise_kind(f[2]);
            r.mode = parse_noise_mode(f[3]);
            r.eta = detail::parse_double(f[4], line_no);
            r.rep = std::stoul(f[5]);
            r.seed = std::stoull(f[6]);
            if (f[7] != "ok" && f[7] != "failed") throw Error(ErrorKind::ParseError, "bad status '" + f[7] + "'");
            r.ok = f[7] == "ok";
            r.final_huber = detail::parse_double(f[8], line_no);
            r.steps = std::stoul(f[9]);
            r.param_names = split(f[10], ';');
            const auto p = split(f[11], ';');
            r.p_hat.resize(static_cast<Eigen::Index>(p.size()));
            for (std::size_t j = 0; j < p.size(); ++j) r.p_hat[static_cast<Eigen::Index>(j)] = detail::parse_double(p[j], line_no);
            r.error = f[12];
        } catch (const Error& e) {
            if (e.kind() == ErrorKind::ParseError) throw;
            throw Error(ErrorKind::ParseError, "line " + std::to_string(line_no) + ": " + e.what());
        } catch (const std::exception&) {
            throw Error(ErrorKind::ParseError, "line " + std::to_string(line_no) + ": malformed integer field");
        }
        if (r.ok && static_cast<std::size_t>(r.p_hat.size()) != r.param_names.size())
            throw Error(ErrorKind::ParseError, "line " + std::to_string(line_no) + ": p_hat length does not match names");
        runs.push_back(std::move(r));
    }
    return runs;
}

inline std::vector<RunRecord> read_runs_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::IoError, "cannot open runs file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_runs_csv(ss.str());
}

inline std::string aggregate_csv(const AggregateResult& agg) {
    std::ostringstream os;
    os << "system,estimator,kind,eta,runs,failed,mean_huber,param_names,mean,std\n";
    for (const auto& a : agg) {
        std::vector<std::string> m, s;
        for (Eigen::Index j = 0; j < a.mean.size(); ++j) {
            m.push_back(format_double(a.mean[j]));
            s.push_back(format_double(a.stddev[j]));
        }
        os << a.system << ',' << to_string(a.estimator) << ',' << to_string(a.kind) << ',' << format_double(a.eta)
           << ',' << a.runs << ',' << a.failed << ',' << format_double(a.mean_huber) << ','
           << join_strings(a.param_names, ";") << ',' << join_strings(m, ";") << ',' << join_strings(s, ";") << '\n';
    }
    return os.str();
}

namespace detail {

inline std::string fixed(double v, int sig = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", sig, v);
    return buf;
}

inline std::string kind_label(NoiseKind k) { return k == NoiseKind::White ? "Gaussian" : "Pink"; }

// Markdown table with every column padded to its widest cell.
inline std::string markdown(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> w(header.size());
    for (std::size_t c = 0; c < header.size(); ++c) w[c] = header[c].size();
    for (const auto& r : rows)
        for (std::size_t c = 0; c < r.size(); ++c) w[c] = std::max(w[c], r[c].size());
    auto line = [&](const std::vector<std::string>& cells) {
        std::string s = "|";
        for (std::size_t c = 0; c < cells.size(); ++c) s += " " + cells[c] + std::string(w[c] - cells[c].size(), ' ') + " |";
        return s + "\n";
    };
    std::string out = line(header) + "|";
    for (std::size_t c = 0; c < header.size(); ++c) out += std::string(w[c] + 2, '-') + "|";
    out += "\n";
    for (const auto& r : rows) out += line(r);
    return out;
}

inline std::string csv_line(const std::vector<std::string>& cells) { return join_strings(cells, ",") + "\n"; }

} // namespace detail

/// Sweep tables (rows = eta, columns = mean p_hat) and Gaussian-vs-pink
/// comparison tables (rows = parameters plus "Huber Loss", columns = noise
/// kinds at `comparison_eta`), one section per system and estimator, each as
/// Markdown and CSV, written to `dir` all-or-nothing. Sweep tables use the
/// white-noise runs, or the first kind present when there are none.
inline std::vector<fs::path> render_tables(const AggregateResult& agg, const fs::path& dir, double comparison_eta = 1e-3) {
    if (agg.empty()) throw Error(ErrorKind::EmptyResults, "nothing to tabulate");
    using Section = std::pair<std::string, Estimator>;
    std::vector<Section> sections;
    for (const auto& a : agg)
        if (std::find(sections.begin(), sections.end(), Section{a.system, a.estimator}) == sections.end())
            sections.emplace_back(a.system, a.estimator);

    std::string sweep_md = "# Parameter estimates across noise levels\n";
    std::string sweep_csv = "system,estimator,kind,eta,runs";
    std::string cmp_md = "# Gaussian vs pink noise at eta = " + format_double(comparison_eta) + "\n";
    std::string cmp_csv = "system,estimator,eta,quantity";
    std::size_t max_params = 0;
    for (const auto& a : agg) max_params = std::max(max_params, a.param_names.size());
    for (std::size_t j = 0; j < max_params; ++j) sweep_csv += ",p" + std::to_string(j + 1);
    sweep_csv += ",huber\n";
    cmp_csv += ",Gaussian,Pink\n";

    for (const auto& [system, est] : sections) {
        std::vector<const AggregateRow*> rows;
        for (const auto& a : agg)
            if (a.system == system && a.estimator == est) rows.push_back(&a);
        const auto& names = rows.front()->param_names;
        const std::string title = "\n## " + system + " (" + to_string(est) + ")\n\n";

        NoiseKind sweep_kind = rows.front()->kind;
        for (const auto* r : rows)
            if (r->kind == NoiseKind::White) sweep_kind = NoiseKind::White;
        std::vector<std::string> header{"eta"};
        for (const auto& n : names) header.push_back(n);
        header.push_back("runs");
        std::vector<std::vector<std::string>> body;
        for (const auto* r : rows) {
            if (r->kind != sweep_kind) continue;
            std::vector<std::string> line{format_double(r->eta)};
            std::vector<std::string> csv{system, to_string(est), to_string(r->kind), format_double(r->eta),
                                         std::to_string(r->runs)};
            for (Eigen::Index j = 0; j < r->mean.size(); ++j) {
                line.push_back(detail::fixed(r->mean[j]));
                csv.push_back(format_double(r->mean[j]));
            }
            for (std::size_t j = static_cast<std::size_t>(r->mean.size()); j < max_params; ++j) csv.emplace_back();
            csv.push_back(format_double(r->mean_huber));
            line.push_back(std::to_string(r->runs));
            body.push_back(line);
            sweep_csv += detail::csv_line(csv);
        }
        sweep_md += title + "Noise: " + detail::kind_label(sweep_kind) + "\n\n" + detail::markdown(header, body);

        const AggregateRow* by_kind[2] = {nullptr, nullptr};
        for (const auto* r : rows)
            if (r->eta == comparison_eta) by_kind[static_cast<int>(r->kind)] = r;
        auto cell = [&](const AggregateRow* r, std::optional<std::size_t> j, bool exact) -> std::string {
            if (!r) return exact ? "" : "n/a";
            const double v = j ? r->mean[static_cast<Eigen::Index>(*j)] : r->mean_huber;
            return exact ? format_double(v) : detail::fixed(v);
        };
        std::vector<std::vector<std::string>> cmp_rows;
        for (std::size_t j = 0; j <= names.size(); ++j) {
            const bool huber_row = j == names.size();
            const std::string label = huber_row ? "Huber Loss" : names[j];
            const auto idx = huber_row ? std::nullopt : std::optional<std::size_t>(j);
            cmp_rows.push_back({label, cell(by_kind[0], idx, false), cell(by_kind[1], idx, false)});
            cmp_csv += detail::csv_line({system, to_string(est), format_double(comparison_eta), label,
                                         cell(by_kind[0], idx, true), cell(by_kind[1], idx, true)});
        }
        cmp_md += title + detail::markdown({"Quantity", "Gaussian", "Pink"}, cmp_rows);
    }
    cmp_md += "\nHuber Loss: mean over runs of the per-point data loss (sum over components of the Huber penalty on "
              "observation-normalised residuals, delta as configured).\n";

    const std::vector<std::pair<fs::path, std::string>> files{{dir / "aggregate.csv", aggregate_csv(agg)},
                                                               {dir / "table_sweep.md", sweep_md},
                                                               {dir / "table_sweep.csv", sweep_csv},
                                                               {dir / "table_noise_comparison.md", cmp_md},
                                                               {dir / "table_noise_comparison.csv", cmp_csv}};
    write_files_atomic(files);
    std::vector<fs::path> paths;
    for (const auto& f : files) paths.push_back(f.first);
    return paths;
}

/// Estimated trajectory of a finished fit on the observation grid: the trained
/// network for collocation, an integration at p_hat for shooting.
inline RowMatrix estimated_states(const OdeSystem& sys, const Trajectory& grid, const EstimateResult& result) {
    if (result.net) return forward_batch(*result.net, grid.times);
    RowMatrix states(static_cast<Eigen::Index>(grid.size()), static_cast<Eigen::Index>(sys.dim));
    Vector x = sys.default_init;
    states.row(0) = x.transpose();
    try {
        for (std::size_t j = 1; j < grid.size(); ++j) {
            x = rk4_step(sys, grid.times[j - 1], x, result.p_hat, grid.times[j] - grid.times[j - 1]);
            states.row(static_cast<Eigen::Index>(j)) = x.transpose();
        }
    } catch (const Error&) {
        states.setConstant(std::numeric_limits<double>::quiet_NaN());
    }
    return states;
}

/// Plot data for one run:
///   plot_<stem>.csv:  t, x1_true, x1_noisy, x1_est, x2_true, ...
///   phase_<stem>.csv: x1_true, x2_true[, x3_true], x1_est, x2_est[, x3_est]
/// `clean` may be null (fits of external data), which drops the _true columns.
inline std::vector<fs::path> emit_plot_data(const OdeSystem& sys, const Trajectory* clean, const Trajectory& noisy,
                                            const EstimateResult& result, const fs::path& dir, const std::string& stem) {
    const RowMatrix est = estimated_states(sys, noisy, result);
    const std::size_t m = sys.dim;
    const std::size_t pm = std::min<std::size_t>(m, 3);
    std::ostringstream plot, phase;
    plot << "t";
    for (std::size_t i = 1; i <= m; ++i) {
        const auto x = "x" + std::to_string(i);
        if (clean) plot << ',' << x << "_true";
        plot << ',' << x << "_noisy," << x << "_est";
    }
    plot << '\n';
    std::vector<std::string> ph;
    for (const char* tag : {"_true", "_est"}) {
        if (!clean && std::string(tag) == "_true") continue;
        for (std::size_t i = 1; i <= pm; ++i) ph.push_back("x" + std::to_string(i) + tag);
    }
    phase << join_strings(ph, ",") << '\n';
    for (std::size_t j = 0; j < noisy.size(); ++j) {
        const auto r = static_cast<Eigen::Index>(j);
        plot << format_double(noisy.times[j]);
        for (std::size_t i = 0; i < m; ++i) {
            const auto c = static_cast<Eigen::Index>(i);
            if (clean) plot << ',' << format_double(clean->states(r, c));
            plot << ',' << format_double(noisy.states(r, c)) << ',' << format_double(est(r, c));
        }
        plot << '\n';
        std::vector<std::string> cells;
        if (clean)
            for (std::size_t i = 0; i < pm; ++i) cells.push_back(format_double(clean->states(r, static_cast<Eigen::Index>(i))));
        for (std::size_t i = 0; i < pm; ++i) cells.push_back(format_double(est(r, static_cast<Eigen::Index>(i))));
        phase << join_strings(cells, ",") << '\n';
    }
    const fs::path a = dir / ("plot_" + stem + ".csv");
    const fs::path b = dir / ("phase_" + stem + ".csv");
    write_files_atomic({{a, plot.str()}, {b, phase.str()}});
    return {a, b};
}

/// File stem for the plot of a run: <system>_<eta>, with _pink appended for
/// pink noise.
inline std::string plot_stem(const RunRecord& r) {
    return r.system + "_" + format_double(r.eta) + (r.kind == NoiseKind::Pink ? "_pink" : "");
}

/// Writes runs.csv, timing.csv, the tables and one plot per (kind, eta) from
/// its first successful repetition. Returns the written paths.
inline std::vector<fs::path> write_experiment(const ExperimentConfig& cfg, const std::vector<RunRecord>& runs,
                                              const fs::path& dir) {
    const AggregateResult agg = aggregate(runs);
    write_files_atomic({{dir / "runs.csv", runs_csv(runs)}, {dir / "timing.csv", timing_csv(runs)}});
    std::vector<fs::path> paths{dir / "runs.csv", dir / "timing.csv"};
    for (auto& p : render_tables(agg, dir, cfg.comparison_eta)) paths.push_back(p);

    const OdeSystem sys = make_system(cfg.system);
    const Trajectory clean = integrate_default(sys, sys.true_params);
    std::set<std::string> plotted;
    for (const auto& r : runs) {
        if (!r.ok || !r.result || !r.noisy) continue;
        const auto stem = plot_stem(r);
        if (!plotted.insert(stem).second) continue;
        for (auto& p : emit_plot_data(sys, &clean, *r.noisy, *r.result, dir, stem)) paths.push_back(p);
    }
    return paths;
}

/// Mean absolute relative error of an aggregate row against the true values.
inline double mean_abs_rel_error(const AggregateRow& row) {
    const OdeSystem sys = make_system(row.system);
    if (row.mean.size() != sys.true_params.size()) return std::numeric_limits<double>::quiet_NaN();
    return ((row.mean - sys.true_params).array() / sys.true_params.array()).abs().mean();
}

} // namespace odestim
