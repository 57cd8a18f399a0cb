// odestim command-line tool: simulate / fit / benchmark / report.
#include <odestim/harness.hpp>

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>

using namespace odestim;

namespace {

struct Options {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> jobs;
    std::optional<std::size_t> reps;
    std::string system;
    std::optional<double> eta;
    std::string kind;
    std::string mode;
    std::string estimator;
    bool verbose = false;
    std::string data;
    std::vector<std::string> runs;
};

fs::path output_dir(const Options& o) {
    if (!o.out.empty()) return o.out;
    if (const char* env = std::getenv("ODESTIM_OUT"); env && *env) return env;
    return ".";
}

// flags shared by several subcommands override the config file
void apply_overrides(ExperimentConfig& cfg, const Options& o) {
    if (!o.system.empty()) cfg.system = make_system(o.system).name;
    if (!o.estimator.empty()) cfg.estimator = parse_estimator(o.estimator);
    if (!o.mode.empty()) cfg.mode = parse_noise_mode(o.mode);
    if (o.seed) cfg.base_seed = *o.seed;
    if (o.jobs) cfg.jobs = *o.jobs;
    if (o.reps) cfg.repetitions = *o.reps;
    if (!o.kind.empty() || o.eta) {
        std::vector<NoiseSweep> kept;
        for (auto s : cfg.sweeps) {
            if (!o.kind.empty() && s.kind != parse_noise_kind(o.kind)) continue;
            if (o.eta) s.intensities = {*o.eta};
            kept.push_back(s);
        }
        if (kept.empty() && !o.kind.empty()) kept.push_back({parse_noise_kind(o.kind), {o.eta.value_or(0.0)}});
        cfg.sweeps = kept;
    }
    validate(cfg);
}

int cmd_simulate(const Options& o) {
    const OdeSystem sys = make_system(o.system.empty() ? "damped_cubic" : o.system);
    const Trajectory clean = integrate_default(sys, sys.true_params);
    NoiseSpec spec;
    spec.intensity = o.eta.value_or(0.0);
    spec.kind = o.kind.empty() ? NoiseKind::White : parse_noise_kind(o.kind);
    spec.mode = o.mode.empty() ? NoiseMode::Multiplicative : parse_noise_mode(o.mode);
    spec.seed = o.seed.value_or(0);
    const Trajectory noisy = corrupt(clean, spec);
    const fs::path dir = output_dir(o);
    std::error_code ec;
    fs::create_directories(dir, ec);
    const auto a = dir / (sys.name + "_clean.csv");
    const auto b = dir / (sys.name + "_noisy.csv");
    write_trajectory_csv(a.string(), clean);
    write_trajectory_csv(b.string(), noisy);
    std::cout << "wrote " << a.string() << " and " << b.string() << " (" << clean.size() << " rows)\n";
    return 0;
}

int cmd_fit(const Options& o) {
    ExperimentConfig cfg = load_config(o.config);
    apply_overrides(cfg, o);
    const OdeSystem sys = make_system(cfg.system);
    Trajectory data = read_trajectory_csv(o.data);
    if (data.dim() != sys.dim)
        throw Error(ErrorKind::DimensionMismatch, "data file has " + std::to_string(data.dim()) + " components; system '" +
                                                      sys.name + "' has " + std::to_string(sys.dim));
    const std::uint64_t seed = cfg.base_seed;
    const EstimationProblem pr = make_problem(cfg, sys, data, seed);
    if (o.verbose) std::cerr << "fitting " << sys.name << " with " << to_string(cfg.estimator) << "\n";
    const EstimateResult res = fit(pr, cfg.estimator);

    std::cout << "system " << sys.name << "\nestimator " << to_string(cfg.estimator) << "\n";
    for (std::size_t j = 0; j < sys.n_params(); ++j)
        std::cout << sys.param_names[j] << " " << format_double(res.p_hat[static_cast<Eigen::Index>(j)]) << "\n";
    std::cout << "final_huber " << format_double(res.final_huber) << "\n";

    RunRecord r;
    r.system = sys.name;
    r.estimator = cfg.estimator;
    r.seed = seed;
    r.ok = res.p_hat.allFinite();
    r.param_names = sys.param_names;
    r.p_hat = res.p_hat;
    r.final_huber = res.final_huber;
    r.steps = res.steps_run;
    r.wall_time = res.wall_time;
    const fs::path dir = output_dir(o);
    write_files_atomic({{dir / "fit_result.csv", runs_csv({r})}});
    emit_plot_data(sys, nullptr, data, res, dir, sys.name + "_fit");
    if (o.verbose) std::cerr << "wrote " << (dir / "fit_result.csv").string() << "\n";
    return 0;
}

void print_summary(const AggregateResult& agg) {
    std::cout << "system,estimator,kind,eta,runs,failed,mean_abs_rel_error,mean_huber\n";
    for (const auto& a : agg)
        std::cout << a.system << ',' << to_string(a.estimator) << ',' << to_string(a.kind) << ','
                  << format_double(a.eta) << ',' << a.runs << ',' << a.failed << ','
                  << detail::fixed(mean_abs_rel_error(a), 4) << ',' << detail::fixed(a.mean_huber, 4) << '\n';
}

int cmd_benchmark(const Options& o) {
    ExperimentConfig cfg = load_config(o.config);
    apply_overrides(cfg, o);
    const fs::path dir = o.out.empty() && !std::getenv("ODESTIM_OUT") ? fs::path(cfg.output) : output_dir(o);
    ProgressFn progress;
    if (o.verbose)
        progress = [](const RunRecord& r, std::size_t done, std::size_t total) {
            std::cerr << "[" << done << "/" << total << "] " << r.system << " " << to_string(r.kind) << " eta="
                      << format_double(r.eta) << " rep=" << r.rep << (r.ok ? "" : " FAILED: " + r.error) << " ("
                      << detail::fixed(r.wall_time, 3) << " s)\n";
        };
    const auto runs = run_experiment(cfg, progress);
    write_experiment(cfg, runs, dir);
    const auto agg = aggregate(runs);
    print_summary(agg);
    std::size_t failed = 0;
    for (const auto& r : runs) failed += r.ok ? 0 : 1;
    if (failed) std::cerr << "warning: " << failed << " run(s) failed and were excluded from the means\n";
    std::cerr << "outputs in " << dir.string() << "\n";
    return 0;
}

int cmd_report(const Options& o) {
    std::vector<RunRecord> runs;
    for (const auto& path : o.runs)
        for (auto& r : read_runs_csv(path))
            if (o.system.empty() || r.system == make_system(o.system).name) runs.push_back(std::move(r));
    const auto agg = aggregate(runs);
    const fs::path dir = output_dir(o);
    render_tables(agg, dir, o.eta.value_or(1e-3));
    print_summary(agg);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Huber-loss parameter estimation for ODE systems"};
    app.require_subcommand(1);
    Options o;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--out", o.out, "output directory (default $ODESTIM_OUT, else .)");
        sub->add_option("--seed", o.seed, "seed (noise seed for simulate, base seed otherwise)");
        sub->add_flag("--verbose,-v", o.verbose, "progress on stderr");
    };
    auto noise = [&](CLI::App* sub) {
        sub->add_option("--eta", o.eta, "noise intensity");
        sub->add_option("--kind", o.kind, "noise kind")->check(CLI::IsMember({"white", "pink"}));
        sub->add_option("--mode", o.mode, "noise mode")->check(CLI::IsMember({"mult", "add"}));
    };

    auto* sim = app.add_subcommand("simulate", "write clean and noisy trajectories of a system");
    common(sim);
    noise(sim);
    sim->add_option("--system", o.system, "system name")->required();

    auto* fitc = app.add_subcommand("fit", "estimate parameters from a trajectory CSV");
    common(fitc);
    fitc->add_option("data", o.data, "trajectory CSV (t,x1,...)")->required()->check(CLI::ExistingFile);
    fitc->add_option("--config", o.config, "experiment config")->required()->check(CLI::ExistingFile);
    fitc->add_option("--system", o.system, "override the config system");
    fitc->add_option("--estimator", o.estimator, "estimator")->check(CLI::IsMember({"collocation", "shooting"}));

    auto* bench = app.add_subcommand("benchmark", "run a full noise sweep and write tables and plot data");
    common(bench);
    noise(bench);
    bench->add_option("--config", o.config, "experiment config")->required()->check(CLI::ExistingFile);
    bench->add_option("--system", o.system, "override the config system");
    bench->add_option("--estimator", o.estimator, "estimator")->check(CLI::IsMember({"collocation", "shooting"}));
    bench->add_option("--jobs", o.jobs, "concurrent runs")->check(CLI::PositiveNumber);
    bench->add_option("--reps", o.reps, "repetitions per noise level")->check(CLI::PositiveNumber);

    auto* rep = app.add_subcommand("report", "re-aggregate stored runs into tables");
    common(rep);
    rep->add_option("runs", o.runs, "runs.csv file(s)")->required()->check(CLI::ExistingFile);
    rep->add_option("--system", o.system, "only this system");
    rep->add_option("--eta", o.eta, "intensity of the comparison table (default 0.001)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (sim->parsed()) return cmd_simulate(o);
        if (fitc->parsed()) return cmd_fit(o);
        if (bench->parsed()) return cmd_benchmark(o);
        return cmd_report(o);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: Internal: " << e.what() << "\n";
        return 2;
    }
}
