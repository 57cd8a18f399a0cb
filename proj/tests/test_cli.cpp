// End-to-end checks of the odestim executable.
#include <odestim/harness.hpp>

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sys/wait.h>

using namespace odestim;

namespace {

struct Outcome {
    int code;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path scratch_dir(const std::string& name) {
    const auto d = fs::temp_directory_path() / ("odestim_cli_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

Outcome run(const std::string& args) {
    const auto dir = fs::temp_directory_path();
    const auto out = dir / "odestim_cli_stdout.txt", err = dir / "odestim_cli_stderr.txt";
    const std::string cmd = std::string(ODESTIM_CLI) + " " + args + " >" + out.string() + " 2>" + err.string();
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

fs::path write_config(const fs::path& dir, const std::string& text) {
    const auto p = dir / "tiny.cfg";
    std::ofstream(p) << text;
    return p;
}

const char* tiny = R"(system: damped_cubic
estimator: shooting
repetitions: 4
base_seed: 1
noise:
  white: [0.001, 0.01]
  pink: [0.001]
fit:
  steps: 10
  p_init_scale: 0.9
)";

} // namespace

TEST(Cli, SimulateLorenzWritesFullGrid) {
    const auto dir = scratch_dir("sim");
    const auto r = run("simulate --system lorenz --eta 0.01 --seed 3 --out " + dir.string());
    ASSERT_EQ(r.code, 0) << r.err;
    const auto clean = slurp(dir / "lorenz_clean.csv");
    EXPECT_EQ(count_lines(clean), 2502u); // header + 2501 rows
    EXPECT_EQ(clean.rfind("t,x1,x2,x3\n", 0), 0u);
    EXPECT_EQ(read_trajectory_csv((dir / "lorenz_noisy.csv").string()).size(), 2501u);
    EXPECT_NE(slurp(dir / "lorenz_noisy.csv"), clean);
}

TEST(Cli, UnknownSystemExitsTwoAndListsValidNames) {
    const auto r = run("simulate --system duffing --out " + scratch_dir("unknown").string());
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("UnknownSystem"), std::string::npos);
    for (const auto& name : system_names()) EXPECT_NE(r.err.find(name), std::string::npos);
}

TEST(Cli, MissingArgumentsAreUsageErrors) {
    EXPECT_NE(run("").code, 0);
    EXPECT_NE(run("fit").code, 0);
    EXPECT_NE(run("simulate --system lorenz --kind brown").code, 0);
}

// shooting from 0.9 x truth, the noiseless identifiability setting
TEST(Cli, FitRecoversNoiselessDampedCubic) {
    const auto dir = scratch_dir("fit");
    ASSERT_EQ(run("simulate --system damped --out " + dir.string()).code, 0);
    const auto cfg = write_config(dir, "system: damped\nfit:\n  steps: 3000\n  p_init_scale: 0.9\n");
    const auto r = run("fit " + (dir / "damped_cubic_clean.csv").string() + " --config " + cfg.string() +
                       " --estimator shooting --out " + dir.string());
    ASSERT_EQ(r.code, 0) << r.err;
    const auto runs = read_runs_csv((dir / "fit_result.csv").string());
    ASSERT_EQ(runs.size(), 1u);
    const auto truth = make_damped_cubic().true_params;
    for (Eigen::Index j = 0; j < 4; ++j)
        EXPECT_NEAR(runs[0].p_hat[j], truth[j], 1e-3 * std::abs(truth[j])) << "p" << j + 1;
    EXPECT_NE(r.out.find("p1 "), std::string::npos);
    EXPECT_TRUE(fs::exists(dir / "plot_damped_cubic_fit.csv"));
}

TEST(Cli, FitRejectsWrongDimension) {
    const auto dir = scratch_dir("fitdim");
    ASSERT_EQ(run("simulate --system lorenz --out " + dir.string()).code, 0);
    const auto r = run("fit " + (dir / "lorenz_clean.csv").string() + " --config " + ODESTIM_CONFIG_DIR +
                       "/damped.cfg --out " + dir.string());
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("DimensionMismatch"), std::string::npos);
}

TEST(Cli, BenchmarkRepsOverridesConfig) {
    const auto dir = scratch_dir("reps");
    const auto cfg = write_config(dir, tiny);
    ASSERT_EQ(run("benchmark --config " + cfg.string() + " --out " + (dir / "full").string()).code, 0);
    ASSERT_EQ(run("benchmark --config " + cfg.string() + " --reps 2 --out " + (dir / "half").string()).code, 0);
    const auto full = read_runs_csv((dir / "full" / "runs.csv").string());
    const auto half = read_runs_csv((dir / "half" / "runs.csv").string());
    EXPECT_EQ(full.size(), 12u);
    EXPECT_EQ(half.size(), full.size() / 2);
}

TEST(Cli, BenchmarkEtaAndKindFilters) {
    const auto dir = scratch_dir("filters");
    const auto cfg = write_config(dir, tiny);
    ASSERT_EQ(run("benchmark --config " + cfg.string() + " --kind pink --eta 0.01 --reps 1 --out " + dir.string()).code,
              0);
    const auto runs = read_runs_csv((dir / "runs.csv").string());
    ASSERT_EQ(runs.size(), 1u);
    EXPECT_EQ(runs[0].kind, NoiseKind::Pink);
    EXPECT_EQ(runs[0].eta, 0.01);
}

TEST(Cli, BenchmarkIsDeterministic) {
    const auto dir = scratch_dir("determinism");
    const auto cfg = write_config(dir, tiny);
    ASSERT_EQ(run("benchmark --config " + cfg.string() + " --out " + (dir / "a").string()).code, 0);
    ASSERT_EQ(run("benchmark --config " + cfg.string() + " --jobs 2 --out " + (dir / "b").string()).code, 0);
    for (const char* f : {"runs.csv", "table_sweep.md", "table_noise_comparison.csv", "plot_damped_cubic_0.01.csv"})
        EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
}

TEST(Cli, ReportReproducesBenchmarkTables) {
    const auto dir = scratch_dir("report");
    const auto cfg = write_config(dir, tiny);
    ASSERT_EQ(run("benchmark --config " + cfg.string() + " --out " + (dir / "bench").string()).code, 0);
    ASSERT_EQ(run("report " + (dir / "bench" / "runs.csv").string() + " --out " + (dir / "rep").string()).code, 0);
    for (const char* f :
         {"aggregate.csv", "table_sweep.md", "table_sweep.csv", "table_noise_comparison.md", "table_noise_comparison.csv"})
        EXPECT_EQ(slurp(dir / "bench" / f), slurp(dir / "rep" / f)) << f;
    EXPECT_NE(slurp(dir / "rep" / "table_noise_comparison.md").find("Huber Loss"), std::string::npos);
}

TEST(Cli, ReportSystemFilter) {
    const auto dir = scratch_dir("report_filter");
    const auto cfg = write_config(dir, tiny);
    ASSERT_EQ(run("benchmark --config " + cfg.string() + " --reps 1 --out " + (dir / "d").string()).code, 0);
    ASSERT_EQ(run("benchmark --config " + cfg.string() + " --system lv --reps 1 --out " + (dir / "l").string()).code, 0);
    const std::string both = (dir / "d" / "runs.csv").string() + " " + (dir / "l" / "runs.csv").string();
    ASSERT_EQ(run("report " + both + " --out " + (dir / "all").string()).code, 0);
    ASSERT_EQ(run("report " + both + " --system lv --out " + (dir / "lv").string()).code, 0);
    const auto all = slurp(dir / "all" / "aggregate.csv");
    const auto lv = slurp(dir / "lv" / "aggregate.csv");
    EXPECT_NE(all.find("damped_cubic"), std::string::npos);
    EXPECT_EQ(lv.find("damped_cubic"), std::string::npos);
    EXPECT_EQ(count_lines(lv), 1u + 3u);
}

TEST(Cli, ReportOnEmptyRunsFails) {
    const auto dir = scratch_dir("report_empty");
    std::ofstream(dir / "runs.csv") << runs_csv({});
    const auto r = run("report " + (dir / "runs.csv").string() + " --out " + (dir / "out").string());
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("EmptyResults"), std::string::npos);
    EXPECT_FALSE(fs::exists(dir / "out" / "table_sweep.md"));
}

TEST(Cli, BadConfigKeyExitsTwo) {
    const auto dir = scratch_dir("badcfg");
    const auto cfg = write_config(dir, "fit:\n  lernrate: 1\n");
    const auto r = run("benchmark --config " + cfg.string() + " --out " + dir.string());
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("ConfigError"), std::string::npos);
}
