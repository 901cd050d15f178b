#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "nettmle/config.hpp"
#include "nettmle/experiment.hpp"

using namespace nettmle;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream f(p);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

int count_lines(const fs::path& p) {
    std::ifstream f(p);
    int n = 0;
    std::string line;
    while (std::getline(f, line))
        if (!line.empty()) ++n;
    return n;
}

fs::path fresh_dir(const std::string& name) {
    const fs::path d = fs::temp_directory_path() / ("nettmle_test_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

/// One grid cell, two repeats, two models; small enough for a unit test.
std::string small_config(const fs::path& out, std::uint64_t seed = 7) {
    return "graph_kinds = [uniform]\n"
           "sizes = [500]\n"
           "p_omega_grid = [0.50]\n"
           "repeats = 2\n"
           "models = [glm, l2]\n"
           "m_copies = 5\n"
           "truth_reps = 3\n"
           "master_seed = " + std::to_string(seed) + "\n" +
           "output_dir = " + out.string() + "\n";
}

ExperimentOptions quiet() {
    ExperimentOptions o;
    o.log = nullptr;
    return o;
}

std::vector<std::string> column(const fs::path& csv, const std::string& name) {
    const CsvTable t = read_csv(csv);
    const int c = t.column(name);
    std::vector<std::string> out;
    for (const auto& r : t.rows) out.push_back(r[c]);
    return out;
}

}  // namespace

TEST(Config, MinimalFillsDefaults) {
    const auto s = parse_config_text("graph_kinds = [uniform]\nsizes = [500]\nmaster_seed = 3\n");
    EXPECT_EQ(s.repeats, 30);
    EXPECT_EQ(s.repeats_for(GraphKind::powerlaw, 2000), 15);
    EXPECT_EQ(s.repeats_for(GraphKind::uniform, 2000), 30);
    EXPECT_EQ(s.p_omega_grid.size(), 19u);
    EXPECT_EQ(s.scenarios, std::vector<Scenario>{Scenario::CC});
    EXPECT_EQ(s.models, std::vector<ModelKind>{ModelKind::glm});
    EXPECT_EQ(s.truth_reps, 30);
    EXPECT_EQ(s.m_copies, 50);
    EXPECT_EQ(s.master_seed, 3u);
    EXPECT_EQ(s.weight_bounds, (std::pair<double, double>{0.01, 100.0}));
}

TEST(Config, DefaultGridHasNineteenLevels) {
    const auto s = parse_config_text("graph_kinds = [uniform]\nsizes = [500]\nmaster_seed = 3\np_omega_grid = default\n");
    ASSERT_EQ(s.p_omega_grid.size(), 19u);
    for (int k = 0; k < 19; ++k) EXPECT_NEAR(s.p_omega_grid[k], 0.05 * (k + 1), 1e-12);
}

TEST(Config, UnsupportedSizeNamed) {
    try {
        parse_config_text("graph_kinds = [uniform]\nsizes = [500, 3000]\nmaster_seed = 3\n");
        FAIL() << "expected config_error";
    } catch (const config_error& e) {
        EXPECT_NE(std::string(e.what()).find("3000"), std::string::npos);
    }
    EXPECT_NO_THROW(parse_config_text("graph_kinds = [uniform]\nsizes = [3000]\nmaster_seed = 3\nallow_custom_sizes = true\n"));
}

TEST(Config, RejectsBadInput) {
    auto message = [](const std::string& text) {
        try {
            parse_config_text(text);
        } catch (const config_error& e) {
            return std::string(e.what());
        }
        return std::string();
    };
    const std::string base = "graph_kinds = [uniform]\nsizes = [500]\nmaster_seed = 3\n";
    EXPECT_NE(message(base + "colour = blue\n").find("colour"), std::string::npos);
    EXPECT_NE(message("sizes = [500]\nmaster_seed = 3\n").find("graph_kinds"), std::string::npos);
    EXPECT_NE(message(base + "repeats = 3x\n").find("repeats"), std::string::npos);
    EXPECT_NE(message(base + "models = [glm, forest]\n").find("forest"), std::string::npos);
    EXPECT_NE(message(base + "p_omega_grid = [0.5, 1.0]\n").find("p_omega_grid"), std::string::npos);
    EXPECT_NE(message(base + "repeats = 0\n").find("repeats"), std::string::npos);
    EXPECT_NE(message(base + "repeats = 2\nrepeats = 3\n").find("duplicate"), std::string::npos);
    EXPECT_THROW(parse_config("/nonexistent/nettmle.cfg"), config_error);
}

TEST(Units, PartialBudgetsSkipPriorityAll) {
    auto s = parse_config_text(
        "graph_kinds = [uniform]\nsizes = [500]\nmaster_seed = 3\nbudgets = [0.5, 1.0]\n"
        "priorities = [all, most_connected]\np_omega_grid = [0.5]\nrepeats = 1\n");
    const auto units = enumerate_units(s);
    ASSERT_EQ(units.size(), 3u);
    std::set<std::string> ids;
    for (const auto& u : units) {
        EXPECT_FALSE(u.priority == Priority::all && u.budget < 1.0);
        ids.insert(u.run_id(Scenario::CC, ModelKind::glm));
    }
    EXPECT_EQ(ids.size(), units.size());
}

TEST(Units, SeedsDependOnlyOnCell) {
    const auto s = parse_config_text("graph_kinds = [uniform]\nsizes = [500]\nmaster_seed = 3\nrepeats = 2\np_omega_grid = [0.3, 0.6]\n");
    const WorkUnit a{GraphKind::uniform, 500, 1.0, Priority::all, 0.3, 1};
    const WorkUnit b{GraphKind::uniform, 500, 1.0, Priority::all, 0.6, 1};
    const auto da = simulate_unit(s, a, false), db = simulate_unit(s, b, false);
    // Same network and observed panel across policy cells of one repeat.
    EXPECT_EQ(da.network.base(), db.network.base());
    EXPECT_EQ(da.observed.upsilon, db.observed.upsilon);
    const auto again = simulate_unit(s, a, false);
    EXPECT_EQ(again.observed.alpha, da.observed.alpha);
    EXPECT_NE(estimator_config(s, a, Scenario::CC, ModelKind::glm).seed, estimator_config(s, b, Scenario::CC, ModelKind::glm).seed);
    EXPECT_EQ(estimator_config(s, a, Scenario::CC, ModelKind::glm).seed, estimator_config(s, a, Scenario::CW, ModelKind::l2).seed);
}

TEST(Sweep, RowCountsAndSummaryRebuild) {
    const fs::path dir = fresh_dir("sweep");
    const auto spec = parse_config_text(small_config(dir));
    const auto r = run_experiment(spec, quiet());
    EXPECT_EQ(r.exit_code, 0);
    EXPECT_EQ(r.runs_written, 4u);
    EXPECT_EQ(r.runs_failed, 0u);
    EXPECT_EQ(count_lines(dir / "runs.csv"), 1 + 4);
    EXPECT_EQ(count_lines(dir / "truth.csv"), 1 + 2);
    EXPECT_EQ(count_lines(dir / "summary.csv"), 1 + 2);
    EXPECT_EQ(slurp(dir / "runs.csv").substr(0, kRunCsvHeader.size()), kRunCsvHeader);

    const std::string runs_before = slurp(dir / "runs.csv"), summary_before = slurp(dir / "summary.csv");
    fs::remove(dir / "summary.csv");
    ExperimentOptions o = quiet();
    o.resume = true;
    const auto again = run_experiment(spec, o);
    EXPECT_EQ(again.runs_written, 0u);
    EXPECT_EQ(slurp(dir / "runs.csv"), runs_before);
    EXPECT_EQ(slurp(dir / "summary.csv"), summary_before);

    rebuild_summary(dir);
    EXPECT_EQ(slurp(dir / "summary.csv"), summary_before);
    fs::remove_all(dir);
}

TEST(Sweep, ResumeCompletesMissingRows) {
    const fs::path dir = fresh_dir("resume");
    const auto spec = parse_config_text(small_config(dir));
    run_experiment(spec, quiet());
    const std::string full = slurp(dir / "runs.csv");
    // Drop the last row, then resume.
    std::string cut = full.substr(0, full.rfind('\n', full.size() - 2) + 1);
    {
        std::ofstream f(dir / "runs.csv", std::ios::trunc);
        f << cut;
    }
    ExperimentOptions o = quiet();
    o.resume = true;
    const auto r = run_experiment(spec, o);
    EXPECT_EQ(r.runs_written, 1u);
    EXPECT_EQ(slurp(dir / "runs.csv"), full);
    fs::remove_all(dir);
}

TEST(Sweep, DeterministicAcrossRunsAndWorkers) {
    const fs::path d1 = fresh_dir("det1"), d2 = fresh_dir("det2");
    run_experiment(parse_config_text(small_config(d1, 11)), quiet());
    ExperimentOptions o = quiet();
    o.jobs = 3;
    run_experiment(parse_config_text(small_config(d2, 11)), o);
    EXPECT_EQ(column(d1 / "runs.csv", "psi_hat"), column(d2 / "runs.csv", "psi_hat"));
    EXPECT_EQ(slurp(d1 / "runs.csv"), slurp(d2 / "runs.csv"));
    EXPECT_EQ(slurp(d1 / "truth.csv"), slurp(d2 / "truth.csv"));
    fs::remove_all(d1);
    fs::remove_all(d2);
}

TEST(Sweep, EnvironmentOverridesOutputDir) {
    const fs::path cfg_dir = fresh_dir("cfgdir"), env_dir = fresh_dir("envdir");
    auto spec = parse_config_text(small_config(cfg_dir));
    spec.repeats = 1;
    spec.models = {ModelKind::glm};
    ::setenv("NETTMLE_OUT", env_dir.c_str(), 1);
    const auto r = run_experiment(spec, quiet());
    ::unsetenv("NETTMLE_OUT");
    EXPECT_EQ(r.output_dir, env_dir);
    EXPECT_TRUE(fs::exists(env_dir / "runs.csv"));
    EXPECT_FALSE(fs::exists(cfg_dir / "runs.csv"));
    fs::remove_all(cfg_dir);
    fs::remove_all(env_dir);
}

TEST(Sweep, TruthOnlyWritesNoRuns) {
    const fs::path dir = fresh_dir("truth");
    ExperimentOptions o = quiet();
    o.truth_only = true;
    run_experiment(parse_config_text(small_config(dir)), o);
    EXPECT_FALSE(fs::exists(dir / "runs.csv"));
    EXPECT_EQ(count_lines(dir / "truth.csv"), 1 + 2);
    fs::remove_all(dir);
}

namespace {

/// Summary CSV with two facets over three grid points, written out of order.
fs::path synthetic_summary(const fs::path& dir) {
    std::ofstream f(dir / "summary.csv");
    f << kSummaryCsvHeader << '\n'
      << "uniform,500,CC,full,0.70,1.00,all,glm,10,0.03,0.01,0.9,0.95\n"
      << "uniform,500,CC,full,0.50,1.00,all,glm,10,0.02,0.01,0.8,0.9\n"
      << "uniform,500,CC,full,0.90,1.00,all,glm,10,-0.01,0.02,0.7,0.85\n"
      << "uniform,500,CC,full,0.50,1.00,all,deep,10,0.005,0.01,0.9,0.95\n";
    return dir / "summary.csv";
}

}  // namespace

TEST(Series, JoinsSummaryValues) {
    const fs::path dir = fresh_dir("series");
    const fs::path summary = synthetic_summary(dir);
    FacetFilter f;
    f.equals = {{"graph", "uniform"}, {"n", "500"}, {"scenario", "CC"}, {"model", "glm"}};
    const auto files = emit_series(summary, "bias", dir / "out", f, nullptr);
    ASSERT_EQ(files.size(), 1u);
    const CsvTable t = read_csv(files[0]);
    EXPECT_EQ(t.header, (std::vector<std::string>{"p_omega", "value"}));
    ASSERT_EQ(t.rows.size(), 3u);
    // Oracle: look the same keys up in the summary table.
    std::map<std::string, double> expect;
    for (const auto& r : read_summary_csv(summary))
        if (r.key.model == "glm") expect[fixed2(r.key.p_omega)] = r.metrics.bias;
    double prev = -1.0;
    for (const auto& r : t.rows) {
        EXPECT_GT(std::stod(r[0]), prev);
        prev = std::stod(r[0]);
        EXPECT_EQ(std::stod(r[1]), expect.at(r[0]));
    }
    const auto all = emit_series(summary, "cover_latent", dir / "all", {}, nullptr);
    EXPECT_EQ(all.size(), 2u);
    fs::remove_all(dir);
}

TEST(Series, EmptyFacetAndUnknownMetric) {
    const fs::path dir = fresh_dir("series_empty");
    const fs::path summary = synthetic_summary(dir);
    FacetFilter f;
    f.equals = {{"graph", "powerlaw"}};
    std::ostringstream log;
    const auto files = emit_series(summary, "ese", dir / "out", f, &log);
    ASSERT_EQ(files.size(), 1u);
    EXPECT_EQ(slurp(files[0]), "p_omega,value\n");
    EXPECT_NE(log.str().find("warning"), std::string::npos);
    EXPECT_THROW(emit_series(summary, "rmse", dir / "out", {}, nullptr), std::invalid_argument);
    fs::remove_all(dir);
}

TEST(CommandLine, RunAndSeries) {
    const fs::path dir = fresh_dir("cli");
    const fs::path cfg = dir / "exp.cfg";
    {
        std::ofstream f(cfg);
        f << small_config(dir / "out");
    }
    const std::string exe = NETTMLE_CLI_PATH;
    ASSERT_EQ(std::system((exe + " run --config " + cfg.string() + " --jobs 2 2>/dev/null").c_str()), 0);
    EXPECT_EQ(count_lines(dir / "out" / "runs.csv"), 5);
    ASSERT_EQ(std::system((exe + " run --config " + cfg.string() + " --resume 2>/dev/null").c_str()), 0);
    EXPECT_EQ(count_lines(dir / "out" / "runs.csv"), 5);
    const std::string series = exe + " series --summary " + (dir / "out" / "summary.csv").string() +
                               " --metric bias --facet model=glm --out " + (dir / "series").string() + " >/dev/null";
    ASSERT_EQ(std::system(series.c_str()), 0);
    EXPECT_TRUE(fs::exists(dir / "series" / "series_bias_uniform_n500_CC_full_b1.00_all_glm.csv"));
    EXPECT_NE(std::system((exe + " series --summary " + (dir / "out" / "summary.csv").string() + " --metric nope 2>/dev/null").c_str()), 0);

    const fs::path bad = dir / "bad.cfg";
    {
        std::ofstream f(bad);
        f << "graph_kinds = [uniform]\nsizes = [3000]\nmaster_seed = 1\n";
    }
    EXPECT_NE(std::system((exe + " run --config " + bad.string() + " 2>/dev/null").c_str()), 0);
    fs::remove_all(dir);
}
