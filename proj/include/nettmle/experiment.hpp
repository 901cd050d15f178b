#pragma once

// Sweep runner. A work unit is one (graph kind, size, budget, priority,
// p_omega, repeat) cell: it regenerates the network and the observational
// panel, simulates the counterfactual truth and runs every scenario x model
// estimator on the same data. Rows are written in canonical unit order by a
// single writer, whatever the number of workers.
//
// Seeds: the network and observed panel depend on (graph, n, k); the truth
// and the estimator copies also depend on the policy cell. All are derived
// from the master seed through named streams.

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "nettmle/config.hpp"
#include "nettmle/graph.hpp"
#include "nettmle/metrics.hpp"
#include "nettmle/rng.hpp"
#include "nettmle/simdata.hpp"
#include "nettmle/tmle.hpp"

namespace nettmle {

namespace fs = std::filesystem;

inline std::string fixed2(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

inline std::string policy_label(Priority p) { return p == Priority::all ? "full" : "partial"; }

struct WorkUnit {
    GraphKind graph = GraphKind::uniform;
    int n = 0;
    double budget = 1.0;
    Priority priority = Priority::all;
    double p_omega = 0.5;
    int k = 0;

    std::string network_id() const { return std::string(to_string(graph)) + "-n" + std::to_string(n); }
    std::string truth_id() const {
        return network_id() + "-b" + fixed2(budget) + "-" + std::string(to_string(priority)) + "-p" + fixed2(p_omega) + "-k" +
               std::to_string(k);
    }
    std::string run_id(Scenario s, ModelKind m) const {
        return network_id() + "-" + std::string(to_string(s)) + "-b" + fixed2(budget) + "-" + std::string(to_string(priority)) +
               "-p" + fixed2(p_omega) + "-" + std::string(to_string(m)) + "-k" + std::to_string(k);
    }
};

/// Units in canonical order: graph, size, budget, priority, p_omega, repeat.
/// A budget below 1 needs a prioritized plan and is skipped for priority=all.
inline std::vector<WorkUnit> enumerate_units(const ExperimentSpec& s) {
    std::vector<WorkUnit> out;
    for (GraphKind g : s.graph_kinds)
        for (int n : s.sizes)
            for (double b : s.budgets)
                for (Priority pr : s.priorities) {
                    if (pr == Priority::all && b < 1.0) continue;
                    for (double p : s.p_omega_grid)
                        for (int k = 0; k < s.repeats_for(g, n); ++k) out.push_back({g, n, b, pr, p, k});
                }
    return out;
}

inline TemporalNetwork make_network(const ExperimentSpec& s, GraphKind g, int n, std::uint64_t seed) {
    if (g == GraphKind::uniform) return generate_uniform(n, s.uniform_d_min, s.uniform_d_max, seed);
    PowerLawParams pp;
    pp.n = n;
    pp.n_subgraphs = std::max(1, n / s.powerlaw_nodes_per_subgraph);
    pp.powerlaw_exponent = s.powerlaw_exponent;
    pp.inter_edge_prob = std::min(1.0, s.powerlaw_inter_edges / n);
    pp.attach_edges = s.powerlaw_attach_edges;
    pp.triangle_prob = s.powerlaw_triangle_prob;
    return generate_power_law_clustered(pp, seed);
}

struct UnitData {
    TemporalNetwork network;
    Panel observed;
    double psi_truth = 0.0;
};

inline PolicySpec observational_policy(const ExperimentSpec& s) {
    PolicySpec p;
    p.mode = PolicyMode::observational;
    p.coefficients = s.observational_coefficients;
    return p;
}

inline PolicySpec counterfactual_policy(const WorkUnit& u) {
    PolicySpec p;
    p.mode = PolicyMode::counterfactual;
    p.p_omega = u.p_omega;
    p.budget_fraction = u.budget;
    p.priority = u.priority;
    return p;
}

inline UnitData simulate_unit(const ExperimentSpec& s, const WorkUnit& u, bool with_truth = true) {
    UnitData d;
    const std::uint64_t net_seed = derive_seed(s.master_seed, "net:" + u.network_id(), static_cast<std::uint64_t>(u.k));
    d.network = make_network(s, u.graph, u.n, derive_seed(net_seed, "graph"));
    const Snapshot& base = d.network.base();
    const auto xi = draw_static_covariates(u.n, derive_seed(net_seed, "covariates"));
    d.observed = run_sir(base, xi, observational_policy(s), s.sim, derive_seed(net_seed, "observed")).panel;
    if (with_truth)
        d.psi_truth = counterfactual_truth(base, xi, counterfactual_policy(u), s.sim, s.truth_reps,
                                           derive_seed(s.master_seed, "truth:" + u.truth_id()));
    return d;
}

inline EstimatorConfig estimator_config(const ExperimentSpec& s, const WorkUnit& u, Scenario sc, ModelKind m) {
    EstimatorConfig c;
    c.kind = m;
    c.scenario = sc;
    c.m_copies = s.m_copies;
    c.weight_bounds = s.weight_bounds;
    c.l2_penalty = s.l2_penalty;
    c.train = s.train;
    c.sim = s.sim;
    // Shared by every scenario and model of the unit, so they see the same copies.
    c.seed = derive_seed(s.master_seed, "estimate:" + u.truth_id());
    return c;
}

struct RunRow {
    std::string run_id;
    std::string line;  // full CSV row, newline-terminated
    bool failed = false;
};

struct UnitOutput {
    std::vector<RunRow> runs;
    std::optional<std::string> truth_line;
};

inline constexpr std::string_view kTruthCsvHeader = "truth_id,graph,n,p_omega,budget,priority,rep,psi_truth";

inline std::string truth_row(const WorkUnit& u, double psi) {
    std::ostringstream os;
    os << u.truth_id() << ',' << to_string(u.graph) << ',' << u.n << ',' << fixed2(u.p_omega) << ',' << fixed2(u.budget) << ','
       << to_string(u.priority) << ',' << u.k << ',' << format_double(psi) << '\n';
    return os.str();
}

inline RunKey run_key(const WorkUnit& u, Scenario sc, ModelKind m) {
    RunKey k;
    k.run_id = u.run_id(sc, m);
    k.graph = std::string(to_string(u.graph));
    k.n = u.n;
    k.scenario = std::string(to_string(sc));
    k.policy = policy_label(u.priority);
    k.p_omega = u.p_omega;
    k.budget = u.budget;
    k.priority = std::string(to_string(u.priority));
    k.model = std::string(to_string(m));
    return k;
}

inline UnitOutput execute_unit(const ExperimentSpec& s, const WorkUnit& u, const std::set<std::string>& done_runs,
                               const std::set<std::string>& done_truth) {
    UnitOutput out;
    std::vector<std::pair<Scenario, ModelKind>> todo;
    for (Scenario sc : s.scenarios)
        for (ModelKind m : s.models)
            if (!done_runs.count(u.run_id(sc, m))) todo.emplace_back(sc, m);
    const bool need_truth = !done_truth.count(u.truth_id());
    if (todo.empty() && !need_truth) return out;

    std::optional<UnitData> data;
    std::string data_error;
    try {
        data = simulate_unit(s, u, need_truth);
    } catch (const std::exception& e) {
        data_error = e.what();
    }
    if (data && need_truth) out.truth_line = truth_row(u, data->psi_truth);

    for (auto [sc, m] : todo) {
        std::ostringstream os;
        const RunKey key = run_key(u, sc, m);
        EstimateReport rep;
        bool failed = false;
        if (data) {
            try {
                rep = run_estimator(data->observed, data->network.base(), counterfactual_policy(u), estimator_config(s, u, sc, m));
            } catch (const std::exception& e) {
                failed = true;
                rep = EstimateReport{};
                rep.notes = {std::string("failed: ") + e.what()};
            }
        } else {
            failed = true;
            rep.notes = {"failed: data generation: " + data_error};
        }
        if (failed) {
            const double nan = std::numeric_limits<double>::quiet_NaN();
            rep.psi_hat = rep.epsilon = rep.sigma_d2 = rep.sigma_l2 = nan;
            rep.ci_direct = rep.ci_latent = {nan, nan};
            rep.m_copies = s.m_copies;
        }
        write_run_row(os, key, rep);
        out.runs.push_back({key.run_id, os.str(), failed});
    }
    return out;
}

// ---------------------------------------------------------------------------
// CSV reading

inline std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    int column(std::string_view name) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return static_cast<int>(i);
        throw std::runtime_error("csv: missing column " + std::string(name));
    }
};

inline CsvTable read_csv(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path.string());
    CsvTable t;
    std::string line;
    if (!std::getline(f, line)) return t;
    t.header = split_csv(line);
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        auto cells = split_csv(line);
        cells.resize(t.header.size());
        t.rows.push_back(std::move(cells));
    }
    return t;
}

inline std::set<std::string> existing_ids(const fs::path& path) {
    std::set<std::string> ids;
    if (!fs::exists(path)) return ids;
    for (const auto& r : read_csv(path).rows) ids.insert(r[0]);
    return ids;
}

// ---------------------------------------------------------------------------
// Summary

struct SummaryKey {
    std::string graph;
    int n = 0;
    std::string scenario, policy;
    double p_omega = 0.0, budget = 1.0;
    std::string priority, model;

    auto tie() const { return std::tie(graph, n, scenario, policy, budget, priority, model, p_omega); }
    bool operator<(const SummaryKey& o) const { return tie() < o.tie(); }
};

struct SummaryRow {
    SummaryKey key;
    MetricSummary metrics;
};

inline std::string truth_id_for(const std::string& graph, int n, const std::string& budget, const std::string& priority,
                                const std::string& p_omega, const std::string& run_id) {
    const auto kpos = run_id.rfind("-k");
    if (kpos == std::string::npos) throw std::runtime_error("run_id lacks a repeat index: " + run_id);
    return graph + "-n" + std::to_string(n) + "-b" + budget + "-" + priority + "-p" + p_omega + run_id.substr(kpos);
}

/// Groups successful runs by cell and joins each with its truth.
inline std::vector<SummaryRow> summarize_runs(const fs::path& runs_csv, const fs::path& truth_csv) {
    const CsvTable runs = read_csv(runs_csv), truth = read_csv(truth_csv);
    std::map<std::string, double> psi;
    if (!truth.rows.empty()) {
        const int id = truth.column("truth_id"), v = truth.column("psi_truth");
        for (const auto& r : truth.rows) psi[r[id]] = std::stod(r[v]);
    }
    std::map<SummaryKey, RunBatch> groups;
    if (runs.rows.empty()) return {};
    const int c_id = runs.column("run_id"), c_g = runs.column("graph"), c_n = runs.column("n"), c_s = runs.column("scenario"),
              c_pol = runs.column("policy"), c_p = runs.column("p_omega"), c_b = runs.column("budget"),
              c_pr = runs.column("priority"), c_m = runs.column("model"), c_psi = runs.column("psi_hat"),
              c_ld = runs.column("lci_d"), c_ud = runs.column("uci_d"), c_ll = runs.column("lci_l"), c_ul = runs.column("uci_l");
    for (const auto& r : runs.rows) {
        const double psi_hat = std::stod(r[c_psi]);
        if (!std::isfinite(psi_hat)) continue;
        const int n = std::stoi(r[c_n]);
        const std::string tid = truth_id_for(r[c_g], n, r[c_b], r[c_pr], r[c_p], r[c_id]);
        auto it = psi.find(tid);
        if (it == psi.end()) throw std::runtime_error("no truth recorded for " + tid);
        SummaryKey key{r[c_g], n, r[c_s], r[c_pol], std::stod(r[c_p]), std::stod(r[c_b]), r[c_pr], r[c_m]};
        RunEntry e{psi_hat, it->second, std::stod(r[c_ld]), std::stod(r[c_ud]), std::stod(r[c_ll]), std::stod(r[c_ul])};
        groups[key].add(e);
    }
    std::vector<SummaryRow> out;
    for (const auto& [k, b] : groups) out.push_back({k, summarize(b)});
    return out;
}

inline void write_summary_csv(std::ostream& os, const std::vector<SummaryRow>& rows) {
    os << kSummaryCsvHeader << '\n';
    for (const auto& r : rows) {
        const auto& k = r.key;
        const auto& m = r.metrics;
        os << k.graph << ',' << k.n << ',' << k.scenario << ',' << k.policy << ',' << fixed2(k.p_omega) << ',' << fixed2(k.budget)
           << ',' << k.priority << ',' << k.model << ',' << m.u << ',' << format_double(m.bias) << ',' << format_double(m.ese) << ','
           << format_double(m.cover_direct) << ',' << format_double(m.cover_latent) << '\n';
    }
}

inline void rebuild_summary(const fs::path& dir) {
    const auto rows = summarize_runs(dir / "runs.csv", dir / "truth.csv");
    std::ofstream f(dir / "summary.csv");
    write_summary_csv(f, rows);
}

// ---------------------------------------------------------------------------
// Sweep

struct ExperimentOptions {
    int jobs = 1;
    bool resume = false;
    bool truth_only = false;
    std::ostream* log = &std::cerr;
};

struct ExperimentResult {
    fs::path output_dir;
    std::size_t units = 0;
    std::size_t runs_written = 0;
    std::size_t runs_failed = 0;
    int exit_code = 0;
};

inline fs::path resolve_output_dir(const ExperimentSpec& s) {
    if (const char* env = std::getenv("NETTMLE_OUT"); env && *env) return env;
    return s.output_dir;
}

namespace detail {

inline std::ofstream open_table(const fs::path& path, std::string_view header, bool resume) {
    const bool append = resume && fs::exists(path) && fs::file_size(path) > 0;
    std::ofstream f(path, append ? std::ios::app : std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    if (!append) f << header << '\n';
    return f;
}

}  // namespace detail

/// Runs the sweep and writes runs.csv, truth.csv and summary.csv. With
/// `resume`, rows already present are kept and skipped by id.
inline ExperimentResult run_experiment(const ExperimentSpec& spec, const ExperimentOptions& opt = {}) {
    spec.validate();
    ExperimentResult res;
    res.output_dir = resolve_output_dir(spec);
    fs::create_directories(res.output_dir);
    const fs::path runs_path = res.output_dir / "runs.csv", truth_path = res.output_dir / "truth.csv";

    std::set<std::string> done_runs, done_truth;
    if (opt.resume) {
        done_runs = existing_ids(runs_path);
        done_truth = existing_ids(truth_path);
    }
    if (opt.truth_only) done_runs.clear();

    ExperimentSpec work = spec;
    if (opt.truth_only) work.models.clear();
    const auto units = enumerate_units(spec);
    res.units = units.size();

    std::ofstream runs_out;
    if (!opt.truth_only) runs_out = detail::open_table(runs_path, kRunCsvHeader, opt.resume);
    std::ofstream truth_out = detail::open_table(truth_path, kTruthCsvHeader, opt.resume);

    std::vector<std::optional<UnitOutput>> results(units.size());
    std::mutex mu;
    std::condition_variable cv;
    std::atomic<std::size_t> next{0};

    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= units.size()) return;
            UnitOutput o = execute_unit(work, units[i], done_runs, done_truth);
            {
                std::lock_guard lk(mu);
                results[i] = std::move(o);
            }
            cv.notify_all();
        }
    };
    const int jobs = std::max(1, opt.jobs);
    std::vector<std::jthread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);

    for (std::size_t i = 0; i < units.size(); ++i) {
        UnitOutput o;
        {
            std::unique_lock lk(mu);
            cv.wait(lk, [&] { return results[i].has_value(); });
            o = std::move(*results[i]);
            results[i].reset();
        }
        if (o.truth_line) truth_out << *o.truth_line;
        for (const auto& r : o.runs) {
            runs_out << r.line;
            ++res.runs_written;
            res.runs_failed += r.failed;
            if (r.failed && opt.log) *opt.log << "warning: run " << r.run_id << " failed\n";
        }
        runs_out.flush();
        truth_out.flush();
        if (opt.log && (!o.runs.empty() || o.truth_line))
            *opt.log << "[" << (i + 1) << "/" << units.size() << "] " << units[i].truth_id() << '\n';
    }
    pool.clear();
    runs_out.close();
    truth_out.close();

    if (!opt.truth_only) rebuild_summary(res.output_dir);
    if (res.runs_written > 0 && static_cast<double>(res.runs_failed) > 0.1 * static_cast<double>(res.runs_written)) res.exit_code = 1;
    return res;
}

// ---------------------------------------------------------------------------
// Plot series

struct FacetFilter {
    std::map<std::string, std::string> equals;  // column -> required value
};

inline std::string facet_name(const SummaryKey& k) {
    return k.graph + "_n" + std::to_string(k.n) + "_" + k.scenario + "_" + k.policy + "_b" + fixed2(k.budget) + "_" + k.priority +
           "_" + k.model;
}

inline std::vector<SummaryRow> read_summary_csv(const fs::path& path) {
    const CsvTable t = read_csv(path);
    std::vector<SummaryRow> out;
    if (t.rows.empty()) return out;
    const int g = t.column("graph"), n = t.column("n"), s = t.column("scenario"), pol = t.column("policy"), p = t.column("p_omega"),
              b = t.column("budget"), pr = t.column("priority"), m = t.column("model"), u = t.column("U"), bi = t.column("bias"),
              es = t.column("ese"), cd = t.column("cover_direct"), cl = t.column("cover_latent");
    for (const auto& r : t.rows) {
        SummaryRow row;
        row.key = {r[g], std::stoi(r[n]), r[s], r[pol], std::stod(r[p]), std::stod(r[b]), r[pr], r[m]};
        row.metrics = {static_cast<std::size_t>(std::stoul(r[u])), std::stod(r[bi]), std::stod(r[es]), std::stod(r[cd]),
                       std::stod(r[cl])};
        out.push_back(std::move(row));
    }
    return out;
}

inline bool matches(const SummaryKey& k, const FacetFilter& f) {
    for (const auto& [col, val] : f.equals) {
        std::string have;
        if (col == "graph") have = k.graph;
        else if (col == "n") have = std::to_string(k.n);
        else if (col == "scenario") have = k.scenario;
        else if (col == "policy") have = k.policy;
        else if (col == "budget") have = fixed2(k.budget);
        else if (col == "priority") have = k.priority;
        else if (col == "model") have = k.model;
        else throw std::invalid_argument("unknown facet key: " + col);
        if (col == "budget" ? fixed2(std::stod(val)) != have : val != have) return false;
    }
    return true;
}

/// Writes one `p_omega,value` file per facet (all summary keys except
/// p_omega). A filter that matches nothing yields one empty file.
inline std::vector<fs::path> emit_series(const fs::path& summary_csv, std::string_view metric, const fs::path& out_dir,
                                         const FacetFilter& filter = {}, std::ostream* log = &std::cerr) {
    bool known = false;
    for (auto m : kMetricNames) known = known || m == metric;
    if (!known) throw std::invalid_argument("unknown metric: " + std::string(metric));
    fs::create_directories(out_dir);
    std::map<std::string, std::vector<std::pair<double, double>>> facets;
    for (const auto& r : read_summary_csv(summary_csv))
        if (matches(r.key, filter)) facets[facet_name(r.key)].emplace_back(r.key.p_omega, metric_value(r.metrics, metric));

    std::vector<fs::path> written;
    auto write = [&](const std::string& name, std::vector<std::pair<double, double>> pts) {
        std::sort(pts.begin(), pts.end());
        const fs::path path = out_dir / ("series_" + std::string(metric) + "_" + name + ".csv");
        std::ofstream f(path);
        f << "p_omega,value\n";
        for (auto [p, v] : pts) f << fixed2(p) << ',' << format_double(v) << '\n';
        written.push_back(path);
    };
    if (facets.empty()) {
        std::string name = "empty";
        for (const auto& [c, v] : filter.equals) name += "_" + c + "-" + v;
        if (log) *log << "warning: no summary rows match the requested facet; writing empty series\n";
        write(name, {});
        return written;
    }
    for (auto& [name, pts] : facets) write(name, std::move(pts));
    return written;
}

}  // namespace nettmle
