#pragma once

// SIR epidemics with quarantine on a contact network, observational panels,
// counterfactual ground truth and policy-sampled copies.
//
// Timing convention for step t = 1..T:
//   1. covariates xi(t), xi_s(t) are measured from the realized snapshot
//      gamma(t-1) and compartments at t-1;
//   2. quarantine activations are drawn for nodes not already in quarantine;
//      alpha(t) = 1 for every node whose quarantine covers step t;
//   3. alpha_s(t) is counted on gamma(t-1), before this step's removals;
//   4. gamma(t) = base minus every edge touching a quarantined node
//      (edges are kept in leaky mode);
//   5. nodes infectious at t-1 transmit along gamma(t);
//   6. nodes infectious for the full infectious duration recover.
// Record t = 0 holds the initial state: no quarantine, and covariates that do
// not reveal the initially infected nodes.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "nettmle/common.hpp"
#include "nettmle/graph.hpp"
#include "nettmle/rng.hpp"

namespace nettmle {

enum class Priority { all, most_connected, least_connected };
enum class PolicyMode { observational, counterfactual };
enum class Compartment : std::uint8_t { S, I, R };

inline std::string_view to_string(Priority p) {
    switch (p) {
        case Priority::all: return "all";
        case Priority::most_connected: return "most_connected";
        case Priority::least_connected: return "least_connected";
    }
    return "?";
}

inline Priority parse_priority(std::string_view s) {
    if (s == "all") return Priority::all;
    if (s == "most_connected") return Priority::most_connected;
    if (s == "least_connected") return Priority::least_connected;
    throw std::invalid_argument("unknown priority: " + std::string(s));
}

inline char to_char(Compartment c) { return c == Compartment::S ? 'S' : (c == Compartment::I ? 'I' : 'R'); }

/// Number of observational-policy coefficients: [1, xi (3), xi_s (2)].
inline constexpr std::size_t kObservationalDesignSize = 6;

struct PolicySpec {
    double p_omega = 0.5;
    double budget_fraction = 1.0;
    Priority priority = Priority::all;
    PolicyMode mode = PolicyMode::counterfactual;
    // Logistic compliance model used in observational mode, ordered as
    // [intercept, xi_static, xi_inf_nbrs, xi_quar_hist, xi_s_mean, xi_s_infsum].
    std::vector<double> coefficients = {-1.5, 0.5, 0.9, -0.3, 0.0, 0.25};

    void validate() const {
        require(p_omega >= 0.0 && p_omega <= 1.0, "policy: p_omega must lie in [0, 1]");
        require(budget_fraction > 0.0 && budget_fraction <= 1.0, "policy: budget_fraction must lie in (0, 1]");
        require(priority != Priority::all || budget_fraction == 1.0, "policy: priority=all requires budget_fraction=1.0");
        if (mode == PolicyMode::observational)
            require(coefficients.size() == kObservationalDesignSize, "policy: observational coefficients must have length 6");
    }
};

struct SimConfig {
    int t_steps = 10;
    int infectious_duration = 5;
    int quarantine_period = 2;
    double init_infected_fraction = 0.01;
    double transmission_prob = 0.2;
    double leaky_multiplier = 1.0;       // 1.0 means quarantine removes edges
    double susceptibility_weight = 1.0;  // per-contact risk scales by 1 + w (xi_static - 0.5)
    bool allow_requarantine = true;
    std::uint64_t seed = 0;

    bool leaky() const { return leaky_multiplier < 1.0; }

    void validate() const {
        require(t_steps >= 1, "sim: t_steps must be >= 1");
        require(quarantine_period >= 1, "sim: quarantine_period must be >= 1");
        require(infectious_duration >= 1, "sim: infectious_duration must be >= 1");
        require(transmission_prob >= 0.0 && transmission_prob <= 1.0, "sim: transmission_prob must lie in [0, 1]");
        require(leaky_multiplier >= 0.0 && leaky_multiplier <= 1.0, "sim: leaky_multiplier must lie in [0, 1]");
        require(init_infected_fraction >= 0.0 && init_infected_fraction <= 1.0, "sim: init_infected_fraction must lie in [0, 1]");
        require(susceptibility_weight >= 0.0 && susceptibility_weight <= 2.0, "sim: susceptibility_weight must lie in [0, 2]");
    }
};

/// Panel variables addressable by name.
enum class Var { alpha, alpha_s, xi_static, xi_inf_nbrs, xi_quar_hist, xi_s_mean, xi_s_infsum };

inline constexpr std::array<Var, 7> kAllVars = {Var::alpha,        Var::alpha_s,   Var::xi_static,  Var::xi_inf_nbrs,
                                                Var::xi_quar_hist, Var::xi_s_mean, Var::xi_s_infsum};

inline std::string_view to_string(Var v) {
    switch (v) {
        case Var::alpha: return "alpha";
        case Var::alpha_s: return "alpha_s";
        case Var::xi_static: return "xi_static";
        case Var::xi_inf_nbrs: return "xi_inf_nbrs";
        case Var::xi_quar_hist: return "xi_quar_hist";
        case Var::xi_s_mean: return "xi_s_mean";
        case Var::xi_s_infsum: return "xi_s_infsum";
    }
    return "?";
}

inline Var parse_var(std::string_view s) {
    for (Var v : kAllVars)
        if (to_string(v) == s) return v;
    throw std::invalid_argument("unknown variable name: " + std::string(s));
}

/// Per-node, per-time records. Time-indexed fields are stored [t][i] for
/// t = 0..t_steps. Policy-sampled copies leave `state` and `upsilon` empty.
struct Panel {
    int n = 0;
    int t_steps = 0;
    std::vector<double> xi_static;
    std::vector<std::vector<int>> alpha;
    std::vector<std::vector<int>> activated;  // 1 where a quarantine starts at t
    std::vector<std::vector<int>> alpha_s;
    std::vector<std::vector<int>> xi_inf_nbrs;   // infectious contacts on gamma(t-1)
    std::vector<std::vector<int>> xi_quar_hist;  // quarantined steps before t
    std::vector<std::vector<double>> xi_s_mean;  // neighbor mean of xi_static on gamma(t-1)
    std::vector<std::vector<int>> xi_s_infsum;   // ever-infected neighbors in the base graph by t-1
    std::vector<std::vector<Compartment>> state;
    std::vector<int> upsilon;

    bool labeled() const { return !upsilon.empty(); }

    double value(Var v, int t, int i) const {
        switch (v) {
            case Var::alpha: return alpha[t][i];
            case Var::alpha_s: return alpha_s[t][i];
            case Var::xi_static: return xi_static[i];
            case Var::xi_inf_nbrs: return xi_inf_nbrs[t][i];
            case Var::xi_quar_hist: return xi_quar_hist[t][i];
            case Var::xi_s_mean: return xi_s_mean[t][i];
            case Var::xi_s_infsum: return xi_s_infsum[t][i];
        }
        return 0.0;
    }

    double mean_outcome() const {
        require(labeled(), "panel has no outcomes");
        return std::accumulate(upsilon.begin(), upsilon.end(), 0.0) / n;
    }

    void resize(int nodes, int steps) {
        n = nodes;
        t_steps = steps;
        const auto rows = static_cast<std::size_t>(steps) + 1;
        const auto cols = static_cast<std::size_t>(nodes);
        alpha.assign(rows, std::vector<int>(cols, 0));
        activated.assign(rows, std::vector<int>(cols, 0));
        alpha_s.assign(rows, std::vector<int>(cols, 0));
        xi_inf_nbrs.assign(rows, std::vector<int>(cols, 0));
        xi_quar_hist.assign(rows, std::vector<int>(cols, 0));
        xi_s_mean.assign(rows, std::vector<double>(cols, 0.0));
        xi_s_infsum.assign(rows, std::vector<int>(cols, 0));
    }
};

struct SirResult {
    Panel panel;
    TemporalNetwork realized;
    std::vector<std::array<int, 3>> counts;    // |S|, |I|, |R| per t
    std::vector<int> infection_time;           // -1 if never infected
};

inline std::vector<double> draw_static_covariates(int n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> xi(static_cast<std::size_t>(n));
    for (auto& x : xi) x = rng.uniform();
    return xi;
}

inline int initial_infected_count(int n, double fraction) {
    return std::min(n, static_cast<int>(std::ceil(fraction * n - 1e-9)));
}

inline double observational_probability(std::span<const double> design, std::span<const double> coeffs) {
    require(design.size() == coeffs.size(), "observational_assignment: coefficient length does not match design");
    double eta = 0.0;
    for (std::size_t k = 0; k < design.size(); ++k) eta += design[k] * coeffs[k];
    return expit(eta);
}

/// Draws quarantine compliance for each row of `designs` ([1, xi, xi_s] per row).
inline std::vector<int> observational_assignment(std::span<const std::array<double, kObservationalDesignSize>> designs,
                                                 std::span<const double> coeffs, Rng& rng) {
    require(coeffs.size() == kObservationalDesignSize, "observational_assignment: coefficient length does not match design");
    std::vector<int> out(designs.size());
    for (std::size_t i = 0; i < designs.size(); ++i) out[i] = rng.bernoulli(observational_probability(designs[i], coeffs)) ? 1 : 0;
    return out;
}

namespace detail {

inline Snapshot remove_quarantined(const Snapshot& base, std::span<const int> quarantined) {
    std::vector<std::pair<int, int>> kept;
    for (auto [i, j] : base.edges())
        if (!quarantined[i] && !quarantined[j]) kept.emplace_back(i, j);
    return Snapshot::from_edges(base.size(), kept);
}

// Core stepping loop. When `observed` is set the disease is not simulated:
// compartments are read from the observed panel (policy-sampled copies).
inline SirResult simulate(const Snapshot& base, std::span<const double> xi_static, const PolicySpec& policy,
                          const SimConfig& cfg, Rng& rng, const Panel* observed) {
    policy.validate();
    cfg.validate();
    const int n = base.size();
    const int T = cfg.t_steps;
    require(static_cast<int>(xi_static.size()) == n, "simulate: static covariate length mismatch");
    if (observed) require(observed->n == n && observed->t_steps == T && !observed->state.empty(),
                          "sample_policy_copies: observed panel does not match network/config");

    SirResult res;
    Panel& p = res.panel;
    p.resize(n, T);
    p.xi_static.assign(xi_static.begin(), xi_static.end());
    res.realized.n = n;
    res.realized.snapshots.push_back(base);

    std::vector<Compartment> st(n, Compartment::S);
    res.infection_time.assign(static_cast<std::size_t>(n), -1);
    if (observed) {
        st = observed->state[0];
    } else {
        for (int i : rng.sample_without_replacement(n, initial_infected_count(n, cfg.init_infected_fraction))) {
            st[i] = Compartment::I;
            res.infection_time[i] = 0;
        }
        p.state.push_back(st);
    }
    auto count = [&](const std::vector<Compartment>& s) {
        std::array<int, 3> c{0, 0, 0};
        for (auto x : s) ++c[static_cast<int>(x)];
        return c;
    };
    res.counts.push_back(count(st));

    {
        auto m = summary_covariate(base, xi_static, SummaryMeasure::mean);
        p.xi_s_mean[0] = std::move(m);
    }

    std::vector<int> quar_until(n, -1);
    std::vector<int> ever_quarantined(n, 0);
    std::vector<int> quar_hist(n, 0);
    std::vector<std::array<double, kObservationalDesignSize>> rows;
    const int budget_count = static_cast<int>(std::ceil(policy.budget_fraction * n - 1e-9));

    for (int t = 1; t <= T; ++t) {
        const Snapshot& prev = res.realized.snapshots[t - 1];
        const std::vector<Compartment>& st_prev = observed ? observed->state[t - 1] : st;

        // 1. covariates
        for (int i = 0; i < n; ++i) {
            int inf = 0;
            double smean = 0.0;
            for (int j : prev.neighbors(i)) {
                inf += st_prev[j] == Compartment::I;
                smean += xi_static[j];
            }
            int ever = 0;
            for (int j : base.neighbors(i)) ever += st_prev[j] != Compartment::S;
            p.xi_inf_nbrs[t][i] = inf;
            p.xi_s_mean[t][i] = prev.degree(i) > 0 ? smean / prev.degree(i) : 0.0;
            p.xi_s_infsum[t][i] = ever;
            p.xi_quar_hist[t][i] = quar_hist[i];
        }

        // 2. quarantine activations
        std::vector<int> candidates;
        for (int i = 0; i < n; ++i)
            if (quar_until[i] < t && (cfg.allow_requarantine || !ever_quarantined[i])) candidates.push_back(i);

        std::vector<int>& act = p.activated[t];
        if (policy.mode == PolicyMode::observational) {
            rows.resize(candidates.size());
            for (std::size_t k = 0; k < candidates.size(); ++k) {
                const int i = candidates[k];
                rows[k] = {1.0, xi_static[i], double(p.xi_inf_nbrs[t][i]), double(p.xi_quar_hist[t][i]),
                           p.xi_s_mean[t][i], double(p.xi_s_infsum[t][i])};
            }
            auto draw = observational_assignment(rows, policy.coefficients, rng);
            for (std::size_t k = 0; k < candidates.size(); ++k) act[candidates[k]] = draw[k];
        } else {
            if (policy.priority != Priority::all) {
                const bool most = policy.priority == Priority::most_connected;
                std::stable_sort(candidates.begin(), candidates.end(), [&](int a, int b) {
                    return most ? prev.degree(a) > prev.degree(b) : prev.degree(a) < prev.degree(b);
                });
                if (static_cast<int>(candidates.size()) > budget_count) candidates.resize(static_cast<std::size_t>(budget_count));
            }
            for (int i : candidates) act[i] = rng.bernoulli(policy.p_omega) ? 1 : 0;
        }
        for (int i = 0; i < n; ++i) {
            if (act[i]) {
                quar_until[i] = t + cfg.quarantine_period - 1;
                ever_quarantined[i] = 1;
            }
            p.alpha[t][i] = quar_until[i] >= t ? 1 : 0;
            quar_hist[i] += p.alpha[t][i];
        }

        // 3. summary exposure on the pre-removal snapshot
        p.alpha_s[t] = summary_exposure(prev, p.alpha[t]);

        // 4. realized contacts
        res.realized.snapshots.push_back(cfg.leaky() ? base : remove_quarantined(base, p.alpha[t]));
        const Snapshot& cur = res.realized.snapshots[t];

        if (observed) {
            res.counts.push_back(count(observed->state[t]));
            continue;
        }

        // 5. transmission from nodes infectious at t-1
        std::vector<int> newly;
        for (int i = 0; i < n; ++i) {
            if (st[i] != Compartment::S) continue;
            const double susc = 1.0 + cfg.susceptibility_weight * (xi_static[i] - 0.5);
            bool infected = false;
            for (int j : cur.neighbors(i)) {
                if (st[j] != Compartment::I) continue;
                double q = cfg.transmission_prob * susc;
                if (cfg.leaky() && (p.alpha[t][i] || p.alpha[t][j])) q *= cfg.leaky_multiplier;
                if (rng.bernoulli(std::min(q, 1.0))) infected = true;
            }
            if (infected) newly.push_back(i);
        }
        // 6. recovery, then new infections
        for (int i = 0; i < n; ++i)
            if (st[i] == Compartment::I && t - res.infection_time[i] >= cfg.infectious_duration) st[i] = Compartment::R;
        for (int i : newly) {
            st[i] = Compartment::I;
            res.infection_time[i] = t;
        }
        p.state.push_back(st);
        res.counts.push_back(count(st));
    }

    if (!observed) {
        p.upsilon.assign(static_cast<std::size_t>(n), 0);
        for (int i = 0; i < n; ++i) p.upsilon[i] = res.infection_time[i] >= 0 ? 1 : 0;
    }
    return res;
}

}  // namespace detail

/// Simulates one epidemic. `xi_static` are the population's baseline
/// susceptibilities; the policy's mode selects the quarantine rule.
inline SirResult run_sir(const Snapshot& base, std::span<const double> xi_static, const PolicySpec& policy,
                         const SimConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    return detail::simulate(base, xi_static, policy, cfg, rng, nullptr);
}

/// Mean ever-infected fraction over `n_reps` independent epidemics under the policy.
inline double counterfactual_truth(const Snapshot& base, std::span<const double> xi_static, const PolicySpec& policy,
                                   const SimConfig& cfg, int n_reps, std::uint64_t seed) {
    require(n_reps >= 1, "counterfactual_truth: n_reps must be >= 1");
    double total = 0.0;
    for (int r = 0; r < n_reps; ++r) total += run_sir(base, xi_static, policy, cfg, derive_seed(seed, r)).panel.mean_outcome();
    return total / n_reps;
}

struct PolicyCopy {
    Panel panel;
    TemporalNetwork realized;
};

inline constexpr std::size_t kDefaultRecordBudget = 5'000'000;

/// Draws M policy-sampled copies of the observed panel. Exposures follow the
/// counterfactual policy; contact-based covariates are recomputed on each
/// copy's realized network from the observed compartments. Copies carry no
/// outcome labels.
inline std::vector<PolicyCopy> sample_policy_copies(const Panel& observed, const Snapshot& base, const PolicySpec& policy,
                                                    const SimConfig& cfg, int m_copies, std::uint64_t seed,
                                                    std::size_t record_budget = kDefaultRecordBudget) {
    require(m_copies >= 1, "sample_policy_copies: M must be >= 1");
    require(policy.mode == PolicyMode::counterfactual, "sample_policy_copies: policy must be in counterfactual mode");
    const std::size_t records = static_cast<std::size_t>(m_copies) * static_cast<std::size_t>(observed.n);
    if (records > record_budget) {
        const std::size_t suggested = std::max<std::size_t>(1, record_budget / std::max(1, observed.n));
        throw resource_error("sample_policy_copies: M*N = " + std::to_string(records) + " exceeds record budget " +
                             std::to_string(record_budget) + "; use m_copies <= " + std::to_string(suggested));
    }
    std::vector<PolicyCopy> out;
    out.reserve(static_cast<std::size_t>(m_copies));
    for (int l = 0; l < m_copies; ++l) {
        Rng rng(derive_seed(seed, l));
        auto r = detail::simulate(base, observed.xi_static, policy, cfg, rng, &observed);
        out.push_back({std::move(r.panel), std::move(r.realized)});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Panel CSV

inline constexpr std::string_view kPanelCsvHeader =
    "rep,t,node,alpha,alpha_s,state,xi_static,xi_inf_nbrs,xi_quar_hist,xi_s_mean,xi_s_infsum,upsilon_final";

inline void write_panel_csv(std::ostream& os, const Panel& p, int rep, bool header = true) {
    if (header) os << kPanelCsvHeader << '\n';
    char buf[64];
    for (int t = 0; t <= p.t_steps; ++t) {
        for (int i = 0; i < p.n; ++i) {
            os << rep << ',' << t << ',' << i << ',' << p.alpha[t][i] << ',' << p.alpha_s[t][i] << ',';
            if (!p.state.empty()) os << to_char(p.state[t][i]);
            std::snprintf(buf, sizeof buf, "%.17g", p.xi_static[i]);
            os << ',' << buf << ',' << p.xi_inf_nbrs[t][i] << ',' << p.xi_quar_hist[t][i] << ',';
            std::snprintf(buf, sizeof buf, "%.17g", p.xi_s_mean[t][i]);
            os << buf << ',' << p.xi_s_infsum[t][i] << ',';
            if (p.labeled()) os << p.upsilon[i];
            os << '\n';
        }
    }
}

/// Reads the rows of one replicate (all rows when `rep` is unset).
inline Panel read_panel_csv(std::istream& is, std::optional<int> rep = std::nullopt) {
    std::string line;
    if (!std::getline(is, line) || line != kPanelCsvHeader) throw std::invalid_argument("panel csv: bad header");
    struct Row {
        int t, node, alpha, alpha_s, inf, qh, infsum, ups;
        char state;
        double xs, smean;
    };
    std::vector<Row> rows;
    int n = 0, T = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        if (line.back() == ',') f.emplace_back();
        if (f.size() != 12) throw std::invalid_argument("panel csv: expected 12 columns");
        if (rep && std::stoi(f[0]) != *rep) continue;
        Row r{std::stoi(f[1]), std::stoi(f[2]), std::stoi(f[3]), std::stoi(f[4]), std::stoi(f[7]), std::stoi(f[8]),
              std::stoi(f[10]), f[11].empty() ? -1 : std::stoi(f[11]), f[5].empty() ? '\0' : f[5][0], std::stod(f[6]),
              std::stod(f[9])};
        n = std::max(n, r.node + 1);
        T = std::max(T, r.t);
        rows.push_back(r);
    }
    Panel p;
    p.resize(n, T);
    p.xi_static.assign(static_cast<std::size_t>(n), 0.0);
    const bool has_state = !rows.empty() && rows.front().state != '\0';
    const bool has_y = !rows.empty() && rows.front().ups >= 0;
    if (has_state) p.state.assign(static_cast<std::size_t>(T) + 1, std::vector<Compartment>(static_cast<std::size_t>(n)));
    if (has_y) p.upsilon.assign(static_cast<std::size_t>(n), 0);
    for (const auto& r : rows) {
        p.alpha[r.t][r.node] = r.alpha;
        p.alpha_s[r.t][r.node] = r.alpha_s;
        p.xi_static[r.node] = r.xs;
        p.xi_inf_nbrs[r.t][r.node] = r.inf;
        p.xi_quar_hist[r.t][r.node] = r.qh;
        p.xi_s_mean[r.t][r.node] = r.smean;
        p.xi_s_infsum[r.t][r.node] = r.infsum;
        if (has_state) p.state[r.t][r.node] = r.state == 'S' ? Compartment::S : (r.state == 'I' ? Compartment::I : Compartment::R);
        if (has_y) p.upsilon[r.node] = r.ups;
    }
    // Activations are not stored; rising edges of alpha recover them except
    // for back-to-back re-quarantines.
    for (int t = 1; t <= T; ++t)
        for (int i = 0; i < n; ++i) p.activated[t][i] = p.alpha[t][i] && !p.alpha[t - 1][i];
    return p;
}

}  // namespace nettmle
