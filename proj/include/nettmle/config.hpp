#pragma once

// Experiment configuration: flat `key = value` files, `#` comments, lists in
// brackets (`sizes = [500, 1000]`).

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "nettmle/common.hpp"
#include "nettmle/deepnet.hpp"
#include "nettmle/glm.hpp"
#include "nettmle/graph.hpp"
#include "nettmle/simdata.hpp"
#include "nettmle/tmle.hpp"

namespace nettmle {

enum class GraphKind { uniform, powerlaw };

inline std::string_view to_string(GraphKind g) { return g == GraphKind::uniform ? "uniform" : "powerlaw"; }

inline GraphKind parse_graph_kind(std::string_view s) {
    if (s == "uniform") return GraphKind::uniform;
    if (s == "powerlaw") return GraphKind::powerlaw;
    throw config_error("unknown graph kind: " + std::string(s));
}

/// 0.05, 0.10, ..., 0.95.
inline std::vector<double> default_p_omega_grid() {
    std::vector<double> g;
    for (int k = 1; k <= 19; ++k) g.push_back(k * 0.05);
    return g;
}

struct ExperimentSpec {
    std::vector<GraphKind> graph_kinds;
    std::vector<int> sizes;
    std::vector<Scenario> scenarios{Scenario::CC};
    std::vector<double> p_omega_grid = default_p_omega_grid();
    std::vector<double> budgets{1.0};
    std::vector<Priority> priorities{Priority::all};
    int repeats = 30;
    int repeats_powerlaw_2000 = 15;
    std::vector<ModelKind> models{ModelKind::glm};
    std::uint64_t master_seed = 0;
    std::string output_dir = "nettmle_out";
    bool allow_custom_sizes = false;

    int truth_reps = 30;
    int m_copies = 50;
    double l2_penalty = 1.0;
    std::pair<double, double> weight_bounds{0.01, 100.0};

    int uniform_d_min = 1;
    int uniform_d_max = 6;
    double powerlaw_exponent = 2.5;
    int powerlaw_nodes_per_subgraph = 100;
    double powerlaw_inter_edges = 0.5;  // inter-subgraph edge probability is this value / n
    double powerlaw_triangle_prob = 0.1;
    int powerlaw_attach_edges = 2;

    SimConfig sim;
    std::vector<double> observational_coefficients = PolicySpec{}.coefficients;
    TrainConfig train;

    int repeats_for(GraphKind g, int n) const {
        return g == GraphKind::powerlaw && n == 2000 ? std::min(repeats, repeats_powerlaw_2000) : repeats;
    }

    void validate() const {
        auto need = [](bool ok, const std::string& msg) {
            if (!ok) throw config_error(msg);
        };
        need(!graph_kinds.empty(), "graph_kinds must not be empty");
        need(!sizes.empty(), "sizes must not be empty");
        need(!scenarios.empty(), "scenarios must not be empty");
        need(!models.empty(), "models must not be empty");
        need(!p_omega_grid.empty(), "p_omega_grid must not be empty");
        need(!budgets.empty() && !priorities.empty(), "budgets and priorities must not be empty");
        for (int n : sizes) {
            need(n >= 10, "size " + std::to_string(n) + " is too small");
            if (!allow_custom_sizes)
                need(n == 500 || n == 1000 || n == 2000,
                     "size " + std::to_string(n) + " is unsupported without allow_custom_sizes = true");
        }
        for (double p : p_omega_grid) need(p > 0.0 && p < 1.0, "p_omega_grid values must lie strictly in (0, 1)");
        for (double b : budgets) need(b > 0.0 && b <= 1.0, "budgets must lie in (0, 1]");
        need(repeats >= 1 && repeats_powerlaw_2000 >= 1, "repeats must be >= 1");
        need(truth_reps >= 1, "truth_reps must be >= 1");
        need(m_copies >= 1, "m_copies must be >= 1");
        need(weight_bounds.first > 0.0 && weight_bounds.first <= weight_bounds.second, "weight bounds must satisfy 0 < low <= high");
        need(uniform_d_min >= 1 && uniform_d_min <= uniform_d_max, "uniform degree range is invalid");
        need(powerlaw_exponent > 2.0, "powerlaw_exponent must exceed 2");
        need(observational_coefficients.size() == kObservationalDesignSize, "observational_coefficients must have 6 entries");
        try {
            sim.validate();
            train.validate();
        } catch (const std::invalid_argument& e) {
            throw config_error(e.what());
        }
        for (ModelKind m : models)
            if (m == ModelKind::deep)
                need(train.reception_field <= sim.t_steps + 1, "reception_field exceeds t_steps + 1");
    }
};

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(const std::string& key, const std::string& v) {
    std::string body = v;
    if (!body.empty() && body.front() == '[') {
        if (body.back() != ']') throw config_error("unterminated list for key " + key);
        body = body.substr(1, body.size() - 2);
    }
    std::vector<std::string> out;
    std::stringstream ss(body);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& s) {
    T v{};
    const char* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || ptr != end) throw config_error("malformed number '" + s + "' for key " + key);
    return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw config_error("malformed boolean '" + s + "' for key " + key);
}

template <class T, class F>
std::vector<T> parse_list(const std::string& key, const std::string& v, F&& one) {
    std::vector<T> out;
    for (const auto& item : split_list(key, v)) out.push_back(one(item));
    return out;
}

template <class F>
auto enum_or_config_error(const std::string& key, F&& f) {
    return [&key, f](const std::string& s) {
        try {
            return f(s);
        } catch (const std::invalid_argument&) {
            throw config_error("unknown value '" + s + "' for key " + key);
        }
    };
}

}  // namespace detail

inline ExperimentSpec parse_config_text(std::string_view text) {
    using namespace detail;
    std::map<std::string, std::string> kv;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw config_error("line " + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(std::string_view(line).substr(0, eq)), value = trim(std::string_view(line).substr(eq + 1));
        if (key.empty()) throw config_error("line " + std::to_string(lineno) + ": empty key");
        if (!kv.emplace(key, value).second) throw config_error("duplicate key: " + key);
    }

    for (const char* req : {"graph_kinds", "sizes", "master_seed"})
        if (!kv.count(req)) throw config_error(std::string("missing required key: ") + req);

    ExperimentSpec s;
    for (const auto& [key, v] : kv) {
        auto dbl = [&](const std::string& x) { return parse_number<double>(key, x); };
        auto integer = [&](const std::string& x) { return parse_number<int>(key, x); };
        if (key == "graph_kinds") s.graph_kinds = parse_list<GraphKind>(key, v, enum_or_config_error(key, parse_graph_kind));
        else if (key == "sizes") s.sizes = parse_list<int>(key, v, integer);
        else if (key == "scenarios") s.scenarios = parse_list<Scenario>(key, v, enum_or_config_error(key, [](const std::string& x) { return parse_scenario(x); }));
        else if (key == "p_omega_grid") s.p_omega_grid = v == "default" ? default_p_omega_grid() : parse_list<double>(key, v, dbl);
        else if (key == "budgets") s.budgets = parse_list<double>(key, v, dbl);
        else if (key == "priorities") s.priorities = parse_list<Priority>(key, v, enum_or_config_error(key, [](const std::string& x) { return parse_priority(x); }));
        else if (key == "repeats") s.repeats = integer(v);
        else if (key == "repeats_powerlaw_2000") s.repeats_powerlaw_2000 = integer(v);
        else if (key == "models") s.models = parse_list<ModelKind>(key, v, enum_or_config_error(key, [](const std::string& x) { return parse_model_kind(x); }));
        else if (key == "master_seed") s.master_seed = parse_number<std::uint64_t>(key, v);
        else if (key == "output_dir") s.output_dir = v;
        else if (key == "allow_custom_sizes") s.allow_custom_sizes = parse_bool(key, v);
        else if (key == "truth_reps") s.truth_reps = integer(v);
        else if (key == "m_copies") s.m_copies = integer(v);
        else if (key == "l2_penalty") s.l2_penalty = dbl(v);
        else if (key == "weight_low") s.weight_bounds.first = dbl(v);
        else if (key == "weight_high") s.weight_bounds.second = dbl(v);
        else if (key == "uniform_d_min") s.uniform_d_min = integer(v);
        else if (key == "uniform_d_max") s.uniform_d_max = integer(v);
        else if (key == "powerlaw_exponent") s.powerlaw_exponent = dbl(v);
        else if (key == "powerlaw_nodes_per_subgraph") s.powerlaw_nodes_per_subgraph = integer(v);
        else if (key == "powerlaw_inter_edges") s.powerlaw_inter_edges = dbl(v);
        else if (key == "powerlaw_triangle_prob") s.powerlaw_triangle_prob = dbl(v);
        else if (key == "powerlaw_attach_edges") s.powerlaw_attach_edges = integer(v);
        else if (key == "t_steps") s.sim.t_steps = integer(v);
        else if (key == "infectious_duration") s.sim.infectious_duration = integer(v);
        else if (key == "quarantine_period") s.sim.quarantine_period = integer(v);
        else if (key == "init_infected_fraction") s.sim.init_infected_fraction = dbl(v);
        else if (key == "transmission_prob") s.sim.transmission_prob = dbl(v);
        else if (key == "leaky_multiplier") s.sim.leaky_multiplier = dbl(v);
        else if (key == "susceptibility_weight") s.sim.susceptibility_weight = dbl(v);
        else if (key == "allow_requarantine") s.sim.allow_requarantine = parse_bool(key, v);
        else if (key == "observational_coefficients") s.observational_coefficients = parse_list<double>(key, v, dbl);
        else if (key == "reception_field") s.train.reception_field = integer(v);
        else if (key == "hidden_dim") s.train.hidden_dim = integer(v);
        else if (key == "n_epochs") s.train.n_epochs = integer(v);
        else if (key == "learning_rate") s.train.learning_rate = dbl(v);
        else if (key == "lambda_gamma") s.train.lambda_gamma = dbl(v);
        else if (key == "batch_size") s.train.batch_size = integer(v);
        else if (key == "adversarial") s.train.adversarial = parse_bool(key, v);
        else throw config_error("unknown key: " + key);
    }
    s.validate();
    return s;
}

inline ExperimentSpec parse_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw config_error("cannot open config file: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str());
}

}  // namespace nettmle
