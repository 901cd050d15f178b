#pragma once

// Temporal contact networks: generators, summary measures and the dependence
// closure used by the latent variance.

#include <algorithm>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nettmle/common.hpp"
#include "nettmle/rng.hpp"

namespace nettmle {

/// Simple undirected graph stored as sorted adjacency lists.
class Snapshot {
public:
    Snapshot() = default;
    explicit Snapshot(int n) : adj_(static_cast<std::size_t>(n)) {}

    static Snapshot from_edges(int n, std::span<const std::pair<int, int>> edges) {
        Snapshot g(n);
        for (auto [i, j] : edges) {
            require(i >= 0 && i < n && j >= 0 && j < n, "edge endpoint out of range");
            if (i == j) continue;
            g.adj_[i].push_back(j);
            g.adj_[j].push_back(i);
        }
        g.normalize();
        return g;
    }

    int size() const { return static_cast<int>(adj_.size()); }
    int degree(int i) const { return static_cast<int>(adj_[i].size()); }
    std::span<const int> neighbors(int i) const { return adj_[i]; }

    bool has_edge(int i, int j) const {
        const auto& a = adj_[i];
        return std::binary_search(a.begin(), a.end(), j);
    }

    /// Adds {i, j}; returns false for self-loops and duplicates.
    bool add_edge(int i, int j) {
        if (i == j || has_edge(i, j)) return false;
        adj_[i].insert(std::upper_bound(adj_[i].begin(), adj_[i].end(), j), j);
        adj_[j].insert(std::upper_bound(adj_[j].begin(), adj_[j].end(), i), i);
        return true;
    }

    std::size_t edge_count() const {
        std::size_t s = 0;
        for (const auto& a : adj_) s += a.size();
        return s / 2;
    }

    std::vector<std::pair<int, int>> edges() const {
        std::vector<std::pair<int, int>> out;
        out.reserve(edge_count());
        for (int i = 0; i < size(); ++i)
            for (int j : adj_[i])
                if (i < j) out.emplace_back(i, j);
        return out;
    }

    int max_degree() const {
        int m = 0;
        for (int i = 0; i < size(); ++i) m = std::max(m, degree(i));
        return m;
    }

    bool operator==(const Snapshot&) const = default;

private:
    void normalize() {
        for (auto& a : adj_) {
            std::sort(a.begin(), a.end());
            a.erase(std::unique(a.begin(), a.end()), a.end());
        }
    }

    std::vector<std::vector<int>> adj_;
};

struct TemporalNetwork {
    int n = 0;
    std::vector<Snapshot> snapshots;  // gamma(0..T)

    int time_horizon() const { return static_cast<int>(snapshots.size()) - 1; }
    const Snapshot& base() const { return snapshots.front(); }

    static TemporalNetwork single(Snapshot g) {
        TemporalNetwork net;
        net.n = g.size();
        net.snapshots.push_back(std::move(g));
        return net;
    }

    Snapshot union_graph() const {
        std::vector<std::pair<int, int>> all;
        for (const auto& s : snapshots) {
            auto e = s.edges();
            all.insert(all.end(), e.begin(), e.end());
        }
        return Snapshot::from_edges(n, all);
    }
};

/// Reach relation including the diagonal, stored as sorted lists.
struct SecondOrderClosure {
    std::vector<std::vector<int>> reach;

    int size() const { return static_cast<int>(reach.size()); }
    bool contains(int i, int j) const { return std::binary_search(reach[i].begin(), reach[i].end(), j); }
};

// ---------------------------------------------------------------------------
// Generators

/// Random graph whose node degrees are drawn uniformly from {d_min..d_max} and
/// realized by configuration-model stub pairing. Pairings that would create a
/// self-loop or multi-edge are redrawn; a pairing that gets stuck restarts.
inline TemporalNetwork generate_uniform(int n, int d_min, int d_max, std::uint64_t seed, int max_retries = 100) {
    require(1 <= d_min && d_min <= d_max && d_max < n, "generate_uniform: need 1 <= d_min <= d_max < n");
    Rng rng(seed);

    std::vector<int> degree(n);
    long total = 0;
    for (int i = 0; i < n; ++i) {
        degree[i] = rng.uniform_int(d_min, d_max);
        total += degree[i];
    }
    for (int attempt = 0; total % 2 != 0; ++attempt) {
        if (attempt >= max_retries) throw generation_error("generate_uniform: odd degree sum after max retries");
        const int i = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
        total -= degree[i];
        degree[i] = rng.uniform_int(d_min, d_max);
        total += degree[i];
    }

    for (int attempt = 0; attempt < max_retries; ++attempt) {
        std::vector<int> stubs;
        stubs.reserve(static_cast<std::size_t>(total));
        for (int i = 0; i < n; ++i) stubs.insert(stubs.end(), static_cast<std::size_t>(degree[i]), i);

        Snapshot g(n);
        bool stuck = false;
        while (!stubs.empty() && !stuck) {
            stuck = true;
            const std::size_t m = stubs.size();
            for (int tries = 0; tries < 200; ++tries) {
                const std::size_t a = rng.below(m);
                const std::size_t b = rng.below(m);
                if (a == b) continue;
                if (!g.add_edge(stubs[a], stubs[b])) continue;
                // Remove the higher index first so the lower stays valid.
                const std::size_t hi = std::max(a, b), lo = std::min(a, b);
                stubs[hi] = stubs.back();
                stubs.pop_back();
                stubs[lo] = stubs.back();
                stubs.pop_back();
                stuck = false;
                break;
            }
        }
        if (!stuck) return TemporalNetwork::single(std::move(g));
    }
    throw generation_error("generate_uniform: degree sequence not realizable as a simple graph");
}

struct PowerLawParams {
    int n = 500;
    int n_subgraphs = 5;
    double powerlaw_exponent = 2.5;
    double inter_edge_prob = 0.001;
    int attach_edges = 2;          // m
    double triangle_prob = 0.1;    // triad-formation step probability
};

namespace detail {

// Preferential attachment with initial attractiveness A = m (exponent - 3),
// so the degree tail decays as k^-exponent, plus Holme-Kim triad formation.
inline void grow_clustered_pa(Snapshot& g, int offset, int count, const PowerLawParams& p, Rng& rng) {
    const int m = p.attach_edges;
    const int core = std::min(count, m + 1);
    for (int a = 0; a < core; ++a)
        for (int b = a + 1; b < core; ++b) g.add_edge(offset + a, offset + b);
    if (count <= core) return;

    const double attractiveness = m * (p.powerlaw_exponent - 3.0);
    std::vector<double> weight;
    for (int v = core; v < count; ++v) {
        const int node = offset + v;
        const int existing = v;
        weight.assign(static_cast<std::size_t>(existing), 0.0);
        double total = 0.0;
        for (int u = 0; u < existing; ++u) {
            weight[u] = std::max(g.degree(offset + u) + attractiveness, 1e-9);
            total += weight[u];
        }
        auto pa_pick = [&]() {
            for (;;) {
                double r = rng.uniform() * total;
                int u = 0;
                for (; u < existing - 1; ++u) {
                    if (r < weight[u]) break;
                    r -= weight[u];
                }
                if (!g.has_edge(node, offset + u)) return offset + u;
            }
        };
        const int edges_here = std::min(m, existing);
        int last_pa = pa_pick();
        g.add_edge(node, last_pa);
        for (int e = 1; e < edges_here; ++e) {
            int target = -1;
            if (rng.bernoulli(p.triangle_prob)) {
                std::vector<int> cand;
                for (int w : g.neighbors(last_pa))
                    if (w != node && !g.has_edge(node, w)) cand.push_back(w);
                if (!cand.empty()) target = cand[rng.below(cand.size())];
            }
            if (target < 0) {
                target = pa_pick();
                last_pa = target;
            }
            g.add_edge(node, target);
        }
    }
}

}  // namespace detail

/// Clustered power-law graph: independent preferential-attachment subgraphs
/// joined by Bernoulli(inter_edge_prob) edges between every cross-subgraph pair.
/// Nodes that do not divide evenly go to the last subgraph.
inline TemporalNetwork generate_power_law_clustered(const PowerLawParams& p, std::uint64_t seed) {
    require(p.n >= 1 && p.n_subgraphs >= 1, "generate_power_law_clustered: need n >= 1 and n_subgraphs >= 1");
    require(p.inter_edge_prob >= 0.0 && p.inter_edge_prob <= 1.0, "inter_edge_prob must lie in [0, 1]");
    require(p.powerlaw_exponent > 2.0, "powerlaw_exponent must exceed 2");
    require(p.attach_edges >= 1, "attach_edges must be >= 1");
    Rng rng(seed);
    Snapshot g(p.n);

    const int k = std::min(p.n_subgraphs, p.n);
    const int base_size = p.n / k;
    std::vector<int> group(p.n);
    for (int s = 0, offset = 0; s < k; ++s) {
        const int count = (s == k - 1) ? p.n - offset : base_size;
        detail::grow_clustered_pa(g, offset, count, p, rng);
        for (int v = offset; v < offset + count; ++v) group[v] = s;
        offset += count;
    }
    if (p.inter_edge_prob > 0.0) {
        for (int i = 0; i < p.n; ++i)
            for (int j = i + 1; j < p.n; ++j)
                if (group[i] != group[j] && rng.bernoulli(p.inter_edge_prob)) g.add_edge(i, j);
    }
    return TemporalNetwork::single(std::move(g));
}

// ---------------------------------------------------------------------------
// Summary measures

/// Count of exposed immediate contacts for every node.
inline std::vector<int> summary_exposure(const Snapshot& g, std::span<const int> exposures) {
    require(static_cast<int>(exposures.size()) == g.size(), "summary_exposure: exposure vector length mismatch");
    std::vector<int> out(exposures.size(), 0);
    for (int i = 0; i < g.size(); ++i)
        for (int j : g.neighbors(i)) out[i] += exposures[j] == 1 ? 1 : 0;
    return out;
}

enum class SummaryMeasure { sum, mean };

/// Neighbor aggregate of node values; the mean over an empty neighborhood is 0.
inline std::vector<double> summary_covariate(const Snapshot& g, std::span<const double> values, SummaryMeasure measure) {
    require(static_cast<int>(values.size()) == g.size(), "summary_covariate: value vector length mismatch");
    std::vector<double> out(values.size(), 0.0);
    for (int i = 0; i < g.size(); ++i) {
        double s = 0.0;
        for (int j : g.neighbors(i)) s += values[j];
        if (measure == SummaryMeasure::mean) s = g.degree(i) > 0 ? s / g.degree(i) : 0.0;
        out[i] = s;
    }
    return out;
}

inline SecondOrderClosure second_order_closure(const Snapshot& u) {
    SecondOrderClosure c;
    c.reach.resize(static_cast<std::size_t>(u.size()));
    for (int i = 0; i < u.size(); ++i) {
        auto& r = c.reach[i];
        r.push_back(i);
        for (int j : u.neighbors(i)) {
            r.push_back(j);
            for (int k : u.neighbors(j)) r.push_back(k);
        }
        std::sort(r.begin(), r.end());
        r.erase(std::unique(r.begin(), r.end()), r.end());
    }
    return c;
}

/// Two-hop reach on the union of all snapshots, plus the diagonal.
inline SecondOrderClosure second_order_closure(const TemporalNetwork& net) {
    require(net.n >= 1 && !net.snapshots.empty(), "second_order_closure: empty network");
    return second_order_closure(net.union_graph());
}

// ---------------------------------------------------------------------------
// Edge-list text format: header `n=<N> T=<T>`, then one `t i j` line per edge.

inline void write_edge_list(std::ostream& os, const TemporalNetwork& net) {
    os << "n=" << net.n << " T=" << net.time_horizon() << '\n';
    for (int t = 0; t <= net.time_horizon(); ++t)
        for (auto [i, j] : net.snapshots[t].edges()) os << t << ' ' << i << ' ' << j << '\n';
}

inline TemporalNetwork read_edge_list(std::istream& is) {
    std::string header;
    if (!std::getline(is, header)) throw std::invalid_argument("edge list: missing header");
    int n = -1, horizon = -1;
    {
        std::istringstream hs(header);
        std::string tok;
        while (hs >> tok) {
            if (tok.rfind("n=", 0) == 0) n = std::stoi(tok.substr(2));
            else if (tok.rfind("T=", 0) == 0) horizon = std::stoi(tok.substr(2));
        }
    }
    if (n < 0 || horizon < 0) throw std::invalid_argument("edge list: header must be `n=<N> T=<T>`");
    std::vector<std::vector<std::pair<int, int>>> per_t(static_cast<std::size_t>(horizon) + 1);
    int t, i, j;
    while (is >> t >> i >> j) {
        if (t < 0 || t > horizon) throw std::invalid_argument("edge list: time index out of range");
        per_t[t].emplace_back(i, j);
    }
    if (!is.eof()) throw std::invalid_argument("edge list: malformed edge line");
    TemporalNetwork net;
    net.n = n;
    for (auto& e : per_t) net.snapshots.push_back(Snapshot::from_edges(n, e));
    return net;
}

}  // namespace nettmle
