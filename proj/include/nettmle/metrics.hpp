#pragma once

// Bias, empirical standard error and confidence-interval coverage over
// repeated runs.

#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "nettmle/common.hpp"

namespace nettmle {

struct RunEntry {
    double psi_hat = 0.0;
    double psi_truth = 0.0;
    double lci_d = 0.0, uci_d = 0.0;
    double lci_l = 0.0, uci_l = 0.0;
};

struct RunBatch {
    std::vector<RunEntry> entries;

    std::size_t size() const { return entries.size(); }
    bool empty() const { return entries.empty(); }
    void add(const RunEntry& e) {
        require(e.lci_d <= e.uci_d && e.lci_l <= e.uci_l, "RunBatch: interval lower bound exceeds upper bound");
        entries.push_back(e);
    }
};

enum class IntervalKind { direct, latent };

inline double bias(const RunBatch& b) {
    require(!b.empty(), "bias: empty batch");
    double s = 0.0;
    for (const auto& e : b.entries) s += e.psi_hat - e.psi_truth;
    return s / static_cast<double>(b.size());
}

/// Population standard deviation of psi_hat - psi (divisor U).
inline double ese(const RunBatch& b) {
    const double m = bias(b);
    double s = 0.0;
    for (const auto& e : b.entries) {
        const double d = (e.psi_hat - e.psi_truth) - m;
        s += d * d;
    }
    return std::sqrt(s / static_cast<double>(b.size()));
}

/// Share of intervals that contain the truth strictly inside.
inline double coverage(const RunBatch& b, IntervalKind which) {
    require(!b.empty(), "coverage: empty batch");
    std::size_t hit = 0;
    for (const auto& e : b.entries) {
        const double lo = which == IntervalKind::direct ? e.lci_d : e.lci_l;
        const double hi = which == IntervalKind::direct ? e.uci_d : e.uci_l;
        hit += lo < e.psi_truth && hi > e.psi_truth;
    }
    return static_cast<double>(hit) / static_cast<double>(b.size());
}

struct MetricSummary {
    std::size_t u = 0;
    double bias = 0.0, ese = 0.0, cover_direct = 0.0, cover_latent = 0.0;
};

inline MetricSummary summarize(const RunBatch& b) {
    return {b.size(), bias(b), ese(b), coverage(b, IntervalKind::direct), coverage(b, IntervalKind::latent)};
}

inline constexpr std::string_view kSummaryCsvHeader = "graph,n,scenario,policy,p_omega,budget,priority,model,U,bias,ese,cover_direct,cover_latent";

inline constexpr std::string_view kMetricNames[] = {"bias", "ese", "cover_direct", "cover_latent"};

inline double metric_value(const MetricSummary& s, std::string_view metric) {
    if (metric == "bias") return s.bias;
    if (metric == "ese") return s.ese;
    if (metric == "cover_direct") return s.cover_direct;
    if (metric == "cover_latent") return s.cover_latent;
    throw std::invalid_argument("unknown metric: " + std::string(metric));
}

}  // namespace nettmle
