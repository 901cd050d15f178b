#pragma once

// Network TMLE with a GLM, L2-penalized GLM or adversarial MLP outcome model:
//   1. outcome model on observed data,
//   2. density-ratio weights from exposure/summary-exposure models fitted on
//      the observed panel (denominator) and the policy-sampled copies
//      (numerator),
//   3. targeting intercept,
//   4. Monte Carlo mean over the sampled copies,
//   5. direct and latent variance with normal confidence intervals.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "nettmle/common.hpp"
#include "nettmle/deepnet.hpp"
#include "nettmle/glm.hpp"
#include "nettmle/graph.hpp"
#include "nettmle/rng.hpp"
#include "nettmle/simdata.hpp"

namespace nettmle {

enum class ModelKind { glm, l2, deep };

inline std::string_view to_string(ModelKind k) {
    switch (k) {
        case ModelKind::glm: return "glm";
        case ModelKind::l2: return "l2";
        case ModelKind::deep: return "deep";
    }
    return "?";
}

inline ModelKind parse_model_kind(std::string_view s) {
    if (s == "glm") return ModelKind::glm;
    if (s == "l2") return ModelKind::l2;
    if (s == "deep") return ModelKind::deep;
    throw std::invalid_argument("unknown model kind: " + std::string(s));
}

/// Probabilities from GLM-kind outcome models are kept this far from {0, 1}.
inline constexpr double kGlmProbabilityBound = 1e-9;

// ---------------------------------------------------------------------------
// Standard normal quantile (Acklam's rational approximation, one Halley step).

inline double normal_quantile(double p) {
    require(p > 0.0 && p < 1.0, "normal_quantile: p must lie in (0, 1)");
    static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                   1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
    static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                   6.680131188771972e+01,  -1.328068155288572e+01};
    static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                   -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
    static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00, 3.754408661907416e+00};
    const double plow = 0.02425;
    double x;
    if (p < plow) {
        const double q = std::sqrt(-2 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
    } else if (p <= 1 - plow) {
        const double q = p - 0.5, r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
    } else {
        const double q = std::sqrt(-2 * std::log(1 - p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
    }
    const double e = 0.5 * std::erfc(-x / std::numbers::sqrt2) - p;
    const double u = e * std::sqrt(2 * std::numbers::pi) * std::exp(x * x / 2);
    return x - u / (1 + x * u / 2);
}

// ---------------------------------------------------------------------------
// Windows for the deep outcome model

struct DeepFeature {
    Var var;
    bool as_code;  // feed the quantile-bin index instead of the raw value
};

/// Per-step inputs: the outcome-model variables, with binned variables fed as
/// numeric bin codes.
inline std::vector<DeepFeature> deep_features(const DesignSpec& spec) {
    std::vector<DeepFeature> out;
    for (const Term& t : spec.outcome_terms) {
        auto it = std::find_if(out.begin(), out.end(), [&](const DeepFeature& f) { return f.var == t.var; });
        if (it == out.end()) out.push_back({t.var, t.binned});
        else it->as_code = it->as_code || t.binned;
    }
    return out;
}

/// Windows over steps T-Tr+1..T; labels are upsilon (when the panel has
/// outcomes) and alpha(T).
inline WindowSet build_windows(const Panel& panel, const DesignSpec& spec, int reception_field, bool with_labels) {
    require(reception_field >= 1 && reception_field <= panel.t_steps + 1, "build_windows: reception field exceeds panel length");
    const auto feats = deep_features(spec);
    WindowSet w;
    w.resize(panel.n, reception_field, static_cast<int>(feats.size()));
    const int first = panel.t_steps - reception_field + 1;
    for (int i = 0; i < panel.n; ++i) {
        for (int s = 0; s < reception_field; ++s) {
            const int t = first + s;
            for (std::size_t f = 0; f < feats.size(); ++f) {
                const double v = panel.value(feats[f].var, t, i);
                w.at(i, s, static_cast<int>(f)) = feats[f].as_code ? bin_code(spec, feats[f].var, v) : v;
            }
        }
        w.a[i] = panel.alpha[panel.t_steps][i];
    }
    if (with_labels) {
        require(panel.labeled(), "build_windows: panel has no outcomes");
        w.y.assign(panel.upsilon.begin(), panel.upsilon.end());
    }
    return w;
}

inline WindowSet concat_windows(std::span<const WindowSet> parts) {
    WindowSet out;
    if (parts.empty()) return out;
    int total = 0;
    for (const auto& p : parts) total += p.records;
    out.resize(total, parts.front().steps, parts.front().features);
    std::size_t xo = 0, ro = 0;
    for (const auto& p : parts) {
        std::copy(p.x.begin(), p.x.end(), out.x.begin() + static_cast<std::ptrdiff_t>(xo));
        std::copy(p.a.begin(), p.a.end(), out.a.begin() + static_cast<std::ptrdiff_t>(ro));
        xo += p.x.size();
        ro += p.a.size();
    }
    return out;
}

// ---------------------------------------------------------------------------
// Step 1: outcome model

struct OutcomeModel {
    ModelKind kind = ModelKind::glm;
    DesignSpec spec;
    GlmFit glm;
    TrainedNet net;
    int reception_field = 1;
    std::vector<double> train_history;
    std::vector<std::string> notes;

    /// Final-step prediction Y_hat_i(T) for every individual, before bounding.
    Eigen::VectorXd predict_final(const Panel& panel) const {
        if (kind == ModelKind::deep) return predict_windows(net, build_windows(panel, spec, reception_field, false)).upsilon_hat;
        return predict(glm, build_design(panel, spec, DesignRole::outcome, panel.t_steps).X);
    }

    /// Predictions bounded for targeting: (0.05, 0.95) for deep models,
    /// 1e-9 away from {0, 1} otherwise.
    Eigen::VectorXd predict_bounded(const Panel& panel) const {
        Eigen::VectorXd p = predict_final(panel);
        for (Eigen::Index i = 0; i < p.size(); ++i) p(i) = bound(p(i));
        return p;
    }

    double bound(double raw) const {
        return kind == ModelKind::deep ? clip_outcome(raw) : clamp_probability(raw, kGlmProbabilityBound, 1.0 - kGlmProbabilityBound);
    }
};

struct OutcomeOptions {
    double l2_penalty = 1.0;
    TrainConfig train;
};

/// Fits the outcome model. GLM kinds use final-step rows only; the deep kind
/// trains on the last reception_field steps, with the sampled copies as
/// unlabeled intervention data.
inline OutcomeModel fit_outcome(const Panel& observed, ModelKind kind, const DesignSpec& spec, const OutcomeOptions& opt = {},
                                std::span<const PolicyCopy> sampled = {}) {
    require(observed.labeled(), "fit_outcome: observed panel has no final outcomes");
    OutcomeModel m;
    m.kind = kind;
    m.spec = spec;
    if (kind == ModelKind::deep) {
        m.reception_field = opt.train.reception_field;
        WindowSet obs = build_windows(observed, spec, m.reception_field, true);
        std::vector<WindowSet> parts;
        for (const auto& c : sampled) parts.push_back(build_windows(c.panel, spec, m.reception_field, false));
        WindowSet samp = concat_windows(parts);
        if (parts.empty()) samp.resize(0, m.reception_field, obs.features);
        auto res = train(obs, samp, opt.train);
        m.net = std::move(res.net);
        m.train_history = std::move(res.epoch_outcome_loss);
        return m;
    }
    Design d = build_design(observed, spec, DesignRole::outcome, observed.t_steps);
    Eigen::VectorXd y(observed.n);
    for (int i = 0; i < observed.n; ++i) y(i) = observed.upsilon[i];
    GlmOptions go;
    go.l2 = kind == ModelKind::l2 ? opt.l2_penalty : 0.0;
    go.column_names = d.names;
    try {
        m.glm = fit(Family::binomial, d.X, y, go);
    } catch (const singular_design_error&) {
        // A covariate can be constant at the final step (e.g. no infectious
        // contacts left); a vanishing ridge keeps the fit defined.
        go.l2 = std::max(go.l2, 1e-6);
        m.glm = fit(Family::binomial, d.X, y, go);
        m.notes.emplace_back("outcome singular design; ridge 1e-6 applied");
    }
    return m;
}

// ---------------------------------------------------------------------------
// Step 2: weights

struct WeightSet {
    Eigen::VectorXd w;
    std::pair<double, double> truncation_bounds{0.01, 100.0};
    int truncated = 0;
};

/// Ratio of numerator to denominator densities, truncated to the bounds.
inline WeightSet density_ratio_weights(const Eigen::VectorXd& num_g, const Eigen::VectorXd& num_h, const Eigen::VectorXd& den_g,
                                       const Eigen::VectorXd& den_h, std::pair<double, double> bounds) {
    require(bounds.first > 0.0 && bounds.first <= bounds.second, "weights: truncation bounds must satisfy 0 < low <= high");
    const Eigen::Index n = num_g.size();
    require(num_h.size() == n && den_g.size() == n && den_h.size() == n, "weights: density vectors differ in length");
    WeightSet ws;
    ws.truncation_bounds = bounds;
    ws.w.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double den = den_g(i) * den_h(i);
        double r = den > 0.0 ? num_g(i) * num_h(i) / den : bounds.second;
        if (!std::isfinite(r)) r = bounds.second;
        const double c = std::clamp(r, bounds.first, bounds.second);
        ws.truncated += c != r;
        ws.w(i) = c;
    }
    return ws;
}

struct ExposureModels {
    GlmFit g, h;
};

struct WeightResult {
    WeightSet weights;
    ExposureModels denominator, numerator;
    bool positivity_warning = false;
    std::vector<std::string> notes;
};

namespace detail {

inline ExposureModels fit_exposure_models(const Design& d, const Eigen::VectorXd& a, const Eigen::VectorXd& as, double l2,
                                          std::vector<std::string>& notes, std::string_view label) {
    GlmOptions go;
    go.l2 = l2;
    go.column_names = d.names;
    ExposureModels m;
    auto fit_one = [&](Family fam, const Eigen::VectorXd& y, std::string_view which) {
        try {
            GlmFit f = fit(fam, d.X, y, go);
            if (!f.converged) notes.push_back(std::string(label) + " " + std::string(which) + " did not converge");
            return f;
        } catch (const singular_design_error& e) {
            // Pooled copies can leave an indicator column empty; a vanishing
            // ridge keeps the fit defined.
            notes.push_back(std::string(label) + " " + std::string(which) + " singular design; ridge 1e-6 applied");
            GlmOptions ridge = go;
            ridge.l2 = std::max(l2, 1e-6);
            return fit(fam, d.X, y, ridge);
        }
    };
    m.g = fit_one(Family::binomial, a, "g");
    m.h = fit_one(Family::poisson, as, "h");
    return m;
}

inline std::pair<Eigen::VectorXd, Eigen::VectorXd> final_exposures(const Panel& p) {
    Eigen::VectorXd a(p.n), as(p.n);
    for (int i = 0; i < p.n; ++i) {
        a(i) = p.alpha[p.t_steps][i];
        as(i) = p.alpha_s[p.t_steps][i];
    }
    return {a, as};
}

}  // namespace detail

inline constexpr double kPositivityFloor = 1e-12;

/// Weights on final-step exposures. g (binomial) and h (Poisson) share the
/// exposure design; denominators are fitted on the observed panel and
/// numerators on the pooled copies, both evaluated at the observed records.
inline WeightResult estimate_iptw(const Panel& observed, std::span<const PolicyCopy> sampled, const DesignSpec& spec,
                                  std::pair<double, double> bounds = {0.01, 100.0}, double exposure_l2 = 0.0) {
    require(!sampled.empty(), "estimate_iptw: no sampled copies");
    WeightResult r;
    const int T = observed.t_steps;
    Design obs = build_design(observed, spec, DesignRole::exposure, T);
    auto [a, as] = detail::final_exposures(observed);
    r.denominator = detail::fit_exposure_models(obs, a, as, exposure_l2, r.notes, "denominator");

    std::vector<Design> parts;
    Eigen::VectorXd pa(static_cast<Eigen::Index>(sampled.size()) * observed.n), pas(pa.size());
    Eigen::Index off = 0;
    for (const auto& c : sampled) {
        parts.push_back(build_design(c.panel, spec, DesignRole::exposure, T));
        auto [ca, cas] = detail::final_exposures(c.panel);
        pa.segment(off, ca.size()) = ca;
        pas.segment(off, cas.size()) = cas;
        off += ca.size();
    }
    Design pooled = stack_designs(parts);
    r.numerator = detail::fit_exposure_models(pooled, pa, pas, exposure_l2, r.notes, "numerator");

    const Eigen::VectorXd dg = density(r.denominator.g, obs.X, a), dh = density(r.denominator.h, obs.X, as);
    const Eigen::VectorXd ng = density(r.numerator.g, obs.X, a), nh = density(r.numerator.h, obs.X, as);
    for (Eigen::Index i = 0; i < dg.size(); ++i)
        if (dg(i) * dh(i) < kPositivityFloor) r.positivity_warning = true;
    if (r.positivity_warning) r.notes.emplace_back("positivity: denominator density below 1e-12");
    r.weights = density_ratio_weights(ng, nh, dg, dh, bounds);
    return r;
}

// ---------------------------------------------------------------------------
// Step 3: targeting

inline constexpr double kEpsilonThreshold = 10.0;

struct TargetResult {
    double epsilon = 0.0;
    bool reset = false;  // the root lay beyond the threshold and epsilon was set to 0
    double score = 0.0;  // weighted score at the returned epsilon
    int iterations = 0;
};

inline double targeting_score(std::span<const double> y, std::span<const double> offset_logit, std::span<const double> w, double eps) {
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += w[i] * (y[i] - expit(eps + offset_logit[i]));
    return s;
}

/// Solves sum_i W_i (y_i - expit(eps + logit(y_hat_i))) = 0 by Newton steps
/// kept inside a bisection bracket. A root beyond |eps| > 10 resets eps to 0.
inline TargetResult target(const Eigen::VectorXd& y, const Eigen::VectorXd& y_hat, const WeightSet& weights) {
    const Eigen::Index n = y.size();
    require(y_hat.size() == n && weights.w.size() == n, "target: length mismatch");
    std::vector<double> yy(y.data(), y.data() + n), off(static_cast<std::size_t>(n)), ww(weights.w.data(), weights.w.data() + n);
    for (Eigen::Index i = 0; i < n; ++i) {
        require(y_hat(i) > 0.0 && y_hat(i) < 1.0, "target: predictions must lie in (0, 1)");
        off[i] = logit(y_hat(i));
    }
    TargetResult r;
    double lo = -kEpsilonThreshold, hi = kEpsilonThreshold;
    const double s_lo = targeting_score(yy, off, ww, lo), s_hi = targeting_score(yy, off, ww, hi);
    if (s_lo < 0.0 || s_hi > 0.0) {
        r.reset = true;
        r.epsilon = 0.0;
        r.score = targeting_score(yy, off, ww, 0.0);
        return r;
    }
    double eps = 0.0;
    double s = targeting_score(yy, off, ww, eps);
    for (int it = 0; it < 200; ++it) {
        r.iterations = it + 1;
        if (s == 0.0) break;
        if (s > 0.0) lo = eps;
        else hi = eps;
        double deriv = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double m = expit(eps + off[i]);
            deriv += ww[i] * m * (1.0 - m);
        }
        double next = deriv > 0.0 ? eps + s / deriv : 0.5 * (lo + hi);
        if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
        const double step = std::abs(next - eps);
        eps = next;
        s = targeting_score(yy, off, ww, eps);
        if (step < 1e-15 * std::max(1.0, std::abs(eps)) || hi - lo < 1e-15) break;
    }
    r.epsilon = eps;
    r.score = s;
    return r;
}

// ---------------------------------------------------------------------------
// Step 4: Monte Carlo mean

/// Mean of expit(logit(p) + eps) over every copy and individual, summed in
/// copy order. Predictions must already be bounded.
inline double estimate_psi(std::span<const Eigen::VectorXd> bounded_predictions, double epsilon) {
    require(!bounded_predictions.empty(), "estimate_psi: no copies");
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& p : bounded_predictions) {
        double copy_sum = 0.0;
        for (Eigen::Index i = 0; i < p.size(); ++i) copy_sum += expit(logit(p(i)) + epsilon);
        total += copy_sum;
        count += static_cast<std::size_t>(p.size());
    }
    return total / static_cast<double>(count);
}

inline double estimate_psi(const OutcomeModel& model, std::span<const PolicyCopy> sampled, double epsilon) {
    std::vector<Eigen::VectorXd> preds;
    preds.reserve(sampled.size());
    for (const auto& c : sampled) preds.push_back(model.predict_bounded(c.panel));
    return estimate_psi(preds, epsilon);
}

// ---------------------------------------------------------------------------
// Step 5: variance and intervals

struct VarianceEstimate {
    double direct = 0.0;
    double latent = 0.0;
};

inline VarianceEstimate estimate_variance(const Eigen::VectorXd& y, const Eigen::VectorXd& y_hat, const Eigen::VectorXd& w,
                                          const SecondOrderClosure& closure) {
    const Eigen::Index n = y.size();
    require(y_hat.size() == n && w.size() == n && closure.size() == n, "estimate_variance: length mismatch");
    Eigen::VectorXd r(n);
    for (Eigen::Index i = 0; i < n; ++i) r(i) = w(i) * (y(i) - y_hat(i));
    VarianceEstimate v;
    for (Eigen::Index i = 0; i < n; ++i) {
        require(closure.contains(static_cast<int>(i), static_cast<int>(i)), "estimate_variance: closure diagonal must be 1");
        v.direct += r(i) * r(i);
        double row = 0.0;
        for (int j : closure.reach[i]) row += r(j);
        v.latent += r(i) * row;
    }
    v.direct /= static_cast<double>(n);
    v.latent /= static_cast<double>(n);
    return v;
}

struct Interval {
    double lower = 0.0;
    double upper = 0.0;
};

inline Interval confidence_interval(double psi_hat, double sigma2, int n, double alpha = 0.05) {
    require(n >= 1, "confidence_interval: n must be >= 1");
    require(alpha > 0.0 && alpha < 1.0, "confidence_interval: alpha must lie in (0, 1)");
    // A negative latent variance can occur; the interval then degenerates.
    const double half = normal_quantile(1.0 - alpha / 2.0) * std::sqrt(std::max(0.0, sigma2) / n);
    return {psi_hat - half, psi_hat + half};
}

// ---------------------------------------------------------------------------
// Full estimator

struct EstimatorConfig {
    ModelKind kind = ModelKind::glm;
    Scenario scenario = Scenario::CC;
    int m_copies = 50;
    std::pair<double, double> weight_bounds{0.01, 100.0};
    double l2_penalty = 1.0;
    double exposure_l2 = 0.0;
    TrainConfig train;
    SimConfig sim;  // horizon and quarantine rules used to draw copies
    std::uint64_t seed = 0;
    std::size_t record_budget = kDefaultRecordBudget;
    bool share_copies = true;  // copies feed both the weight numerator and psi
};

struct EstimateReport {
    double psi_hat = 0.0;
    double psi_untargeted = 0.0;
    double epsilon = 0.0;
    bool epsilon_reset = false;
    double sigma_d2 = 0.0;
    double sigma_l2 = 0.0;
    Interval ci_direct, ci_latent;
    int m_copies = 0;
    ModelKind outcome_model_kind = ModelKind::glm;
    bool positivity_warning = false;
    std::vector<std::string> notes;
};

struct estimator_error : std::runtime_error {
    int step;
    estimator_error(int s, const std::string& what) : std::runtime_error("step " + std::to_string(s) + ": " + what), step(s) {}
};

/// Runs steps 1-5 on an observed panel. The copies are drawn once and reused
/// for the weight numerator and the Monte Carlo mean.
inline EstimateReport run_estimator(const Panel& observed, const Snapshot& base, const PolicySpec& policy, const EstimatorConfig& cfg) {
    if (cfg.kind == ModelKind::deep && !cfg.share_copies)
        throw estimator_error(0, "deep outcome model requires the sampled copies to be shared with weight fitting");
    if (!observed.labeled()) throw estimator_error(0, "observed panel has no outcomes");

    EstimateReport rep;
    rep.m_copies = cfg.m_copies;
    rep.outcome_model_kind = cfg.kind;

    PolicySpec cf = policy;
    cf.mode = PolicyMode::counterfactual;
    std::vector<PolicyCopy> copies;
    DesignSpec spec = make_design_spec(cfg.scenario);
    try {
        copies = sample_policy_copies(observed, base, cf, cfg.sim, cfg.m_copies, derive_seed(cfg.seed, "copies"), cfg.record_budget);
        if (spec.needs_bins()) calibrate_bins(spec, observed, observed.t_steps);
    } catch (const std::exception& e) {
        throw estimator_error(0, e.what());
    }

    OutcomeModel model;
    try {
        OutcomeOptions oo;
        oo.l2_penalty = cfg.l2_penalty;
        oo.train = cfg.train;
        oo.train.seed = derive_seed(cfg.seed, "train");
        model = fit_outcome(observed, cfg.kind, spec, oo, copies);
        rep.notes.insert(rep.notes.end(), model.notes.begin(), model.notes.end());
        if (cfg.kind != ModelKind::deep && !model.glm.converged) rep.notes.emplace_back("outcome glm did not converge");
    } catch (const std::exception& e) {
        throw estimator_error(1, e.what());
    }

    WeightResult wr;
    try {
        wr = estimate_iptw(observed, copies, spec, cfg.weight_bounds, cfg.exposure_l2);
        rep.positivity_warning = wr.positivity_warning;
        rep.notes.insert(rep.notes.end(), wr.notes.begin(), wr.notes.end());
    } catch (const std::exception& e) {
        throw estimator_error(2, e.what());
    }

    Eigen::VectorXd y(observed.n), y_hat;
    for (int i = 0; i < observed.n; ++i) y(i) = observed.upsilon[i];
    try {
        y_hat = model.predict_bounded(observed);
        TargetResult tr = target(y, y_hat, wr.weights);
        rep.epsilon = tr.epsilon;
        rep.epsilon_reset = tr.reset;
        if (tr.reset) rep.notes.emplace_back("epsilon beyond threshold; reset to 0");
    } catch (const std::exception& e) {
        throw estimator_error(3, e.what());
    }

    try {
        std::vector<Eigen::VectorXd> preds;
        for (const auto& c : copies) preds.push_back(model.predict_bounded(c.panel));
        rep.psi_hat = estimate_psi(preds, rep.epsilon);
        rep.psi_untargeted = estimate_psi(preds, 0.0);
    } catch (const std::exception& e) {
        throw estimator_error(4, e.what());
    }

    try {
        Eigen::VectorXd targeted(observed.n);
        for (int i = 0; i < observed.n; ++i) targeted(i) = expit(logit(y_hat(i)) + rep.epsilon);
        TemporalNetwork net = TemporalNetwork::single(base);
        const SecondOrderClosure closure = second_order_closure(net);
        const VarianceEstimate v = estimate_variance(y, targeted, wr.weights.w, closure);
        rep.sigma_d2 = v.direct;
        rep.sigma_l2 = v.latent;
        rep.ci_direct = confidence_interval(rep.psi_hat, v.direct, observed.n);
        rep.ci_latent = confidence_interval(rep.psi_hat, v.latent, observed.n);
    } catch (const std::exception& e) {
        throw estimator_error(5, e.what());
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Run CSV

inline constexpr std::string_view kRunCsvHeader =
    "run_id,graph,n,scenario,policy,p_omega,budget,priority,model,psi_hat,epsilon,sigma_d2,sigma_l2,lci_d,uci_d,lci_l,uci_l,m_copies,notes";

struct RunKey {
    std::string run_id;
    std::string graph;
    int n = 0;
    std::string scenario;
    std::string policy;
    double p_omega = 0.0;
    double budget = 1.0;
    std::string priority;
    std::string model;
};

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string sanitize_note(std::string s) {
    for (char& c : s)
        if (c == ',' || c == '\n' || c == '\r') c = ' ';
    return s;
}

inline std::string join_notes(const std::vector<std::string>& notes) {
    std::string out;
    for (const auto& n : notes) {
        if (!out.empty()) out += "; ";
        out += sanitize_note(n);
    }
    return out;
}

inline void write_run_row(std::ostream& os, const RunKey& k, const EstimateReport& r) {
    char pw[16], bu[16];
    std::snprintf(pw, sizeof pw, "%.2f", k.p_omega);
    std::snprintf(bu, sizeof bu, "%.2f", k.budget);
    os << k.run_id << ',' << k.graph << ',' << k.n << ',' << k.scenario << ',' << k.policy << ',' << pw << ',' << bu << ','
       << k.priority << ',' << k.model << ',' << format_double(r.psi_hat) << ',' << format_double(r.epsilon) << ','
       << format_double(r.sigma_d2) << ',' << format_double(r.sigma_l2) << ',' << format_double(r.ci_direct.lower) << ','
       << format_double(r.ci_direct.upper) << ',' << format_double(r.ci_latent.lower) << ',' << format_double(r.ci_latent.upper)
       << ',' << r.m_copies << ',' << join_notes(r.notes) << '\n';
}

}  // namespace nettmle
