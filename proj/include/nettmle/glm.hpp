#pragma once

// Binomial and Poisson GLMs fitted by penalized IRLS, and the scenario
// design matrices (CC / CW / WC / Flexible) built from panels.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nettmle/common.hpp"
#include "nettmle/simdata.hpp"

namespace nettmle {

enum class Family { binomial, poisson };

struct GlmOptions {
    std::optional<Eigen::VectorXd> weights;
    std::optional<Eigen::VectorXd> offset;
    double l2 = 0.0;
    int intercept_column = 0;  // excluded from the penalty; -1 penalizes every column
    int max_iterations = 100;
    double tolerance = 1e-8;
    std::vector<std::string> column_names;
};

struct GlmFit {
    Eigen::VectorXd coefficients;
    Family family = Family::binomial;
    double l2 = 0.0;
    int intercept_column = 0;
    bool converged = false;
    int n_iterations = 0;
    double max_score_residual = 0.0;
    double objective = 0.0;  // penalized negative log-likelihood (up to constants)
    std::vector<double> objective_trace;
};

namespace detail {

inline double mean_from_eta(Family f, double eta) { return f == Family::binomial ? expit(eta) : std::exp(eta); }

inline double row_loglik(Family f, double y, double eta) {
    if (f == Family::binomial) {
        // y*eta - log(1 + exp(eta)), computed without overflow
        const double soft = eta > 0 ? eta + std::log1p(std::exp(-eta)) : std::log1p(std::exp(eta));
        return y * eta - soft;
    }
    return y * eta - std::exp(eta);
}

struct IrlsState {
    Eigen::VectorXd eta, mu;
    double objective = 0.0;
};

}  // namespace detail

/// Penalized score X' w (y - mu) - 2 l2 P beta (canonical links).
inline Eigen::VectorXd glm_score(Family family, const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& beta,
                                 const GlmOptions& opt = {}) {
    const Eigen::Index n = X.rows();
    Eigen::VectorXd eta = X * beta;
    if (opt.offset) eta += *opt.offset;
    Eigen::VectorXd r(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double w = opt.weights ? (*opt.weights)(i) : 1.0;
        r(i) = w * (y(i) - detail::mean_from_eta(family, eta(i)));
    }
    Eigen::VectorXd s = X.transpose() * r;
    for (Eigen::Index k = 0; k < beta.size(); ++k)
        if (k != opt.intercept_column) s(k) -= 2.0 * opt.l2 * beta(k);
    return s;
}

inline GlmFit fit(Family family, const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const GlmOptions& opt = {}) {
    const Eigen::Index n = X.rows(), p = X.cols();
    require(y.size() == n, "glm fit: X rows must equal y length");
    require(p >= 1, "glm fit: design has no columns");
    require(X.allFinite() && y.allFinite(), "glm fit: non-finite input");
    require(opt.l2 >= 0.0 && std::isfinite(opt.l2), "glm fit: l2 must be nonnegative");
    if (opt.weights) require(opt.weights->size() == n && opt.weights->allFinite() && (opt.weights->array() >= 0).all(),
                             "glm fit: weights must be finite, nonnegative and match rows");
    if (opt.offset) require(opt.offset->size() == n && opt.offset->allFinite(), "glm fit: offset must be finite and match rows");
    for (Eigen::Index i = 0; i < n; ++i) {
        if (family == Family::binomial) require(y(i) >= 0.0 && y(i) <= 1.0, "glm fit: binomial response must lie in [0, 1]");
        else require(y(i) >= 0.0, "glm fit: poisson response must be nonnegative");
    }

    Eigen::VectorXd w = opt.weights ? *opt.weights : Eigen::VectorXd::Ones(n);

    if (opt.l2 == 0.0) {
        Eigen::MatrixXd wx = w.cwiseSqrt().asDiagonal() * X;
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(wx);
        qr.setThreshold(1e-10);
        if (qr.rank() < p) {
            std::string cols;
            const auto perm = qr.colsPermutation().indices();
            for (Eigen::Index k = qr.rank(); k < p; ++k) {
                const int c = perm(k);
                if (!cols.empty()) cols += ", ";
                cols += (static_cast<std::size_t>(c) < opt.column_names.size()) ? opt.column_names[c] : "x" + std::to_string(c);
            }
            throw singular_design_error("glm fit: rank-deficient design; collinear columns: " + cols);
        }
    }

    auto penalty = [&](const Eigen::VectorXd& b) {
        double s = 0.0;
        for (Eigen::Index k = 0; k < p; ++k)
            if (k != opt.intercept_column) s += b(k) * b(k);
        return opt.l2 * s;
    };
    auto evaluate = [&](const Eigen::VectorXd& b) {
        detail::IrlsState st;
        st.eta = X * b;
        if (opt.offset) st.eta += *opt.offset;
        st.mu.resize(n);
        double ll = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            st.mu(i) = detail::mean_from_eta(family, st.eta(i));
            ll += w(i) * detail::row_loglik(family, y(i), st.eta(i));
        }
        st.objective = -ll + penalty(b);
        return st;
    };

    GlmFit out;
    out.family = family;
    out.l2 = opt.l2;
    out.intercept_column = opt.intercept_column;
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
    detail::IrlsState st = evaluate(beta);
    out.objective_trace.push_back(st.objective);

    Eigen::MatrixXd P = Eigen::MatrixXd::Zero(p, p);
    for (Eigen::Index k = 0; k < p; ++k)
        if (k != opt.intercept_column) P(k, k) = 2.0 * opt.l2;

    for (int it = 0; it < opt.max_iterations; ++it) {
        Eigen::VectorXd score = X.transpose() * (w.array() * (y - st.mu).array()).matrix();
        score -= P * beta;
        out.max_score_residual = score.cwiseAbs().maxCoeff();
        out.n_iterations = it;
        if (out.max_score_residual < opt.tolerance) {
            out.converged = true;
            break;
        }
        Eigen::VectorXd v(n);
        for (Eigen::Index i = 0; i < n; ++i)
            v(i) = w(i) * (family == Family::binomial ? st.mu(i) * (1.0 - st.mu(i)) : st.mu(i));
        Eigen::MatrixXd H = X.transpose() * v.asDiagonal() * X + P;
        Eigen::LDLT<Eigen::MatrixXd> ldlt(H);
        Eigen::VectorXd step = ldlt.solve(score);
        if (!step.allFinite()) step = H.completeOrthogonalDecomposition().solve(score);

        // Step-halving keeps the penalized objective non-increasing.
        double scale = 1.0;
        bool accepted = false;
        for (int h = 0; h < 40; ++h, scale *= 0.5) {
            Eigen::VectorXd cand = beta + scale * step;
            detail::IrlsState cs = evaluate(cand);
            bool ok = std::isfinite(cs.objective) && cs.objective <= st.objective;
            if (!ok && h == 0 && std::isfinite(cs.objective) && cs.objective <= st.objective + 1e-12 * std::max(1.0, std::abs(st.objective))) {
                // Near the optimum the objective change falls below rounding;
                // take the full Newton step when it shrinks the score.
                const Eigen::VectorXd cscore = X.transpose() * (w.array() * (y - cs.mu).array()).matrix() - P * cand;
                ok = cscore.cwiseAbs().maxCoeff() < out.max_score_residual;
            }
            if (ok) {
                beta = std::move(cand);
                st = std::move(cs);
                accepted = true;
                break;
            }
        }
        out.objective_trace.push_back(st.objective);
        if (!accepted) {
            out.n_iterations = it + 1;
            break;
        }
        out.n_iterations = it + 1;
    }
    if (!out.converged) {
        Eigen::VectorXd score = X.transpose() * (w.array() * (y - st.mu).array()).matrix() - P * beta;
        out.max_score_residual = score.cwiseAbs().maxCoeff();
        out.converged = out.max_score_residual < opt.tolerance;
    }
    out.coefficients = beta;
    out.objective = st.objective;
    return out;
}

inline GlmFit fit(Family family, const Eigen::MatrixXd& X, const Eigen::VectorXd& y, std::optional<Eigen::VectorXd> weights,
                  std::optional<Eigen::VectorXd> offset = std::nullopt, double l2 = 0.0) {
    GlmOptions opt;
    opt.weights = std::move(weights);
    opt.offset = std::move(offset);
    opt.l2 = l2;
    return fit(family, X, y, opt);
}

inline Eigen::VectorXd linear_predictor(const GlmFit& f, const Eigen::MatrixXd& X, const std::optional<Eigen::VectorXd>& offset = {}) {
    require(X.cols() == f.coefficients.size(), "glm predict: column count does not match fit");
    Eigen::VectorXd eta = X * f.coefficients;
    if (offset) {
        require(offset->size() == X.rows(), "glm predict: offset length mismatch");
        eta += *offset;
    }
    return eta;
}

inline Eigen::VectorXd predict(const GlmFit& f, const Eigen::MatrixXd& X, const std::optional<Eigen::VectorXd>& offset = {}) {
    Eigen::VectorXd eta = linear_predictor(f, X, offset);
    for (Eigen::Index i = 0; i < eta.size(); ++i) eta(i) = detail::mean_from_eta(f.family, eta(i));
    return eta;
}

inline double binomial_pmf(double p, double a) { return a == 1.0 ? p : 1.0 - p; }

inline double poisson_pmf(double mu, double a) { return std::exp(a * std::log(mu) - mu - std::lgamma(a + 1.0)); }

/// Probability of each observed value under the fitted model.
inline Eigen::VectorXd density(const GlmFit& f, const Eigen::MatrixXd& X, const Eigen::VectorXd& observed) {
    require(observed.size() == X.rows(), "glm density: observed length mismatch");
    Eigen::VectorXd mu = predict(f, X);
    Eigen::VectorXd out(mu.size());
    for (Eigen::Index i = 0; i < mu.size(); ++i) {
        const double a = observed(i);
        if (f.family == Family::binomial) {
            require(a == 0.0 || a == 1.0, "glm density: binomial observations must be 0 or 1");
            out(i) = binomial_pmf(mu(i), a);
        } else {
            require(a >= 0.0 && a == std::floor(a), "glm density: poisson observations must be nonnegative integers");
            out(i) = poisson_pmf(mu(i), a);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Scenario designs

enum class Scenario { CC, CW, WC, Flexible };

inline std::string_view to_string(Scenario s) {
    switch (s) {
        case Scenario::CC: return "CC";
        case Scenario::CW: return "CW";
        case Scenario::WC: return "WC";
        case Scenario::Flexible: return "Flexible";
    }
    return "?";
}

inline Scenario parse_scenario(std::string_view s) {
    if (s == "CC") return Scenario::CC;
    if (s == "CW") return Scenario::CW;
    if (s == "WC") return Scenario::WC;
    if (s == "Flexible") return Scenario::Flexible;
    throw std::invalid_argument("unknown scenario: " + std::string(s));
}

struct Term {
    Var var;
    bool binned = false;
};

enum class DesignRole { exposure, outcome };

struct DesignSpec {
    Scenario scenario = Scenario::CC;
    std::vector<Term> exposure_terms;
    std::vector<Term> outcome_terms;
    int n_bins = 4;
    std::map<Var, std::vector<double>> cutpoints;  // filled by calibrate_bins

    const std::vector<Term>& terms(DesignRole r) const { return r == DesignRole::exposure ? exposure_terms : outcome_terms; }

    bool needs_bins() const {
        auto any = [](const std::vector<Term>& ts) { return std::any_of(ts.begin(), ts.end(), [](const Term& t) { return t.binned; }); };
        return any(exposure_terms) || any(outcome_terms);
    }
};

/// Parses names like `xi_static` or `xi_static:bin`.
inline std::vector<Term> terms_from_names(std::span<const std::string> names) {
    std::vector<Term> out;
    for (const auto& nm : names) {
        const auto colon = nm.find(':');
        if (colon == std::string::npos) {
            out.push_back({parse_var(nm), false});
        } else {
            if (nm.substr(colon + 1) != "bin") throw std::invalid_argument("unknown term modifier in: " + nm);
            out.push_back({parse_var(nm.substr(0, colon)), true});
        }
    }
    return out;
}

/// Default variable lists per scenario. CW drops the infected-neighbor count
/// from the outcome model; WC drops the summary covariates from the exposure
/// models; Flexible bins the continuous covariates into quartiles.
inline DesignSpec make_design_spec(Scenario s) {
    DesignSpec d;
    d.scenario = s;
    const std::vector<Term> exposure_correct = {
        {Var::xi_static}, {Var::xi_inf_nbrs}, {Var::xi_quar_hist}, {Var::xi_s_mean}, {Var::xi_s_infsum}};
    std::vector<Term> outcome_correct;
    for (Var v : kAllVars) outcome_correct.push_back({v});

    switch (s) {
        case Scenario::CC:
            d.exposure_terms = exposure_correct;
            d.outcome_terms = outcome_correct;
            break;
        case Scenario::CW:
            d.exposure_terms = exposure_correct;
            for (const auto& t : outcome_correct)
                if (t.var != Var::xi_inf_nbrs) d.outcome_terms.push_back(t);
            break;
        case Scenario::WC:
            for (const auto& t : exposure_correct)
                if (t.var != Var::xi_s_mean && t.var != Var::xi_s_infsum) d.exposure_terms.push_back(t);
            d.outcome_terms = outcome_correct;
            break;
        case Scenario::Flexible:
            d.exposure_terms = {{Var::xi_static, true}, {Var::xi_inf_nbrs}, {Var::xi_quar_hist}, {Var::xi_s_mean, true}, {Var::xi_s_infsum}};
            d.outcome_terms = outcome_correct;
            d.outcome_terms.push_back({Var::xi_static, true});
            d.outcome_terms.push_back({Var::xi_s_mean, true});
            break;
    }
    return d;
}

/// Computes quantile cutpoints for every binned variable from the observed
/// panel at time t. The same cutpoints are reused for sampled copies.
inline void calibrate_bins(DesignSpec& spec, const Panel& observed, int t) {
    spec.cutpoints.clear();
    for (DesignRole role : {DesignRole::exposure, DesignRole::outcome}) {
        for (const Term& term : spec.terms(role)) {
            if (!term.binned || spec.cutpoints.count(term.var)) continue;
            std::vector<double> v(static_cast<std::size_t>(observed.n));
            for (int i = 0; i < observed.n; ++i) v[i] = observed.value(term.var, t, i);
            std::sort(v.begin(), v.end());
            std::vector<double> cuts;
            for (int b = 1; b < spec.n_bins; ++b) {
                const double pos = static_cast<double>(b) / spec.n_bins * (v.size() - 1);
                const auto lo = static_cast<std::size_t>(std::floor(pos));
                const auto hi = std::min(lo + 1, v.size() - 1);
                cuts.push_back(v[lo] + (pos - lo) * (v[hi] - v[lo]));
            }
            spec.cutpoints[term.var] = cuts;
        }
    }
}

/// Bin index in [0, n_bins): the number of cutpoints strictly below the value.
inline int bin_code(const DesignSpec& spec, Var var, double value) {
    auto it = spec.cutpoints.find(var);
    require(it != spec.cutpoints.end(), "bin_code: bins not calibrated for " + std::string(to_string(var)));
    int b = 0;
    for (double c : it->second) b += value > c ? 1 : 0;
    return b;
}

struct Design {
    Eigen::MatrixXd X;
    std::vector<std::string> names;
};

inline std::vector<std::string> design_column_names(const DesignSpec& spec, DesignRole role) {
    std::vector<std::string> names = {"(intercept)"};
    for (const Term& term : spec.terms(role)) {
        if (!term.binned) {
            names.emplace_back(to_string(term.var));
        } else {
            for (int b = 1; b < spec.n_bins; ++b) names.push_back(std::string(to_string(term.var)) + "[bin" + std::to_string(b) + "]");
        }
    }
    return names;
}

/// Design matrix at time t: intercept, then one column per raw term and
/// n_bins-1 indicator columns per binned term (lowest bin is the reference).
inline Design build_design(const Panel& panel, const DesignSpec& spec, DesignRole role, int t) {
    require(t >= 0 && t <= panel.t_steps, "build_design: time slice out of range");
    Design d;
    d.names = design_column_names(spec, role);
    d.X.resize(panel.n, static_cast<Eigen::Index>(d.names.size()));
    for (int i = 0; i < panel.n; ++i) {
        Eigen::Index c = 0;
        d.X(i, c++) = 1.0;
        for (const Term& term : spec.terms(role)) {
            const double v = panel.value(term.var, t, i);
            if (!term.binned) {
                d.X(i, c++) = v;
            } else {
                const int code = bin_code(spec, term.var, v);
                for (int b = 1; b < spec.n_bins; ++b) d.X(i, c++) = code == b ? 1.0 : 0.0;
            }
        }
    }
    return d;
}

inline Design stack_designs(std::span<const Design> parts) {
    require(!parts.empty(), "stack_designs: nothing to stack");
    Eigen::Index rows = 0;
    for (const auto& p : parts) rows += p.X.rows();
    Design out;
    out.names = parts.front().names;
    out.X.resize(rows, parts.front().X.cols());
    Eigen::Index r = 0;
    for (const auto& p : parts) {
        out.X.middleRows(r, p.X.rows()) = p.X;
        r += p.X.rows();
    }
    return out;
}

}  // namespace nettmle
