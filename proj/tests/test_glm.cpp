#include <gtest/gtest.h>

#include <cmath>

#include "nettmle/glm.hpp"
#include "nettmle/graph.hpp"
#include "nettmle/rng.hpp"
#include "nettmle/simdata.hpp"

using namespace nettmle;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

MatrixXd random_design(int n, int p, Rng& rng) {
    MatrixXd X(n, p);
    for (int i = 0; i < n; ++i) {
        X(i, 0) = 1.0;
        for (int k = 1; k < p; ++k) X(i, k) = rng.normal();
    }
    return X;
}

VectorXd simulate_response(Family f, const MatrixXd& X, const VectorXd& beta, Rng& rng) {
    VectorXd y(X.rows());
    const VectorXd eta = X * beta;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        if (f == Family::binomial) {
            y(i) = rng.bernoulli(expit(eta(i))) ? 1.0 : 0.0;
        } else {
            // Poisson by inversion
            const double mu = std::exp(eta(i));
            double u = rng.uniform(), pk = std::exp(-mu), cdf = pk;
            int k = 0;
            while (u > cdf && k < 1000) {
                ++k;
                pk *= mu / k;
                cdf += pk;
            }
            y(i) = k;
        }
    }
    return y;
}

Panel small_panel(int n, std::uint64_t seed) {
    const auto base = generate_uniform(n, 1, 6, seed).base();
    PolicySpec obs;
    obs.mode = PolicyMode::observational;
    return run_sir(base, draw_static_covariates(n, seed), obs, SimConfig{}, seed).panel;
}

}  // namespace

TEST(GlmFit, InterceptOnlyBinomialIsLogitOfMean) {
    VectorXd y(10);
    y << 1, 0, 0, 1, 0, 0, 1, 0, 0, 0;
    const auto f = fit(Family::binomial, MatrixXd::Ones(10, 1), y);
    EXPECT_TRUE(f.converged);
    EXPECT_NEAR(f.coefficients(0), std::log(0.3 / 0.7), 1e-6);
    EXPECT_NEAR(f.coefficients(0), -0.8473, 1e-4);
    for (double p : predict(f, MatrixXd::Ones(3, 1))) EXPECT_NEAR(p, 0.3, 1e-10);
}

TEST(GlmFit, InterceptOnlyPoissonIsLogOfMean) {
    VectorXd y(6);
    y << 0, 1, 2, 3, 4, 2;
    const auto f = fit(Family::poisson, MatrixXd::Ones(6, 1), y);
    EXPECT_TRUE(f.converged);
    EXPECT_NEAR(f.coefficients(0), std::log(2.0), 1e-6);
}

TEST(GlmFit, HeavyPenaltyShrinksSlopes) {
    Rng rng(1);
    const MatrixXd X = random_design(200, 4, rng);
    VectorXd beta(4);
    beta << 0.2, 1.0, -1.0, 0.5;
    const VectorXd y = simulate_response(Family::binomial, X, beta, rng);
    GlmOptions opt;
    opt.l2 = 1e6;
    const auto f = fit(Family::binomial, X, y, opt);
    for (int k = 1; k < 4; ++k) EXPECT_NEAR(f.coefficients(k), 0.0, 1e-4);
}

TEST(GlmFit, ScoreResidualOnRandomDesigns) {
    Rng rng(2);
    for (Family fam : {Family::binomial, Family::poisson}) {
        for (int rep = 0; rep < 25; ++rep) {
            const MatrixXd X = random_design(300, 5, rng);
            VectorXd beta(5);
            for (int k = 0; k < 5; ++k) beta(k) = 0.4 * rng.normal();
            const VectorXd y = simulate_response(fam, X, beta, rng);
            const auto f = fit(fam, X, y);
            ASSERT_TRUE(f.converged);
            EXPECT_LT(glm_score(fam, X, y, f.coefficients).cwiseAbs().maxCoeff(), 1e-8);
        }
    }
}

TEST(GlmFit, PenalisedFixedPoint) {
    Rng rng(3);
    const MatrixXd X = random_design(150, 3, rng);
    VectorXd beta(3);
    beta << -0.5, 0.8, 0.3;
    const VectorXd y = simulate_response(Family::binomial, X, beta, rng);
    GlmOptions opt;
    opt.l2 = 2.5;
    const auto f = fit(Family::binomial, X, y, opt);
    ASSERT_TRUE(f.converged);
    EXPECT_LT(glm_score(Family::binomial, X, y, f.coefficients, opt).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(GlmFit, ObjectiveNeverIncreases) {
    Rng rng(4);
    const MatrixXd X = random_design(100, 4, rng);
    VectorXd beta(4);
    beta << 1.0, 2.0, -2.0, 1.5;
    const VectorXd y = simulate_response(Family::binomial, X, beta, rng);
    const auto f = fit(Family::binomial, X, y);
    for (std::size_t k = 1; k < f.objective_trace.size(); ++k)
        EXPECT_LE(f.objective_trace[k], f.objective_trace[k - 1] + 1e-12 * std::abs(f.objective_trace[k - 1]));
}

TEST(GlmFit, IntegerWeightsEqualReplicatedRows) {
    Rng rng(5);
    const MatrixXd X = random_design(40, 3, rng);
    VectorXd beta(3);
    beta << 0.1, 0.7, -0.4;
    const VectorXd y = simulate_response(Family::poisson, X, beta, rng);
    VectorXd w(40);
    int total = 0;
    for (int i = 0; i < 40; ++i) total += static_cast<int>(w(i) = 1 + static_cast<int>(rng.below(3)));
    MatrixXd Xr(total, 3);
    VectorXd yr(total);
    for (int i = 0, r = 0; i < 40; ++i)
        for (int c = 0; c < w(i); ++c, ++r) {
            Xr.row(r) = X.row(i);
            yr(r) = y(i);
        }
    const auto fw = fit(Family::poisson, X, y, w);
    const auto fr = fit(Family::poisson, Xr, yr);
    EXPECT_LT((fw.coefficients - fr.coefficients).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(GlmFit, OffsetShiftsIntercept) {
    Rng rng(6);
    const MatrixXd X = random_design(200, 2, rng);
    VectorXd beta(2);
    beta << -0.3, 0.6;
    const VectorXd y = simulate_response(Family::binomial, X, beta, rng);
    const VectorXd off = VectorXd::Constant(200, 0.75);
    const auto plain = fit(Family::binomial, X, y);
    const auto shifted = fit(Family::binomial, X, y, std::nullopt, off);
    EXPECT_NEAR(shifted.coefficients(0), plain.coefficients(0) - 0.75, 1e-7);
    EXPECT_NEAR(shifted.coefficients(1), plain.coefficients(1), 1e-7);
}

TEST(GlmFit, RankDeficientDesignNamesColumns) {
    Rng rng(7);
    MatrixXd X = random_design(50, 3, rng);
    X.col(2) = 2.0 * X.col(1);
    VectorXd y = VectorXd::Zero(50);
    y.head(20).setOnes();
    GlmOptions opt;
    opt.column_names = {"(intercept)", "dose", "double_dose"};
    try {
        fit(Family::binomial, X, y, opt);
        FAIL() << "expected singular_design_error";
    } catch (const singular_design_error& e) {
        const std::string msg = e.what();
        EXPECT_TRUE(msg.find("dose") != std::string::npos) << msg;
    }
    opt.l2 = 1e-3;
    EXPECT_NO_THROW(fit(Family::binomial, X, y, opt));
}

TEST(GlmFit, RejectsBadInput) {
    MatrixXd X = MatrixXd::Ones(3, 1);
    VectorXd y(3);
    y << 0, 1, std::nan("");
    EXPECT_THROW(fit(Family::binomial, X, y), std::invalid_argument);
    y << 0, 1, 2;
    EXPECT_THROW(fit(Family::binomial, X, y), std::invalid_argument);
    y << 0, -1, 2;
    EXPECT_THROW(fit(Family::poisson, X, y), std::invalid_argument);
    EXPECT_THROW(fit(Family::poisson, MatrixXd::Ones(2, 1), y), std::invalid_argument);
}

TEST(GlmPredict, OffsetPassthroughAndManualPredictor) {
    GlmFit f;
    f.family = Family::binomial;
    f.coefficients = VectorXd::Zero(2);
    MatrixXd X(3, 2);
    X << 1, 2, 1, -1, 1, 0.5;
    VectorXd off(3);
    off << -1.0, 0.0, 2.0;
    const VectorXd p = predict(f, X, off);
    for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(p(i), expit(off(i)));

    Rng rng(8);
    const MatrixXd Z = random_design(30, 3, rng);
    VectorXd beta(3);
    beta << 0.3, -0.2, 0.9;
    const VectorXd y = simulate_response(Family::poisson, Z, beta, rng);
    const auto g = fit(Family::poisson, Z, y);
    const VectorXd mu = predict(g, Z);
    for (int i = 0; i < 30; ++i) {
        double eta = 0.0;
        for (int k = 0; k < 3; ++k) eta += Z(i, k) * g.coefficients(k);
        EXPECT_NEAR(mu(i), std::exp(eta), 1e-10);
    }
    EXPECT_THROW(predict(g, MatrixXd::Ones(2, 2)), std::invalid_argument);
}

TEST(GlmDensity, KnownValues) {
    GlmFit b;
    b.family = Family::binomial;
    b.coefficients = VectorXd::Constant(1, std::log(0.7 / 0.3));
    VectorXd one(1), zero(1);
    one << 1.0;
    zero << 0.0;
    EXPECT_NEAR(density(b, MatrixXd::Ones(1, 1), one)(0), 0.7, 1e-12);
    EXPECT_NEAR(density(b, MatrixXd::Ones(1, 1), zero)(0), 0.3, 1e-12);

    GlmFit p;
    p.family = Family::poisson;
    p.coefficients = VectorXd::Zero(1);
    EXPECT_NEAR(density(p, MatrixXd::Ones(1, 1), zero)(0), std::exp(-1.0), 1e-12);
    p.coefficients(0) = std::log(2.5);
    VectorXd three(1);
    three << 3.0;
    const double log_pmf = 3 * std::log(2.5) - 2.5 - (std::log(1.0) + std::log(2.0) + std::log(3.0));
    EXPECT_NEAR(density(p, MatrixXd::Ones(1, 1), three)(0), std::exp(log_pmf), 1e-12);

    VectorXd bad(1);
    bad << 0.5;
    EXPECT_THROW(density(b, MatrixXd::Ones(1, 1), bad), std::invalid_argument);
    EXPECT_THROW(density(p, MatrixXd::Ones(1, 1), bad), std::invalid_argument);
}

TEST(Design, CorrectSpecificationColumns) {
    const auto spec = make_design_spec(Scenario::CC);
    const std::vector<std::string> exposure = {"(intercept)", "xi_static", "xi_inf_nbrs", "xi_quar_hist", "xi_s_mean", "xi_s_infsum"};
    EXPECT_EQ(design_column_names(spec, DesignRole::exposure), exposure);
    const auto outcome = design_column_names(spec, DesignRole::outcome);
    EXPECT_EQ(outcome.size(), 8u);
    EXPECT_EQ(outcome[1], "alpha");
    EXPECT_EQ(outcome[2], "alpha_s");
}

TEST(Design, MisspecifiedScenariosDropVariables) {
    auto has = [](const std::vector<std::string>& v, const std::string& s) { return std::find(v.begin(), v.end(), s) != v.end(); };
    const auto cw = make_design_spec(Scenario::CW);
    EXPECT_FALSE(has(design_column_names(cw, DesignRole::outcome), "xi_inf_nbrs"));
    EXPECT_TRUE(has(design_column_names(cw, DesignRole::exposure), "xi_inf_nbrs"));
    const auto wc = make_design_spec(Scenario::WC);
    EXPECT_FALSE(has(design_column_names(wc, DesignRole::exposure), "xi_s_mean"));
    EXPECT_FALSE(has(design_column_names(wc, DesignRole::exposure), "xi_s_infsum"));
    EXPECT_TRUE(has(design_column_names(wc, DesignRole::outcome), "xi_s_mean"));
}

TEST(Design, BinnedTermExpandsToIndicators) {
    DesignSpec spec;
    spec.exposure_terms = {{Var::xi_static, true}};
    spec.n_bins = 4;
    const Panel p = small_panel(200, 9);
    calibrate_bins(spec, p, p.t_steps);
    const Design d = build_design(p, spec, DesignRole::exposure, p.t_steps);
    ASSERT_EQ(d.X.cols(), 4);  // intercept + 3 indicators
    for (int i = 0; i < p.n; ++i) {
        const double rowsum = d.X.row(i).tail(3).sum();
        EXPECT_LE(rowsum, 1.0);
        EXPECT_EQ(rowsum == 1.0, bin_code(spec, Var::xi_static, p.xi_static[i]) > 0);
    }
    // quartile bins hold about a quarter of the records each
    for (int b = 1; b < 4; ++b) EXPECT_NEAR(d.X.col(b).mean(), 0.25, 0.02);
}

TEST(Design, QuantileCutpointsInterpolate) {
    Panel p;
    p.resize(101, 1);
    p.xi_static.resize(101);
    for (int i = 0; i < 101; ++i) p.xi_static[i] = 100 - i;  // 0..100 in reverse
    DesignSpec spec;
    spec.outcome_terms = {{Var::xi_static, true}};
    calibrate_bins(spec, p, 1);
    EXPECT_EQ(spec.cutpoints[Var::xi_static], (std::vector<double>{25.0, 50.0, 75.0}));
    EXPECT_EQ(bin_code(spec, Var::xi_static, 25.0), 0);
    EXPECT_EQ(bin_code(spec, Var::xi_static, 25.5), 1);
    EXPECT_EQ(bin_code(spec, Var::xi_static, 99.0), 3);
}

TEST(Design, TermNamesParse) {
    const std::vector<std::string> names = {"alpha", "xi_s_mean:bin"};
    const auto t = terms_from_names(names);
    ASSERT_EQ(t.size(), 2u);
    EXPECT_FALSE(t[0].binned);
    EXPECT_TRUE(t[1].binned);
    const std::vector<std::string> bad = {"nonsense"};
    EXPECT_THROW(terms_from_names(bad), std::invalid_argument);
}

TEST(Design, StackKeepsRowOrder) {
    const Panel p = small_panel(60, 10);
    const auto spec = make_design_spec(Scenario::CC);
    std::vector<Design> parts = {build_design(p, spec, DesignRole::exposure, 3), build_design(p, spec, DesignRole::exposure, 7)};
    const Design s = stack_designs(parts);
    ASSERT_EQ(s.X.rows(), 120);
    EXPECT_EQ(s.X.topRows(60), parts[0].X);
    EXPECT_EQ(s.X.bottomRows(60), parts[1].X);
}
