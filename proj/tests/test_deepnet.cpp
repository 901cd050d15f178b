#include <gtest/gtest.h>

#include <sstream>

#include "nettmle/deepnet.hpp"
#include "nettmle/glm.hpp"
#include "nettmle/graph.hpp"
#include "nettmle/simdata.hpp"
#include "nettmle/tmle.hpp"
#include "oracles.hpp"

using namespace nettmle;
using Eigen::MatrixXd;
using Eigen::VectorXd;

TEST(TemporalExtents, HalvesToOne) {
    EXPECT_EQ(temporal_extents(1), (std::vector<int>{1}));
    EXPECT_EQ(temporal_extents(9), (std::vector<int>{9, 5, 3, 2, 1}));
    EXPECT_EQ(temporal_extents(4), (std::vector<int>{4, 2, 1}));
}

TEST(Forward, ZeroWeightsGiveHalf) {
    const auto p = MlpParams::shaped(4, 8, 3);
    const auto r = forward(p, MatrixXd::Random(3, 4));
    EXPECT_DOUBLE_EQ(r.upsilon_hat, 0.5);
    EXPECT_DOUBLE_EQ(r.alpha_hat, 0.5);
}

TEST(Forward, SingleStepTemporalModuleIsIdentity) {
    Rng rng(1);
    const auto p = oracle::random_params(3, 5, 1, rng);
    for (int rep = 0; rep < 5; ++rep) {
        std::vector<MatrixXd> s = {MatrixXd::Random(4, 5)};
        EXPECT_EQ(temporal_module(p, s), s[0]);
    }
}

TEST(Forward, MatchesScalarReference) {
    Rng rng(2);
    for (int Tr : {1, 2, 3, 5, 9}) {
        const auto p = oracle::random_params(4, 6, Tr, rng);
        MatrixXd w(Tr, 4);
        for (Eigen::Index k = 0; k < w.size(); ++k) w.data()[k] = rng.normal();
        const auto got = forward(p, w);
        const auto ref = oracle::reference_forward(p, w);
        EXPECT_NEAR(got.upsilon_hat, expit(ref.y_logit), 1e-12);
        EXPECT_NEAR(got.alpha_hat, expit(ref.a_logit), 1e-12);
        for (int r = 0; r < 6; ++r) EXPECT_NEAR(got.k(r), ref.k[r], 1e-12);
    }
}

TEST(Forward, PureAndRepeatable) {
    Rng rng(3);
    const auto p = oracle::random_params(3, 4, 4, rng);
    const MatrixXd w = MatrixXd::Random(4, 3);
    const auto a = forward(p, w), b = forward(p, w);
    EXPECT_EQ(a.upsilon_hat, b.upsilon_hat);
    EXPECT_EQ(a.k, b.k);
    EXPECT_THROW(forward(p, MatrixXd::Random(3, 3)), std::invalid_argument);
}

TEST(Loss, PerfectPredictionAndNoAdversary) {
    VectorXd y(3), yh(3), a(3), ah(3);
    y << 1, 0, 1;
    yh = y;
    a << 0, 1, 1;
    ah << 0.3, 0.6, 0.9;
    const auto v = loss(yh, y, {}, ah, a, 0.0);
    EXPECT_LE(v.outcome / 3, 2e-7);
    EXPECT_DOUBLE_EQ(v.total, v.outcome);
    const auto w = loss(yh, y, {1, 0, 0}, ah, a, 0.5);
    EXPECT_EQ(w.labeled, 1);
    EXPECT_NEAR(w.total, w.outcome - 0.5 * w.intervention, 1e-15);
}

TEST(Gradient, MatchesFiniteDifferences) {
    Rng rng(4);
    for (int rep = 0; rep < 6; ++rep) {
        const int Tr = 1 + static_cast<int>(rng.below(9));
        const auto p = oracle::random_params(3, 5, Tr, rng);
        const auto b = oracle::random_batch(7, 3, Tr, rng);
        const double lambda = rng.uniform();
        const auto chk = oracle::finite_difference_check(p, b, lambda, 1.0 / 7, 1.0 / 7);
        EXPECT_LT(chk.max_rel_error, 1e-4) << "Tr=" << Tr << " worst " << chk.worst_block;
    }
}

TEST(Gradient, OutcomeHeadIgnoresUnlabeledRecords) {
    Rng rng(5);
    const auto p = oracle::random_params(3, 4, 2, rng);
    auto b = oracle::random_batch(6, 3, 2, rng);
    std::fill(b.has_y.begin(), b.has_y.end(), 0);
    const auto lg = loss_and_gradient(p, b, 0.5);
    EXPECT_EQ(lg.grad.wy.norm(), 0.0);
    EXPECT_EQ(lg.grad.by.norm(), 0.0);
    EXPECT_GT(lg.grad.wa.norm(), 0.0);
}

TEST(Gradient, ReversalFlipsBackboneSignal) {
    Rng rng(6);
    const auto p = oracle::random_params(3, 4, 1, rng);
    auto b = oracle::random_batch(6, 3, 1, rng);
    std::fill(b.has_y.begin(), b.has_y.end(), 0);
    // With only the adversary active, the backbone gradient is -lambda times
    // the gradient that would minimise L_a.
    const auto g1 = loss_and_gradient(p, b, 1.0);
    const auto g2 = loss_and_gradient(p, b, 2.0);
    EXPECT_LT((g2.grad.w1 - 2.0 * g1.grad.w1).norm(), 1e-12);
    EXPECT_LT((g1.grad.wa - g2.grad.wa).norm(), 1e-15);
}

TEST(LambdaSchedule, ClosedForm) {
    EXPECT_NEAR(lambda_schedule(0.0, 10), 0.0, 1e-12);
    EXPECT_NEAR(lambda_schedule(0.5, 10), 0.9866, 1e-4);
    EXPECT_NEAR(lambda_schedule(1.0, 10), 0.9999, 1e-4);
    double prev = -1.0;
    for (int k = 0; k <= 100; ++k) {
        const double l = lambda_schedule(k / 100.0, 10);
        EXPECT_GE(l, prev);
        prev = l;
    }
}

namespace {

WindowSet separable_set(int n, int Tr, Rng& rng) {
    WindowSet w;
    w.resize(n, Tr, 2);
    w.y.resize(n);
    for (int i = 0; i < n; ++i) {
        const double sign = (i % 2 == 0) ? 1.0 : -1.0;
        for (int t = 0; t < Tr; ++t) {
            w.at(i, t, 0) = sign * (0.5 + rng.uniform());
            w.at(i, t, 1) = rng.normal();
        }
        w.y[i] = sign > 0 ? 1.0 : 0.0;
        w.a[i] = rng.bernoulli(0.5);
    }
    return w;
}

}  // namespace

TEST(Train, SeparableToyWithoutAdversary) {
    Rng rng(7);
    const WindowSet obs = separable_set(200, 3, rng);
    WindowSet none;
    none.resize(0, 3, 2);
    TrainConfig cfg;
    cfg.reception_field = 3;
    cfg.hidden_dim = 16;
    cfg.n_epochs = 150;
    cfg.batch_size = 200;  // full batch, so each epoch is one descent step
    cfg.learning_rate = 0.05;
    cfg.adversarial = false;
    cfg.seed = 11;
    const auto res = train(obs, none, cfg);
    for (std::size_t e = 1; e < res.epoch_outcome_loss.size(); ++e)
        EXPECT_LE(res.epoch_outcome_loss[e], res.epoch_outcome_loss[e - 1]) << "epoch " << e;
    const auto pred = predict_windows(res.net, obs);
    int correct = 0;
    for (int i = 0; i < obs.records; ++i) correct += (pred.upsilon_hat(i) > 0.5) == (obs.y[i] > 0.5);
    EXPECT_GE(correct / 200.0, 0.95);
    for (double l : res.epoch_lambda) EXPECT_EQ(l, 0.0);
}

TEST(Train, DeterministicUnderSeed) {
    Rng rng(8);
    const WindowSet obs = separable_set(100, 2, rng);
    WindowSet samp = separable_set(150, 2, rng);
    samp.y.clear();
    TrainConfig cfg;
    cfg.reception_field = 2;
    cfg.hidden_dim = 8;
    cfg.n_epochs = 5;
    cfg.batch_size = 32;
    cfg.seed = 3;
    const auto a = train(obs, samp, cfg), b = train(obs, samp, cfg);
    EXPECT_EQ(a.net.params.w1, b.net.params.w1);
    EXPECT_EQ(a.net.params.wa, b.net.params.wa);
    for (std::size_t e = 1; e < a.epoch_lambda.size(); ++e) EXPECT_GE(a.epoch_lambda[e], a.epoch_lambda[e - 1]);
}

TEST(Train, NonFiniteLossAborts) {
    Rng rng(9);
    const WindowSet obs = separable_set(64, 1, rng);
    WindowSet none;
    none.resize(0, 1, 2);
    TrainConfig cfg;
    cfg.reception_field = 1;
    cfg.hidden_dim = 4;
    cfg.n_epochs = 50;
    cfg.batch_size = 16;
    cfg.learning_rate = 1e200;
    try {
        train(obs, none, cfg);
        FAIL() << "expected training_error";
    } catch (const training_error& e) {
        EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos);
    }
}

TEST(Train, RejectsMismatchedWindows) {
    Rng rng(10);
    const WindowSet obs = separable_set(20, 2, rng);
    WindowSet bad;
    bad.resize(5, 3, 2);
    TrainConfig cfg;
    cfg.reception_field = 2;
    EXPECT_THROW(train(obs, bad, cfg), std::invalid_argument);
    WindowSet labeled = separable_set(5, 2, rng);
    EXPECT_THROW(train(obs, labeled, cfg), std::invalid_argument);
}

TEST(Train, AdversaryIsLessInformativeThanRawProbe) {
    // Confounded simulator data: observed panel plus policy-sampled copies.
    const auto base = generate_uniform(500, 1, 6, 21).base();
    const auto xi = draw_static_covariates(500, 22);
    PolicySpec obs_policy;
    obs_policy.mode = PolicyMode::observational;
    const Panel observed = run_sir(base, xi, obs_policy, SimConfig{}, 23).panel;
    PolicySpec cf;
    cf.p_omega = 0.5;
    const auto copies = sample_policy_copies(observed, base, cf, SimConfig{}, 6, 24);
    const auto spec = make_design_spec(Scenario::CC);
    const int Tr = 3;

    const WindowSet obs_w = build_windows(observed, spec, Tr, true);
    std::vector<WindowSet> train_parts, held_parts;
    for (std::size_t c = 0; c < copies.size(); ++c)
        (c < 4 ? train_parts : held_parts).push_back(build_windows(copies[c].panel, spec, Tr, false));
    const WindowSet samp = concat_windows(train_parts), held = concat_windows(held_parts);

    TrainConfig cfg;
    cfg.reception_field = Tr;
    cfg.hidden_dim = 32;
    cfg.n_epochs = 100;
    cfg.seed = 25;
    const auto res = train(obs_w, samp, cfg);
    const auto pred = predict_windows(res.net, held);
    int head_correct = 0;
    for (int i = 0; i < held.records; ++i) head_correct += (pred.alpha_hat(i) > 0.5) == (held.a[i] > 0.5);
    const double head_acc = static_cast<double>(head_correct) / held.records;

    // Probe: logistic regression on the flattened raw windows.
    auto flatten = [&](const WindowSet& w) {
        MatrixXd X(w.records, 1 + w.steps * w.features);
        for (int r = 0; r < w.records; ++r) {
            X(r, 0) = 1.0;
            for (int t = 0; t < w.steps; ++t)
                for (int f = 0; f < w.features; ++f) X(r, 1 + t * w.features + f) = (w.at(r, t, f) - res.net.scaler.mean(f)) / res.net.scaler.scale(f);
        }
        return X;
    };
    const MatrixXd Xtr = flatten(samp), Xte = flatten(held);
    const VectorXd atr = Eigen::Map<const VectorXd>(samp.a.data(), samp.records);
    GlmOptions go;
    go.l2 = 1e-3;
    const auto probe = fit(Family::binomial, Xtr, atr, go);
    const VectorXd pp = predict(probe, Xte);
    int probe_correct = 0;
    for (int i = 0; i < held.records; ++i) probe_correct += (pp(i) > 0.5) == (held.a[i] > 0.5);
    const double probe_acc = static_cast<double>(probe_correct) / held.records;

    EXPECT_LT(std::abs(head_acc - 0.5), std::abs(probe_acc - 0.5)) << "head " << head_acc << " probe " << probe_acc;
}

TEST(PredictOutcome, ClipBounds) {
    EXPECT_EQ(clip_outcome(0.99), 0.95);
    EXPECT_EQ(clip_outcome(0.01), 0.05);
    EXPECT_EQ(clip_outcome(0.5), 0.5);
}

TEST(Checkpoint, RoundTripIsExact) {
    Rng rng(12);
    TrainedNet net;
    net.params = oracle::random_params(3, 5, 5, rng);
    net.scaler.mean = VectorXd::Random(3);
    net.scaler.scale = VectorXd::Random(3).cwiseAbs() + VectorXd::Ones(3);
    std::stringstream ss;
    save_checkpoint(ss, net);
    std::string magic;
    std::getline(std::stringstream(ss.str()), magic);
    EXPECT_EQ(magic, "NETTMLE-MLP v1");
    const TrainedNet back = load_checkpoint(ss);
    std::vector<const MatrixXd*> a, b;
    net.params.for_each_block([&](const std::string&, const MatrixXd& m) { a.push_back(&m); });
    back.params.for_each_block([&](const std::string&, const MatrixXd& m) { b.push_back(&m); });
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(*a[k], *b[k]);
    EXPECT_EQ(back.scaler.mean, net.scaler.mean);
    EXPECT_EQ(back.scaler.scale, net.scaler.scale);

    std::stringstream bad("NOT-A-CHECKPOINT\n");
    EXPECT_THROW(load_checkpoint(bad), std::invalid_argument);
}
