#pragma once

// Adversarial MLP outcome model.
//
//   x_t  --backbone-->  S_t  (per time step, shared weights)
//   [S_0 .. S_{Tr-1}]  --temporal U-net-->  K
//   K --outcome head--> upsilon_hat
//   K --gradient reversal--> intervention head --> alpha_hat
//
// The temporal module works along the time axis only. The down path halves
// the temporal extent with time-mixing projections (Tr -> ceil(Tr/2) -> ... -> 1).
// The up path starts from the extent-1 bottleneck and, at every level, stacks
// the running signal with that level's down-path rows and projects back to
// extent 1. With Tr = 1 the module is the identity.
//
// Gradient conventions for one batch, with L_y and L_a summed binary
// cross-entropies: theta_y receives dL_y, theta_a receives dL_a, and the
// backbone and temporal parameters receive d(L_y - lambda L_a).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <istream>
#include <limits>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nettmle/common.hpp"
#include "nettmle/rng.hpp"

namespace nettmle {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Temporal extents of the down path: Tr, ceil(Tr/2), ..., 1.
inline std::vector<int> temporal_extents(int reception_field) {
    require(reception_field >= 1, "reception field must be >= 1");
    std::vector<int> ext = {reception_field};
    while (ext.back() > 1) ext.push_back((ext.back() + 1) / 2);
    return ext;
}

struct MlpParams {
    // backbone
    MatrixXd w1, b1, w2, b2;  // w1: H x F, b1: H x 1, w2: H x H, b2: H x 1
    // temporal module; level l maps extent T_l to T_{l+1}
    std::vector<MatrixXd> down_w, down_b;  // T_{l+1} x T_l, T_{l+1} x 1
    std::vector<MatrixXd> up_w, up_b;      // 1 x (1 + T_l), 1 x 1
    // heads
    MatrixXd wy, by, wa, ba;  // H x 1, 1 x 1

    int input_dim() const { return static_cast<int>(w1.cols()); }
    int hidden_dim() const { return static_cast<int>(w1.rows()); }
    int reception_field() const { return down_w.empty() ? 1 : static_cast<int>(down_w.front().cols()); }

    template <class F>
    void for_each_block(F&& f) {
        f("backbone.w1", w1), f("backbone.b1", b1), f("backbone.w2", w2), f("backbone.b2", b2);
        for (std::size_t l = 0; l < down_w.size(); ++l) {
            f("temporal.down" + std::to_string(l) + ".w", down_w[l]);
            f("temporal.down" + std::to_string(l) + ".b", down_b[l]);
        }
        for (std::size_t l = 0; l < up_w.size(); ++l) {
            f("temporal.up" + std::to_string(l) + ".w", up_w[l]);
            f("temporal.up" + std::to_string(l) + ".b", up_b[l]);
        }
        f("outcome.w", wy), f("outcome.b", by), f("intervention.w", wa), f("intervention.b", ba);
    }

    template <class F>
    void for_each_block(F&& f) const {
        const_cast<MlpParams*>(this)->for_each_block([&](const std::string& name, MatrixXd& m) { f(name, static_cast<const MatrixXd&>(m)); });
    }

    MlpParams zeros_like() const {
        MlpParams z = *this;
        z.for_each_block([](const std::string&, MatrixXd& m) { m.setZero(); });
        return z;
    }

    void axpy(double s, const MlpParams& g) {
        std::vector<const MatrixXd*> src;
        g.for_each_block([&](const std::string&, const MatrixXd& m) { src.push_back(&m); });
        std::size_t k = 0;
        for_each_block([&](const std::string&, MatrixXd& m) { m += s * (*src[k++]); });
    }

    bool all_finite() const {
        bool ok = true;
        for_each_block([&](const std::string&, const MatrixXd& m) { ok = ok && m.allFinite(); });
        return ok;
    }

    std::size_t parameter_count() const {
        std::size_t c = 0;
        for_each_block([&](const std::string&, const MatrixXd& m) { c += static_cast<std::size_t>(m.size()); });
        return c;
    }

    /// Zero-initialized parameters of the given shape.
    static MlpParams shaped(int input_dim, int hidden_dim, int reception_field) {
        require(input_dim >= 1 && hidden_dim >= 1, "mlp: dimensions must be positive");
        MlpParams p;
        p.w1 = MatrixXd::Zero(hidden_dim, input_dim);
        p.b1 = MatrixXd::Zero(hidden_dim, 1);
        p.w2 = MatrixXd::Zero(hidden_dim, hidden_dim);
        p.b2 = MatrixXd::Zero(hidden_dim, 1);
        const auto ext = temporal_extents(reception_field);
        for (std::size_t l = 0; l + 1 < ext.size(); ++l) {
            p.down_w.push_back(MatrixXd::Zero(ext[l + 1], ext[l]));
            p.down_b.push_back(MatrixXd::Zero(ext[l + 1], 1));
            p.up_w.push_back(MatrixXd::Zero(1, 1 + ext[l]));
            p.up_b.push_back(MatrixXd::Zero(1, 1));
        }
        p.wy = MatrixXd::Zero(hidden_dim, 1);
        p.by = MatrixXd::Zero(1, 1);
        p.wa = MatrixXd::Zero(hidden_dim, 1);
        p.ba = MatrixXd::Zero(1, 1);
        return p;
    }

    static MlpParams initialized(int input_dim, int hidden_dim, int reception_field, Rng& rng) {
        MlpParams p = shaped(input_dim, hidden_dim, reception_field);
        auto he = [&](MatrixXd& m, int fan_in) {
            const double a = std::sqrt(6.0 / fan_in);
            for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = rng.uniform(-a, a);
        };
        // Positive time-mixing weights around an average keep the rectified
        // signal alive through the temporal levels.
        auto averaging = [&](MatrixXd& m) {
            const double c = 1.0 / static_cast<double>(m.cols());
            for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = rng.uniform(0.5 * c, 1.5 * c);
        };
        he(p.w1, input_dim);
        he(p.w2, hidden_dim);
        p.b1.setConstant(0.01);
        p.b2.setConstant(0.01);
        for (auto& m : p.down_w) averaging(m);
        for (auto& m : p.up_w) averaging(m);
        const double h = std::sqrt(6.0 / (hidden_dim + 1));
        for (auto* m : {&p.wy, &p.wa})
            for (Eigen::Index k = 0; k < m->size(); ++k) m->data()[k] = rng.uniform(-h, h);
        return p;
    }
};

/// Windows of per-step features, stored record-major as [record][step][feature].
struct WindowSet {
    int records = 0;
    int steps = 0;
    int features = 0;
    std::vector<double> x;
    std::vector<double> y;  // outcome labels; empty when unlabeled
    std::vector<double> a;  // intervention labels alpha(T)

    bool labeled() const { return !y.empty(); }
    double at(int r, int t, int f) const { return x[(static_cast<std::size_t>(r) * steps + t) * features + f]; }
    double& at(int r, int t, int f) { return x[(static_cast<std::size_t>(r) * steps + t) * features + f]; }

    void resize(int n_records, int n_steps, int n_features) {
        records = n_records;
        steps = n_steps;
        features = n_features;
        x.assign(static_cast<std::size_t>(n_records) * n_steps * n_features, 0.0);
        a.assign(static_cast<std::size_t>(n_records), 0.0);
    }
};

/// Per-feature standardization fitted on the observed windows.
struct FeatureScaler {
    VectorXd mean, scale;

    static FeatureScaler fit(const WindowSet& w) {
        FeatureScaler s;
        s.mean = VectorXd::Zero(w.features);
        s.scale = VectorXd::Ones(w.features);
        const double count = static_cast<double>(w.records) * w.steps;
        if (count == 0) return s;
        VectorXd sq = VectorXd::Zero(w.features);
        for (int r = 0; r < w.records; ++r)
            for (int t = 0; t < w.steps; ++t)
                for (int f = 0; f < w.features; ++f) {
                    s.mean(f) += w.at(r, t, f);
                    sq(f) += w.at(r, t, f) * w.at(r, t, f);
                }
        s.mean /= count;
        for (int f = 0; f < w.features; ++f) {
            const double var = sq(f) / count - s.mean(f) * s.mean(f);
            s.scale(f) = var > 1e-12 ? std::sqrt(var) : 1.0;
        }
        return s;
    }

    static FeatureScaler identity(int features) { return {VectorXd::Zero(features), VectorXd::Ones(features)}; }
};

/// One mini-batch: per-step input matrices (rows = records) and labels.
struct Batch {
    std::vector<MatrixXd> x;  // steps entries, each records x features
    VectorXd y;               // outcome label (ignored where has_y = 0)
    std::vector<std::uint8_t> has_y;
    VectorXd a;

    Eigen::Index size() const { return a.size(); }
};

inline Batch gather_batch(const WindowSet& w, std::span<const int> rows, const FeatureScaler& scaler) {
    Batch b;
    const auto B = static_cast<Eigen::Index>(rows.size());
    b.x.assign(static_cast<std::size_t>(w.steps), MatrixXd(B, w.features));
    b.y = VectorXd::Zero(B);
    b.a = VectorXd::Zero(B);
    b.has_y.assign(rows.size(), w.labeled() ? 1 : 0);
    for (Eigen::Index k = 0; k < B; ++k) {
        const int r = rows[k];
        for (int t = 0; t < w.steps; ++t)
            for (int f = 0; f < w.features; ++f) b.x[t](k, f) = (w.at(r, t, f) - scaler.mean(f)) / scaler.scale(f);
        if (w.labeled()) b.y(k) = w.y[r];
        b.a(k) = w.a[r];
    }
    return b;
}

inline Batch concat_batches(const Batch& p, const Batch& q) {
    Batch b;
    const Eigen::Index n1 = p.size(), n2 = q.size();
    for (std::size_t t = 0; t < p.x.size(); ++t) {
        MatrixXd m(n1 + n2, p.x[t].cols());
        m << p.x[t], q.x[t];
        b.x.push_back(std::move(m));
    }
    b.y.resize(n1 + n2);
    b.y << p.y, q.y;
    b.a.resize(n1 + n2);
    b.a << p.a, q.a;
    b.has_y = p.has_y;
    b.has_y.insert(b.has_y.end(), q.has_y.begin(), q.has_y.end());
    return b;
}

struct ForwardCache {
    std::vector<MatrixXd> h1, s;               // per step, B x H
    std::vector<std::vector<MatrixXd>> z;      // z[l][tau], B x H
    std::vector<MatrixXd> u;                   // u[l], B x H
    MatrixXd k;                                // B x H
    VectorXd y_logit, a_logit;
};

namespace detail {

inline MatrixXd relu(MatrixXd m) { return m.cwiseMax(0.0); }

inline MatrixXd relu_mask(const MatrixXd& activated) { return (activated.array() > 0.0).cast<double>().matrix(); }

}  // namespace detail

/// Forward pass over a batch; cache holds every intermediate needed by backward.
inline ForwardCache forward_batch(const MlpParams& p, const std::vector<MatrixXd>& x) {
    const int steps = static_cast<int>(x.size());
    require(steps == p.reception_field(), "forward: window length does not match reception field");
    ForwardCache c;
    const Eigen::Index B = x.empty() ? 0 : x.front().rows();
    for (const auto& xt : x) require(xt.cols() == p.input_dim(), "forward: feature count does not match model");
    for (int t = 0; t < steps; ++t) {
        MatrixXd h1 = detail::relu((x[t] * p.w1.transpose()).rowwise() + p.b1.col(0).transpose());
        MatrixXd s = detail::relu((h1 * p.w2.transpose()).rowwise() + p.b2.col(0).transpose());
        c.h1.push_back(std::move(h1));
        c.s.push_back(std::move(s));
    }
    const std::size_t levels = p.down_w.size();
    c.z.resize(levels + 1);
    c.z[0] = c.s;
    for (std::size_t l = 0; l < levels; ++l) {
        const MatrixXd& D = p.down_w[l];
        for (Eigen::Index tau = 0; tau < D.rows(); ++tau) {
            MatrixXd acc = MatrixXd::Constant(B, p.hidden_dim(), p.down_b[l](tau, 0));
            for (Eigen::Index sig = 0; sig < D.cols(); ++sig) acc += D(tau, sig) * c.z[l][sig];
            c.z[l + 1].push_back(detail::relu(std::move(acc)));
        }
    }
    c.u.resize(levels + 1);
    c.u[levels] = c.z[levels][0];
    for (std::size_t l = levels; l-- > 0;) {
        const MatrixXd& E = p.up_w[l];
        MatrixXd acc = MatrixXd::Constant(B, p.hidden_dim(), p.up_b[l](0, 0));
        acc += E(0, 0) * c.u[l + 1];
        for (Eigen::Index sig = 0; sig + 1 < E.cols(); ++sig) acc += E(0, 1 + sig) * c.z[l][sig];
        c.u[l] = detail::relu(std::move(acc));
    }
    c.k = c.u[0];
    c.y_logit = (c.k * p.wy).col(0).array() + p.by(0, 0);
    c.a_logit = (c.k * p.wa).col(0).array() + p.ba(0, 0);
    return c;
}

struct ForwardResult {
    double upsilon_hat;
    double alpha_hat;
    VectorXd k;
};

/// Single-window forward; `window` is steps x features (already scaled).
inline ForwardResult forward(const MlpParams& p, const MatrixXd& window) {
    std::vector<MatrixXd> x;
    for (Eigen::Index t = 0; t < window.rows(); ++t) x.push_back(window.row(t));
    auto c = forward_batch(p, x);
    return {expit(c.y_logit(0)), expit(c.a_logit(0)), c.k.row(0).transpose()};
}

/// Output of the temporal module alone for a stack of per-step features.
inline MatrixXd temporal_module(const MlpParams& q, const std::vector<MatrixXd>& s) {
    require(static_cast<int>(s.size()) == q.reception_field(), "temporal_module: window length does not match reception field");
    const std::size_t levels = q.down_w.size();
    const Eigen::Index B = s.front().rows(), H = s.front().cols();
    std::vector<std::vector<MatrixXd>> z(levels + 1);
    z[0] = s;
    for (std::size_t l = 0; l < levels; ++l)
        for (Eigen::Index tau = 0; tau < q.down_w[l].rows(); ++tau) {
            MatrixXd acc = MatrixXd::Constant(B, H, q.down_b[l](tau, 0));
            for (Eigen::Index sig = 0; sig < q.down_w[l].cols(); ++sig) acc += q.down_w[l](tau, sig) * z[l][sig];
            z[l + 1].push_back(detail::relu(std::move(acc)));
        }
    MatrixXd u = z[levels][0];
    for (std::size_t l = levels; l-- > 0;) {
        MatrixXd acc = MatrixXd::Constant(B, H, q.up_b[l](0, 0));
        acc += q.up_w[l](0, 0) * u;
        for (Eigen::Index sig = 0; sig + 1 < q.up_w[l].cols(); ++sig) acc += q.up_w[l](0, 1 + sig) * z[l][sig];
        u = detail::relu(std::move(acc));
    }
    return u;
}

inline constexpr double kLossClip = 1e-7;

struct LossValues {
    double outcome = 0.0;       // sum of L_y over labeled records
    double intervention = 0.0;  // sum of L_a over all records
    double total = 0.0;         // outcome - lambda * intervention
    int labeled = 0;
    int records = 0;
};

inline double bce(double p, double label) {
    const double q = clamp_probability(p, kLossClip, 1.0 - kLossClip);
    return -(label * std::log(q) + (1.0 - label) * std::log(1.0 - q));
}

/// Loss from predicted probabilities. Outcome loss counts only labeled records.
inline LossValues loss(const VectorXd& upsilon_hat, const VectorXd& upsilon, const std::vector<std::uint8_t>& has_y,
                       const VectorXd& alpha_hat, const VectorXd& alpha, double lambda) {
    LossValues v;
    v.records = static_cast<int>(alpha.size());
    for (Eigen::Index i = 0; i < alpha.size(); ++i) {
        if (has_y.empty() || has_y[i]) {
            v.outcome += bce(upsilon_hat(i), upsilon(i));
            ++v.labeled;
        }
        v.intervention += bce(alpha_hat(i), alpha(i));
    }
    v.total = v.outcome - lambda * v.intervention;
    return v;
}

struct LossGrad {
    LossValues values;
    MlpParams grad;
};

/// Loss and gradients for one batch. The per-record losses are scaled by
/// `weight_y` and `weight_a` (1 gives the summed losses).
inline LossGrad loss_and_gradient(const MlpParams& p, const Batch& batch, double lambda, double weight_y = 1.0, double weight_a = 1.0) {
    ForwardCache c = forward_batch(p, batch.x);
    const Eigen::Index B = batch.size();
    VectorXd yhat(B), ahat(B), dy(B), da(B);
    for (Eigen::Index i = 0; i < B; ++i) {
        yhat(i) = expit(c.y_logit(i));
        ahat(i) = expit(c.a_logit(i));
        const bool labeled = batch.has_y.empty() || batch.has_y[i];
        const bool y_in = yhat(i) > kLossClip && yhat(i) < 1.0 - kLossClip;
        const bool a_in = ahat(i) > kLossClip && ahat(i) < 1.0 - kLossClip;
        dy(i) = (labeled && y_in) ? weight_y * (yhat(i) - batch.y(i)) : 0.0;
        da(i) = a_in ? weight_a * (ahat(i) - batch.a(i)) : 0.0;
    }
    LossGrad out;
    out.values = loss(yhat, batch.y, batch.has_y, ahat, batch.a, lambda);
    MlpParams& g = out.grad;
    g = p.zeros_like();

    g.wy = c.k.transpose() * dy;
    g.by(0, 0) = dy.sum();
    g.wa = c.k.transpose() * da;
    g.ba(0, 0) = da.sum();

    // Gradient reversal: the intervention branch reaches K scaled by -lambda.
    MatrixXd dk = dy * p.wy.transpose() - lambda * (da * p.wa.transpose());

    const std::size_t levels = p.down_w.size();
    std::vector<MatrixXd> du(levels + 1);
    std::vector<std::vector<MatrixXd>> dz(levels + 1);
    for (std::size_t l = 0; l <= levels; ++l)
        for (const auto& m : c.z[l]) dz[l].push_back(MatrixXd::Zero(m.rows(), m.cols()));
    du[0] = std::move(dk);
    for (std::size_t l = 0; l < levels; ++l) {
        const MatrixXd gpre = du[l].cwiseProduct(detail::relu_mask(c.u[l]));
        const MatrixXd& E = p.up_w[l];
        g.up_b[l](0, 0) = gpre.sum();
        g.up_w[l](0, 0) = gpre.cwiseProduct(c.u[l + 1]).sum();
        du[l + 1] = E(0, 0) * gpre;
        for (Eigen::Index sig = 0; sig + 1 < E.cols(); ++sig) {
            g.up_w[l](0, 1 + sig) = gpre.cwiseProduct(c.z[l][sig]).sum();
            dz[l][sig] += E(0, 1 + sig) * gpre;
        }
    }
    dz[levels][0] += du[levels];
    for (std::size_t l = levels; l-- > 0;) {
        const MatrixXd& D = p.down_w[l];
        for (Eigen::Index tau = 0; tau < D.rows(); ++tau) {
            const MatrixXd gpre = dz[l + 1][tau].cwiseProduct(detail::relu_mask(c.z[l + 1][tau]));
            g.down_b[l](tau, 0) = gpre.sum();
            for (Eigen::Index sig = 0; sig < D.cols(); ++sig) {
                g.down_w[l](tau, sig) = gpre.cwiseProduct(c.z[l][sig]).sum();
                dz[l][sig] += D(tau, sig) * gpre;
            }
        }
    }
    for (std::size_t t = 0; t < batch.x.size(); ++t) {
        const MatrixXd g2 = dz[0][t].cwiseProduct(detail::relu_mask(c.s[t]));
        g.w2 += g2.transpose() * c.h1[t];
        g.b2 += g2.colwise().sum().transpose();
        const MatrixXd g1 = (g2 * p.w2).cwiseProduct(detail::relu_mask(c.h1[t]));
        g.w1 += g1.transpose() * batch.x[t];
        g.b1 += g1.colwise().sum().transpose();
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
    int reception_field = 9;
    int hidden_dim = 64;
    int n_epochs = 300;
    double learning_rate = 1e-2;
    double lambda_gamma = 10.0;
    int batch_size = 128;
    bool adversarial = true;  // false pins lambda to 0
    std::uint64_t seed = 0;

    void validate() const {
        require(reception_field >= 1 && reception_field <= 64, "train: reception_field must lie in [1, 64]");
        require(hidden_dim >= 1, "train: hidden_dim must be >= 1");
        require(n_epochs >= 1, "train: n_epochs must be >= 1");
        require(learning_rate > 0.0, "train: learning_rate must be positive");
        require(lambda_gamma >= 0.0, "train: lambda_gamma must be nonnegative");
        require(batch_size >= 1, "train: batch_size must be >= 1");
    }
};

/// Adaptation weight at training progress p in [0, 1].
inline double lambda_schedule(double progress, double gamma) { return 2.0 / (1.0 + std::exp(-gamma * progress)) - 1.0; }

struct TrainedNet {
    MlpParams params;
    FeatureScaler scaler;
};

struct TrainResult {
    TrainedNet net;
    std::vector<double> epoch_outcome_loss;  // mean L_y per labeled record
    std::vector<double> epoch_lambda;        // lambda at the end of each epoch
};

/// Mini-batch gradient descent on the saddle-point objective. Each step pairs
/// batch_size labeled windows with up to batch_size policy-sampled windows;
/// the outcome loss is averaged over the labeled part and the intervention
/// loss over the whole batch.
inline TrainResult train(const WindowSet& observed, const WindowSet& sampled, const TrainConfig& cfg) {
    cfg.validate();
    require(observed.labeled() && observed.records > 0, "train: observed windows must carry outcome labels");
    require(!sampled.labeled(), "train: sampled windows must not carry outcome labels");
    require(observed.steps == cfg.reception_field, "train: window length does not match reception field");
    require(sampled.records == 0 || (sampled.steps == observed.steps && sampled.features == observed.features),
            "train: sampled windows have a different shape");

    Rng rng(cfg.seed);
    TrainResult res;
    res.net.scaler = FeatureScaler::fit(observed);
    res.net.params = MlpParams::initialized(observed.features, cfg.hidden_dim, cfg.reception_field, rng);
    MlpParams& p = res.net.params;

    std::vector<int> obs_order(static_cast<std::size_t>(observed.records));
    for (int i = 0; i < observed.records; ++i) obs_order[i] = i;
    std::vector<int> samp_order(static_cast<std::size_t>(sampled.records));
    for (int i = 0; i < sampled.records; ++i) samp_order[i] = i;
    rng.shuffle(samp_order);
    std::size_t samp_cursor = 0;

    const int batches_per_epoch = (observed.records + cfg.batch_size - 1) / cfg.batch_size;
    const long total_steps = static_cast<long>(batches_per_epoch) * cfg.n_epochs;
    long step = 0;
    for (int epoch = 0; epoch < cfg.n_epochs; ++epoch) {
        rng.shuffle(obs_order);
        double epoch_loss = 0.0;
        int epoch_labeled = 0;
        double lambda = 0.0;
        for (int bi = 0; bi < batches_per_epoch; ++bi, ++step) {
            const double progress = total_steps > 1 ? static_cast<double>(step) / static_cast<double>(total_steps - 1) : 1.0;
            lambda = cfg.adversarial ? lambda_schedule(progress, cfg.lambda_gamma) : 0.0;

            const int lo = bi * cfg.batch_size;
            const int hi = std::min(observed.records, lo + cfg.batch_size);
            std::span<const int> obs_rows(obs_order.data() + lo, static_cast<std::size_t>(hi - lo));
            Batch batch = gather_batch(observed, obs_rows, res.net.scaler);
            if (sampled.records > 0) {
                std::vector<int> rows;
                for (int k = 0; k < hi - lo; ++k) {
                    if (samp_cursor == samp_order.size()) {
                        rng.shuffle(samp_order);
                        samp_cursor = 0;
                    }
                    rows.push_back(samp_order[samp_cursor++]);
                }
                batch = concat_batches(batch, gather_batch(sampled, rows, res.net.scaler));
            }
            const int n_labeled = hi - lo;
            auto lg = loss_and_gradient(p, batch, lambda, 1.0 / n_labeled, 1.0 / static_cast<double>(batch.size()));
            if (!std::isfinite(lg.values.total) || !lg.grad.all_finite()) {
                std::ostringstream os;
                os << "train: non-finite loss at epoch " << epoch << ", batch " << bi << " (outcome=" << lg.values.outcome
                   << ", intervention=" << lg.values.intervention << ", lambda=" << lambda << ")";
                throw training_error(os.str());
            }
            p.axpy(-cfg.learning_rate, lg.grad);
            epoch_loss += lg.values.outcome;
            epoch_labeled += lg.values.labeled;
        }
        res.epoch_outcome_loss.push_back(epoch_loss / std::max(1, epoch_labeled));
        res.epoch_lambda.push_back(lambda);
    }
    return res;
}

struct Predictions {
    VectorXd upsilon_hat, alpha_hat;
    MatrixXd k;  // filled only when requested
};

inline Predictions predict_windows(const TrainedNet& net, const WindowSet& w, bool keep_representation = false) {
    Predictions out;
    out.upsilon_hat.resize(w.records);
    out.alpha_hat.resize(w.records);
    if (keep_representation) out.k.resize(w.records, net.params.hidden_dim());
    constexpr int chunk = 512;
    std::vector<int> rows;
    for (int lo = 0; lo < w.records; lo += chunk) {
        const int hi = std::min(w.records, lo + chunk);
        rows.resize(static_cast<std::size_t>(hi - lo));
        for (int r = lo; r < hi; ++r) rows[r - lo] = r;
        Batch b = gather_batch(w, rows, net.scaler);
        ForwardCache c = forward_batch(net.params, b.x);
        for (int r = lo; r < hi; ++r) {
            out.upsilon_hat(r) = expit(c.y_logit(r - lo));
            out.alpha_hat(r) = expit(c.a_logit(r - lo));
        }
        if (keep_representation) out.k.middleRows(lo, hi - lo) = c.k;
    }
    return out;
}

inline constexpr double kDeepClipLow = 0.05;
inline constexpr double kDeepClipHigh = 0.95;

inline double clip_outcome(double raw) { return clamp_probability(raw, kDeepClipLow, kDeepClipHigh); }

/// Outcome probabilities clipped to [0.05, 0.95] for targeting.
inline VectorXd predict_outcome(const TrainedNet& net, const WindowSet& w) {
    VectorXd p = predict_windows(net, w).upsilon_hat;
    for (Eigen::Index i = 0; i < p.size(); ++i) p(i) = clip_outcome(p(i));
    return p;
}

// ---------------------------------------------------------------------------
// Checkpoint: text, magic header `NETTMLE-MLP v1`, then shapes and row-major values.

inline constexpr const char* kCheckpointMagic = "NETTMLE-MLP v1";

inline void save_checkpoint(std::ostream& os, const TrainedNet& net) {
    const MlpParams& p = net.params;
    char buf[40];
    auto put = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        os << buf;
    };
    os << kCheckpointMagic << '\n';
    os << "input_dim " << p.input_dim() << " hidden_dim " << p.hidden_dim() << " reception_field " << p.reception_field() << '\n';
    os << "scaler " << net.scaler.mean.size() << '\n';
    for (Eigen::Index f = 0; f < net.scaler.mean.size(); ++f) {
        put(net.scaler.mean(f));
        os << ' ';
        put(net.scaler.scale(f));
        os << '\n';
    }
    p.for_each_block([&](const std::string& name, const MatrixXd& m) {
        os << "block " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            for (Eigen::Index c = 0; c < m.cols(); ++c) {
                if (c) os << ' ';
                put(m(r, c));
            }
            os << '\n';
        }
    });
}

inline TrainedNet load_checkpoint(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != kCheckpointMagic) throw std::invalid_argument("checkpoint: missing `NETTMLE-MLP v1` header");
    std::string k1, k2, k3;
    int in = 0, hid = 0, rf = 0;
    if (!(is >> k1 >> in >> k2 >> hid >> k3 >> rf) || k1 != "input_dim" || k2 != "hidden_dim" || k3 != "reception_field")
        throw std::invalid_argument("checkpoint: malformed shape line");
    TrainedNet net;
    net.params = MlpParams::shaped(in, hid, rf);
    std::string tag;
    int nf = 0;
    if (!(is >> tag >> nf) || tag != "scaler" || nf != in) throw std::invalid_argument("checkpoint: malformed scaler section");
    net.scaler.mean.resize(nf);
    net.scaler.scale.resize(nf);
    for (int f = 0; f < nf; ++f)
        if (!(is >> net.scaler.mean(f) >> net.scaler.scale(f))) throw std::invalid_argument("checkpoint: truncated scaler");
    net.params.for_each_block([&](const std::string& name, MatrixXd& m) {
        std::string t, nm;
        Eigen::Index r = 0, c = 0;
        if (!(is >> t >> nm >> r >> c) || t != "block" || nm != name || r != m.rows() || c != m.cols())
            throw std::invalid_argument("checkpoint: unexpected block, wanted " + name);
        for (Eigen::Index i = 0; i < r; ++i)
            for (Eigen::Index j = 0; j < c; ++j)
                if (!(is >> m(i, j))) throw std::invalid_argument("checkpoint: truncated block " + name);
    });
    if (!net.params.all_finite()) throw std::invalid_argument("checkpoint: non-finite parameters");
    return net;
}

}  // namespace nettmle
