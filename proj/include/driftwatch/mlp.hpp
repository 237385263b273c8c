#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "driftwatch/error.hpp"
#include "driftwatch/rng.hpp"
#include "driftwatch/textio.hpp"

namespace driftwatch {

inline constexpr int kHiddenLayers = 5;
inline constexpr int kHiddenWidth = 300;

struct Standardization {
    double mean = 0.0;
    double stddev = 1.0;
};

// The set-point regressor: one input neuron, five hidden ReLU layers of 300,
// linear output with one neuron per grid sensor. Inputs and per-sensor
// outputs are standardized with training-set statistics; weights are stored
// fan_in x fan_out.
struct MlpModel {
    std::vector<int> layer_dims;
    std::vector<Eigen::MatrixXd> weights;
    std::vector<Eigen::VectorXd> biases;
    Standardization input_stats;
    std::vector<double> output_mean;
    std::vector<double> output_std;
    std::vector<std::string> sensor_ids;
    std::uint64_t seed = 0;
    int trained_epochs = 0;

    std::size_t n_outputs() const {
        return layer_dims.empty() ? 0 : static_cast<std::size_t>(layer_dims.back());
    }

    void validate() const {
        if (layer_dims.size() < 2) throw Error(ErrorKind::corrupt, "model has no layers");
        if (weights.size() != layer_dims.size() - 1 || biases.size() != weights.size())
            throw Error(ErrorKind::corrupt, "model layer count inconsistent");
        for (std::size_t l = 0; l < weights.size(); ++l) {
            if (weights[l].rows() != layer_dims[l] || weights[l].cols() != layer_dims[l + 1])
                throw Error(ErrorKind::corrupt,
                            "weight matrix " + std::to_string(l) + " shape does not match layer_dims");
            if (biases[l].size() != layer_dims[l + 1])
                throw Error(ErrorKind::corrupt,
                            "bias vector " + std::to_string(l) + " shape does not match layer_dims");
        }
        if (output_mean.size() != n_outputs() || output_std.size() != n_outputs())
            throw Error(ErrorKind::corrupt, "output statistics arity does not match output layer");
        for (double s : output_std)
            if (!(s > 0.0)) throw Error(ErrorKind::corrupt, "output std must be positive");
        if (!(input_stats.stddev > 0.0))
            throw Error(ErrorKind::corrupt, "input std must be positive");
    }
};

// He-uniform initialization from a seeded deterministic stream; identical
// (n_outputs, seed) pairs produce bit-identical models.
inline MlpModel init_model(int n_outputs, std::uint64_t seed) {
    if (n_outputs < 1) throw Error(ErrorKind::config, "init_model: n_outputs must be >= 1");
    MlpModel m;
    m.seed = seed;
    m.layer_dims = {1};
    for (int i = 0; i < kHiddenLayers; ++i) m.layer_dims.push_back(kHiddenWidth);
    m.layer_dims.push_back(n_outputs);
    Rng rng = Rng::substream(seed, 0x1417);
    for (std::size_t l = 0; l + 1 < m.layer_dims.size(); ++l) {
        const int fan_in = m.layer_dims[l];
        const int fan_out = m.layer_dims[l + 1];
        double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        Eigen::MatrixXd w(fan_in, fan_out);
        for (int r = 0; r < fan_in; ++r)
            for (int c = 0; c < fan_out; ++c) w(r, c) = rng.uniform(-bound, bound);
        m.weights.push_back(std::move(w));
        m.biases.push_back(Eigen::VectorXd::Zero(fan_out));
    }
    m.output_mean.assign(static_cast<std::size_t>(n_outputs), 0.0);
    m.output_std.assign(static_cast<std::size_t>(n_outputs), 1.0);
    return m;
}

namespace detail {

// Standardized-space forward pass for a batch of inputs (one column in).
inline Eigen::MatrixXd forward_std(const MlpModel& m, const Eigen::MatrixXd& x_std) {
    Eigen::MatrixXd a = x_std;
    for (std::size_t l = 0; l < m.weights.size(); ++l) {
        Eigen::MatrixXd z = a * m.weights[l];
        z.rowwise() += m.biases[l].transpose();
        if (l + 1 < m.weights.size()) z = z.cwiseMax(0.0);
        a = std::move(z);
    }
    return a;
}

// Activations of the last hidden layer (the frozen representation used for
// last-layer retraining).
inline Eigen::MatrixXd hidden_representation(const MlpModel& m, const Eigen::VectorXd& inputs) {
    Eigen::MatrixXd a(inputs.size(), 1);
    for (Eigen::Index i = 0; i < inputs.size(); ++i)
        a(i, 0) = (inputs(i) - m.input_stats.mean) / m.input_stats.stddev;
    for (std::size_t l = 0; l + 1 < m.weights.size(); ++l) {
        Eigen::MatrixXd z = a * m.weights[l];
        z.rowwise() += m.biases[l].transpose();
        a = z.cwiseMax(0.0);
    }
    return a;
}

}  // namespace detail

inline Eigen::VectorXd forward(const MlpModel& m, double setpoint) {
    if (!std::isfinite(setpoint)) throw Error(ErrorKind::input, "forward: non-finite input");
    Eigen::MatrixXd x(1, 1);
    x(0, 0) = (setpoint - m.input_stats.mean) / m.input_stats.stddev;
    Eigen::MatrixXd y = detail::forward_std(m, x);
    Eigen::VectorXd out(y.cols());
    for (Eigen::Index j = 0; j < y.cols(); ++j)
        out(j) = y(0, j) * m.output_std[static_cast<std::size_t>(j)] +
                 m.output_mean[static_cast<std::size_t>(j)];
    return out;
}

// De-standardized predictions for many set-points at once.
inline Eigen::MatrixXd forward_batch(const MlpModel& m, const Eigen::VectorXd& setpoints) {
    Eigen::MatrixXd x(setpoints.size(), 1);
    for (Eigen::Index i = 0; i < setpoints.size(); ++i) {
        if (!std::isfinite(setpoints(i))) throw Error(ErrorKind::input, "forward: non-finite input");
        x(i, 0) = (setpoints(i) - m.input_stats.mean) / m.input_stats.stddev;
    }
    Eigen::MatrixXd y = detail::forward_std(m, x);
    for (Eigen::Index j = 0; j < y.cols(); ++j) {
        y.col(j) = y.col(j) * m.output_std[static_cast<std::size_t>(j)];
        y.col(j).array() += m.output_mean[static_cast<std::size_t>(j)];
    }
    return y;
}

// Supervised data in original units. mask(i,j) = 0 drops sample i, sensor j
// from the loss (preprocessing may have masked that slot).
struct TrainingSet {
    Eigen::VectorXd inputs;
    Eigen::MatrixXd targets;
    Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> mask;

    std::size_t size() const { return static_cast<std::size_t>(inputs.size()); }

    void validate(std::size_t n_outputs) const {
        if (inputs.size() == 0) throw Error(ErrorKind::input, "empty training set");
        if (targets.rows() != inputs.size() || mask.rows() != inputs.size() ||
            targets.cols() != mask.cols() ||
            targets.cols() != static_cast<Eigen::Index>(n_outputs))
            throw Error(ErrorKind::input, "training set shapes are inconsistent");
    }
};

struct Gradients {
    std::vector<Eigen::MatrixXd> weights;
    std::vector<Eigen::VectorXd> biases;
};

// MSE (standardized units, averaged over unmasked sample/sensor pairs) and
// exact gradients for the standardized computation graph.
inline std::pair<double, Gradients> loss_and_gradients(const MlpModel& m, const TrainingSet& batch) {
    batch.validate(m.n_outputs());
    const Eigen::Index n = batch.inputs.size();
    const Eigen::Index outs = batch.targets.cols();

    Eigen::MatrixXd x(n, 1);
    for (Eigen::Index i = 0; i < n; ++i)
        x(i, 0) = (batch.inputs(i) - m.input_stats.mean) / m.input_stats.stddev;

    const std::size_t layers = m.weights.size();
    std::vector<Eigen::MatrixXd> acts(layers + 1);
    acts[0] = std::move(x);
    for (std::size_t l = 0; l < layers; ++l) {
        Eigen::MatrixXd z = acts[l] * m.weights[l];
        z.rowwise() += m.biases[l].transpose();
        if (l + 1 < layers) z = z.cwiseMax(0.0);
        acts[l + 1] = std::move(z);
    }

    Eigen::MatrixXd mask_d = batch.mask.cast<double>();
    double count = mask_d.sum();
    if (count <= 0.0) throw Error(ErrorKind::input, "batch has no unmasked targets");

    Eigen::MatrixXd y_std(n, outs);
    for (Eigen::Index j = 0; j < outs; ++j)
        y_std.col(j) = (batch.targets.col(j).array() - m.output_mean[static_cast<std::size_t>(j)]) /
                       m.output_std[static_cast<std::size_t>(j)];
    Eigen::MatrixXd diff = (acts[layers] - y_std).cwiseProduct(mask_d);
    double mse = diff.squaredNorm() / count;

    Gradients g;
    g.weights.resize(layers);
    g.biases.resize(layers);
    Eigen::MatrixXd delta = (2.0 / count) * diff;
    for (std::size_t l = layers; l-- > 0;) {
        g.weights[l] = acts[l].transpose() * delta;
        g.biases[l] = delta.colwise().sum().transpose();
        if (l > 0) {
            delta = delta * m.weights[l].transpose();
            delta = delta.cwiseProduct((acts[l].array() > 0.0).cast<double>().matrix());
        }
    }
    return {mse, std::move(g)};
}

struct TrainConfig {
    double learning_rate = 1e-3;
    int batch_size = 256;
    int max_epochs = 200;
    int patience = 10;
    // Adam moments
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    void validate() const {
        if (!(learning_rate >= 0.0)) throw Error(ErrorKind::config, "learning_rate must be >= 0");
        if (batch_size < 1) throw Error(ErrorKind::config, "batch_size must be >= 1");
        if (max_epochs < 1) throw Error(ErrorKind::config, "max_epochs must be >= 1");
        if (patience < 1 || patience > max_epochs)
            throw Error(ErrorKind::config, "patience must be in [1, max_epochs]");
    }
};

struct EpochStats {
    double train_mse = 0.0;
    double val_mse = 0.0;
};

namespace detail {

struct AdamState {
    std::vector<Eigen::MatrixXd> mw, vw;
    std::vector<Eigen::VectorXd> mb, vb;
    long step = 0;

    static AdamState like(const std::vector<Eigen::MatrixXd>& w,
                          const std::vector<Eigen::VectorXd>& b) {
        AdamState s;
        for (const auto& m : w) {
            s.mw.push_back(Eigen::MatrixXd::Zero(m.rows(), m.cols()));
            s.vw.push_back(Eigen::MatrixXd::Zero(m.rows(), m.cols()));
        }
        for (const auto& v : b) {
            s.mb.push_back(Eigen::VectorXd::Zero(v.size()));
            s.vb.push_back(Eigen::VectorXd::Zero(v.size()));
        }
        return s;
    }

    template <typename Mat>
    static void update_one(Mat& param, const Mat& grad, Mat& m, Mat& v, const TrainConfig& cfg,
                           double bc1, double bc2) {
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
        Mat mhat = m / bc1;
        Mat vhat = v / bc2;
        param.array() -= cfg.learning_rate * mhat.array() / (vhat.array().sqrt() + cfg.epsilon);
    }

    void apply(std::vector<Eigen::MatrixXd>& w, std::vector<Eigen::VectorXd>& b,
               const Gradients& g, const TrainConfig& cfg) {
        ++step;
        double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
        double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
        for (std::size_t l = 0; l < w.size(); ++l) {
            update_one(w[l], g.weights[l], mw[l], vw[l], cfg, bc1, bc2);
            update_one(b[l], g.biases[l], mb[l], vb[l], cfg, bc1, bc2);
        }
    }
};

inline TrainingSet gather(const TrainingSet& full, const std::vector<std::size_t>& order,
                          std::size_t begin, std::size_t end) {
    TrainingSet b;
    const Eigen::Index cols = full.targets.cols();
    b.inputs.resize(static_cast<Eigen::Index>(end - begin));
    b.targets.resize(static_cast<Eigen::Index>(end - begin), cols);
    b.mask.resize(static_cast<Eigen::Index>(end - begin), cols);
    for (std::size_t i = begin; i < end; ++i) {
        auto src = static_cast<Eigen::Index>(order[i]);
        auto dst = static_cast<Eigen::Index>(i - begin);
        b.inputs(dst) = full.inputs(src);
        b.targets.row(dst) = full.targets.row(src);
        b.mask.row(dst) = full.mask.row(src);
    }
    return b;
}

inline double masked_mse(const MlpModel& m, const TrainingSet& set) {
    Eigen::MatrixXd x(set.inputs.size(), 1);
    for (Eigen::Index i = 0; i < set.inputs.size(); ++i)
        x(i, 0) = (set.inputs(i) - m.input_stats.mean) / m.input_stats.stddev;
    Eigen::MatrixXd pred = forward_std(m, x);
    Eigen::MatrixXd mask_d = set.mask.cast<double>();
    double count = mask_d.sum();
    if (count <= 0.0) throw Error(ErrorKind::input, "evaluation set has no unmasked targets");
    Eigen::MatrixXd y_std(set.targets.rows(), set.targets.cols());
    for (Eigen::Index j = 0; j < set.targets.cols(); ++j)
        y_std.col(j) = (set.targets.col(j).array() - m.output_mean[static_cast<std::size_t>(j)]) /
                       m.output_std[static_cast<std::size_t>(j)];
    return (pred - y_std).cwiseProduct(mask_d).squaredNorm() / count;
}

inline void fit_standardization(MlpModel& m, const TrainingSet& train) {
    double mean = train.inputs.mean();
    double var = (train.inputs.array() - mean).square().sum() /
                 std::max<double>(1.0, static_cast<double>(train.inputs.size()) - 1.0);
    m.input_stats = {mean, std::max(std::sqrt(var), 1e-12)};
    const Eigen::Index outs = train.targets.cols();
    m.output_mean.assign(static_cast<std::size_t>(outs), 0.0);
    m.output_std.assign(static_cast<std::size_t>(outs), 1.0);
    for (Eigen::Index j = 0; j < outs; ++j) {
        double sum = 0.0, count = 0.0;
        for (Eigen::Index i = 0; i < train.targets.rows(); ++i)
            if (train.mask(i, j)) {
                sum += train.targets(i, j);
                count += 1.0;
            }
        if (count < 2.0)
            throw Error(ErrorKind::fit, "sensor column " + std::to_string(j) +
                                            " has fewer than 2 unmasked training targets");
        double mu = sum / count;
        double ss = 0.0;
        for (Eigen::Index i = 0; i < train.targets.rows(); ++i)
            if (train.mask(i, j)) ss += (train.targets(i, j) - mu) * (train.targets(i, j) - mu);
        m.output_mean[static_cast<std::size_t>(j)] = mu;
        m.output_std[static_cast<std::size_t>(j)] = std::max(std::sqrt(ss / (count - 1.0)), 1e-12);
    }
}

}  // namespace detail

// Adam + MSE with chronological data, shuffled batches (order derived from
// the model seed), and best-validation early stopping. Standardization
// statistics are computed from the training set before the first epoch.
inline std::pair<MlpModel, std::vector<EpochStats>> train(const MlpModel& model,
                                                          const TrainingSet& train_set,
                                                          const TrainingSet& val_set,
                                                          const TrainConfig& cfg) {
    cfg.validate();
    MlpModel m = model;
    train_set.validate(m.n_outputs());
    val_set.validate(m.n_outputs());
    detail::fit_standardization(m, train_set);

    auto adam = detail::AdamState::like(m.weights, m.biases);
    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::vector<EpochStats> history;
    MlpModel best = m;
    double best_val = std::numeric_limits<double>::infinity();
    int bad_epochs = 0;

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        Rng shuffle_rng = Rng::substream(m.seed, 0xE70C000u + static_cast<std::uint64_t>(epoch));
        shuffle_rng.shuffle(order);
        double sq_sum = 0.0, n_sum = 0.0;
        for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(cfg.batch_size)) {
            std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
            TrainingSet batch = detail::gather(train_set, order, begin, end);
            if (batch.mask.cast<int>().sum() == 0) continue;
            auto [mse, grads] = loss_and_gradients(m, batch);
            if (!std::isfinite(mse))
                throw Error(ErrorKind::divergence,
                            "training loss diverged at epoch " + std::to_string(epoch));
            double cnt = batch.mask.cast<double>().sum();
            sq_sum += mse * cnt;
            n_sum += cnt;
            adam.apply(m.weights, m.biases, grads, cfg);
        }
        EpochStats es;
        es.train_mse = sq_sum / n_sum;
        es.val_mse = detail::masked_mse(m, val_set);
        if (!std::isfinite(es.val_mse))
            throw Error(ErrorKind::divergence,
                        "validation loss diverged at epoch " + std::to_string(epoch));
        history.push_back(es);
        if (es.val_mse < best_val) {
            best_val = es.val_mse;
            best = m;
            best.trained_epochs = epoch;
            bad_epochs = 0;
        } else if (++bad_epochs >= cfg.patience) {
            break;
        }
    }
    return {std::move(best), std::move(history)};
}

// Transfer learning per the freeze contract: every parameter outside the
// final weight matrix and bias stays bit-identical. A wider target grid
// appends freshly initialized output columns; their standardization comes
// from the new data, while existing sensors (and the input) keep the
// original statistics so the frozen representation is unchanged.
inline MlpModel retrain_last_layer(const MlpModel& model, const TrainingSet& new_train,
                                   const TrainingSet& new_val, const TrainConfig& cfg) {
    cfg.validate();
    model.validate();
    const auto n_old = static_cast<Eigen::Index>(model.n_outputs());
    const Eigen::Index n_new = new_train.targets.cols();
    if (n_new < n_old)
        throw Error(ErrorKind::config, "retrain cannot shrink the grid (" + std::to_string(n_new) +
                                           " < " + std::to_string(n_old) + " outputs)");
    MlpModel m = model;
    if (n_new > n_old) {
        const int hidden = m.layer_dims[m.layer_dims.size() - 2];
        Eigen::MatrixXd w(hidden, n_new);
        w.leftCols(n_old) = m.weights.back();
        Rng rng = Rng::substream(m.seed, 0xE47E4Du);
        double bound = std::sqrt(6.0 / static_cast<double>(hidden));
        for (Eigen::Index c = n_old; c < n_new; ++c)
            for (int r = 0; r < hidden; ++r) w(r, c) = rng.uniform(-bound, bound);
        Eigen::VectorXd b = Eigen::VectorXd::Zero(n_new);
        b.head(n_old) = m.biases.back();
        m.weights.back() = std::move(w);
        m.biases.back() = std::move(b);
        m.layer_dims.back() = static_cast<int>(n_new);
        for (Eigen::Index j = n_old; j < n_new; ++j) {
            double sum = 0.0, count = 0.0;
            for (Eigen::Index i = 0; i < new_train.targets.rows(); ++i)
                if (new_train.mask(i, j)) {
                    sum += new_train.targets(i, j);
                    count += 1.0;
                }
            if (count < 2.0)
                throw Error(ErrorKind::fit, "new sensor column " + std::to_string(j) +
                                                " has fewer than 2 unmasked targets");
            double mu = sum / count;
            double ss = 0.0;
            for (Eigen::Index i = 0; i < new_train.targets.rows(); ++i)
                if (new_train.mask(i, j)) ss += (new_train.targets(i, j) - mu) * (new_train.targets(i, j) - mu);
            m.output_mean.push_back(mu);
            m.output_std.push_back(std::max(std::sqrt(ss / (count - 1.0)), 1e-12));
        }
    }
    new_train.validate(m.n_outputs());
    new_val.validate(m.n_outputs());

    // The frozen layers do not change, so their activations are computed once.
    Eigen::MatrixXd h_train = detail::hidden_representation(m, new_train.inputs);
    Eigen::MatrixXd h_val = detail::hidden_representation(m, new_val.inputs);

    auto standardize_targets = [&](const TrainingSet& set) {
        Eigen::MatrixXd y(set.targets.rows(), set.targets.cols());
        for (Eigen::Index j = 0; j < set.targets.cols(); ++j)
            y.col(j) = (set.targets.col(j).array() - m.output_mean[static_cast<std::size_t>(j)]) /
                       m.output_std[static_cast<std::size_t>(j)];
        return y;
    };
    Eigen::MatrixXd y_train = standardize_targets(new_train);
    Eigen::MatrixXd y_val = standardize_targets(new_val);
    Eigen::MatrixXd mask_train = new_train.mask.cast<double>();
    Eigen::MatrixXd mask_val = new_val.mask.cast<double>();
    if (mask_train.sum() <= 0.0 || mask_val.sum() <= 0.0)
        throw Error(ErrorKind::input, "retrain sets have no unmasked targets");

    Eigen::MatrixXd w = m.weights.back();
    Eigen::VectorXd b = m.biases.back();
    std::vector<Eigen::MatrixXd> ws{w};
    std::vector<Eigen::VectorXd> bs{b};
    auto adam = detail::AdamState::like(ws, bs);

    auto eval_mse = [&](const Eigen::MatrixXd& h, const Eigen::MatrixXd& y,
                        const Eigen::MatrixXd& mask) {
        Eigen::MatrixXd pred = h * w;
        pred.rowwise() += b.transpose();
        return (pred - y).cwiseProduct(mask).squaredNorm() / mask.sum();
    };

    std::vector<std::size_t> order(new_train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Eigen::MatrixXd best_w = w;
    Eigen::VectorXd best_b = b;
    int best_epoch = 0;
    double best_val_mse = std::numeric_limits<double>::infinity();
    int bad_epochs = 0;

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        Rng shuffle_rng = Rng::substream(m.seed, 0xF17E000u + static_cast<std::uint64_t>(epoch));
        shuffle_rng.shuffle(order);
        for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(cfg.batch_size)) {
            std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
            const auto rows = static_cast<Eigen::Index>(end - begin);
            Eigen::MatrixXd hb(rows, h_train.cols());
            Eigen::MatrixXd yb(rows, y_train.cols());
            Eigen::MatrixXd mb(rows, y_train.cols());
            for (std::size_t i = begin; i < end; ++i) {
                auto src = static_cast<Eigen::Index>(order[i]);
                auto dst = static_cast<Eigen::Index>(i - begin);
                hb.row(dst) = h_train.row(src);
                yb.row(dst) = y_train.row(src);
                mb.row(dst) = mask_train.row(src);
            }
            double count = mb.sum();
            if (count <= 0.0) continue;
            Eigen::MatrixXd pred = hb * w;
            pred.rowwise() += b.transpose();
            Eigen::MatrixXd diff = (pred - yb).cwiseProduct(mb);
            double mse = diff.squaredNorm() / count;
            if (!std::isfinite(mse))
                throw Error(ErrorKind::divergence,
                            "retraining loss diverged at epoch " + std::to_string(epoch));
            Eigen::MatrixXd delta = (2.0 / count) * diff;
            Gradients g;
            g.weights.push_back(hb.transpose() * delta);
            g.biases.push_back(delta.colwise().sum().transpose());
            std::vector<Eigen::MatrixXd> wv{std::move(w)};
            std::vector<Eigen::VectorXd> bv{std::move(b)};
            adam.apply(wv, bv, g, cfg);
            w = std::move(wv[0]);
            b = std::move(bv[0]);
        }
        double val_mse = eval_mse(h_val, y_val, mask_val);
        if (!std::isfinite(val_mse))
            throw Error(ErrorKind::divergence,
                        "retraining validation loss diverged at epoch " + std::to_string(epoch));
        if (val_mse < best_val_mse) {
            best_val_mse = val_mse;
            best_w = w;
            best_b = b;
            best_epoch = epoch;
            bad_epochs = 0;
        } else if (++bad_epochs >= cfg.patience) {
            break;
        }
    }
    m.weights.back() = std::move(best_w);
    m.biases.back() = std::move(best_b);
    m.trained_epochs = best_epoch;
    return m;
}

// Versioned self-describing text envelope; exact decimal round trip, so
// load(save(m)) == m.
inline void save_model(const MlpModel& m, std::ostream& out) {
    m.validate();
    out << "driftwatch-model v1\n";
    out << "layer_dims " << m.layer_dims.size();
    for (int d : m.layer_dims) out << ' ' << d;
    out << '\n';
    out << "seed " << m.seed << '\n';
    out << "trained_epochs " << m.trained_epochs << '\n';
    out << "sensor_ids " << m.sensor_ids.size();
    for (const auto& id : m.sensor_ids) out << ' ' << id;
    out << '\n';
    out << "input_stats " << format_double(m.input_stats.mean) << ' '
        << format_double(m.input_stats.stddev) << '\n';
    out << "output_mean";
    for (double v : m.output_mean) out << ' ' << format_double(v);
    out << '\n';
    out << "output_std";
    for (double v : m.output_std) out << ' ' << format_double(v);
    out << '\n';
    for (std::size_t l = 0; l < m.weights.size(); ++l) {
        const auto& w = m.weights[l];
        out << "weights " << l << ' ' << w.rows() << ' ' << w.cols() << '\n';
        for (Eigen::Index r = 0; r < w.rows(); ++r) {
            for (Eigen::Index c = 0; c < w.cols(); ++c) {
                if (c) out << ' ';
                out << format_double(w(r, c));
            }
            out << '\n';
        }
        out << "biases " << l << ' ' << m.biases[l].size() << '\n';
        for (Eigen::Index i = 0; i < m.biases[l].size(); ++i) {
            if (i) out << ' ';
            out << format_double(m.biases[l](i));
        }
        out << '\n';
    }
    out << "end\n";
}

inline MlpModel load_model(std::istream& in) {
    TokenReader r(in, "model file");
    r.expect("driftwatch-model v1");
    MlpModel m;
    auto dims = r.tokens("layer_dims");
    if (dims.size() < 3 || dims[0] != "layer_dims")
        throw Error(ErrorKind::corrupt, "model file: expected layer_dims");
    auto ndims = static_cast<std::size_t>(parse_int_strict(dims[1], "layer_dims count"));
    if (dims.size() != ndims + 2)
        throw Error(ErrorKind::corrupt, "model file: layer_dims count mismatch");
    for (std::size_t i = 0; i < ndims; ++i) {
        auto v = parse_int_strict(dims[i + 2], "layer dimension");
        if (v < 1) throw Error(ErrorKind::corrupt, "model file: layer dimension must be >= 1");
        m.layer_dims.push_back(static_cast<int>(v));
    }
    m.seed = static_cast<std::uint64_t>(r.labeled_int("seed"));
    m.trained_epochs = static_cast<int>(r.labeled_int("trained_epochs"));
    auto ids = r.tokens("sensor_ids");
    if (ids.size() < 2 || ids[0] != "sensor_ids")
        throw Error(ErrorKind::corrupt, "model file: expected sensor_ids");
    auto nids = static_cast<std::size_t>(parse_int_strict(ids[1], "sensor id count"));
    if (ids.size() != nids + 2)
        throw Error(ErrorKind::corrupt, "model file: sensor_ids count mismatch");
    for (std::size_t i = 0; i < nids; ++i) m.sensor_ids.push_back(ids[i + 2]);
    auto is = r.labeled_doubles("input_stats", 2);
    m.input_stats = {is[0], is[1]};
    const auto n_out = static_cast<std::size_t>(m.layer_dims.back());
    m.output_mean = r.labeled_doubles("output_mean", n_out);
    m.output_std = r.labeled_doubles("output_std", n_out);
    for (std::size_t l = 0; l + 1 < m.layer_dims.size(); ++l) {
        auto wh = r.tokens("weights header");
        if (wh.size() != 4 || wh[0] != "weights" ||
            parse_int_strict(wh[1], "weights layer") != static_cast<std::int64_t>(l))
            throw Error(ErrorKind::corrupt, "model file: bad weights header for layer " + std::to_string(l));
        auto rows = parse_int_strict(wh[2], "weights rows");
        auto cols = parse_int_strict(wh[3], "weights cols");
        if (rows != m.layer_dims[l] || cols != m.layer_dims[l + 1])
            throw Error(ErrorKind::corrupt, "model file: weights " + std::to_string(l) +
                                                " shape does not match layer_dims");
        Eigen::MatrixXd w(rows, cols);
        for (Eigen::Index rr = 0; rr < rows; ++rr) {
            auto toks = r.tokens("weight row");
            if (toks.size() != static_cast<std::size_t>(cols))
                throw Error(ErrorKind::corrupt, "model file: weight row " + std::to_string(rr) +
                                                    " of layer " + std::to_string(l) + " has wrong arity");
            for (Eigen::Index cc = 0; cc < cols; ++cc)
                w(rr, cc) = parse_double_strict(toks[static_cast<std::size_t>(cc)], "weight");
        }
        m.weights.push_back(std::move(w));
        auto bh = r.tokens("biases header");
        if (bh.size() != 3 || bh[0] != "biases" ||
            parse_int_strict(bh[1], "biases layer") != static_cast<std::int64_t>(l) ||
            parse_int_strict(bh[2], "biases size") != cols)
            throw Error(ErrorKind::corrupt, "model file: bad biases header for layer " + std::to_string(l));
        auto toks = r.tokens("bias row");
        if (toks.size() != static_cast<std::size_t>(cols))
            throw Error(ErrorKind::corrupt, "model file: bias vector of layer " + std::to_string(l) +
                                                " has wrong arity");
        Eigen::VectorXd b(cols);
        for (Eigen::Index i = 0; i < cols; ++i)
            b(i) = parse_double_strict(toks[static_cast<std::size_t>(i)], "bias");
        m.biases.push_back(std::move(b));
    }
    r.expect("end");
    m.validate();
    return m;
}

namespace detail {

template <typename Mat>
bool exact_equal(const Mat& a, const Mat& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    return std::equal(a.data(), a.data() + a.size(), b.data());
}

}  // namespace detail

inline bool models_equal(const MlpModel& a, const MlpModel& b) {
    if (a.layer_dims != b.layer_dims || a.seed != b.seed || a.trained_epochs != b.trained_epochs ||
        a.sensor_ids != b.sensor_ids || a.output_mean != b.output_mean ||
        a.output_std != b.output_std || a.input_stats.mean != b.input_stats.mean ||
        a.input_stats.stddev != b.input_stats.stddev)
        return false;
    if (a.weights.size() != b.weights.size()) return false;
    for (std::size_t l = 0; l < a.weights.size(); ++l)
        if (!detail::exact_equal(a.weights[l], b.weights[l]) ||
            !detail::exact_equal(a.biases[l], b.biases[l]))
            return false;
    return true;
}

}  // namespace driftwatch
