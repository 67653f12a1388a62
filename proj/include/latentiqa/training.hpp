#pragma once

// Adapter and prompt-context optimisation against normalised MOS: one random
// timestep and one noise draw per sample, gradients accumulated over a batch,
// one Adam update per batch, frozen parameters never written.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "autodiff.hpp"
#include "bundle.hpp"
#include "error.hpp"
#include "params.hpp"
#include "rng.hpp"
#include "scoring.hpp"

namespace liqa {

inline double mse_loss(double predicted, double mos) {
    const double d = predicted - mos;
    return d * d;
}

inline double batch_mse(std::span<const double> predicted, std::span<const double> mos) {
    require(predicted.size() == mos.size() && !predicted.empty(), ErrorKind::ShapeMismatch,
            "batch loss needs equal, non-empty inputs");
    double total = 0.0;
    for (std::size_t i = 0; i < predicted.size(); ++i) total += mse_loss(predicted[i], mos[i]);
    return total / static_cast<double>(predicted.size());
}

/// Places a raw score on the unit scale of the normalised targets: 0 at
/// w.lo, 1 at w.hi.
inline double calibrated_score(double score, const ScoreWindow& w) { return (score - w.lo) / (w.hi - w.lo); }

inline ad::Var calibrated_loss(ad::Var score, const ScoreWindow& w, double target) {
    const double inv = 1.0 / (w.hi - w.lo);
    return ad::square(ad::affine(score, inv, -w.lo * inv - target));
}

struct TrainSample {
    std::string id;
    Latent z0;
    double target = 0.0;  // normalised MOS
};

struct EpochLoss {
    int epoch = 0;
    double mean_loss = 0.0;
};

struct TrainResult {
    std::vector<EpochLoss> history;
    int updates = 0;
    std::vector<std::string> trainable;
};

/// Adam with optional decoupled weight decay.
class Adam {
public:
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.0;

    void step(const std::vector<Eigen::MatrixXd*>& params, const std::vector<Eigen::MatrixXd>& grads, double lr) {
        require(params.size() == grads.size(), ErrorKind::ShapeMismatch, "optimiser parameter/gradient count differs");
        if (m_.empty()) {
            for (const Eigen::MatrixXd* p : params) {
                m_.push_back(Eigen::MatrixXd::Zero(p->rows(), p->cols()));
                v_.push_back(Eigen::MatrixXd::Zero(p->rows(), p->cols()));
            }
        }
        ++t_;
        const double c1 = 1.0 - std::pow(beta1, t_);
        const double c2 = 1.0 - std::pow(beta2, t_);
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i] = beta1 * m_[i] + (1.0 - beta1) * grads[i];
            v_[i] = beta2 * v_[i] + (1.0 - beta2) * grads[i].cwiseProduct(grads[i]);
            const Eigen::ArrayXXd mhat = m_[i].array() / c1;
            const Eigen::ArrayXXd vhat = v_[i].array() / c2;
            Eigen::MatrixXd update = (mhat / (vhat.sqrt() + epsilon)).matrix();
            if (weight_decay != 0.0) update += weight_decay * *params[i];
            *params[i] -= lr * update;
        }
    }

    int steps() const { return t_; }

private:
    std::vector<Eigen::MatrixXd> m_;
    std::vector<Eigen::MatrixXd> v_;
    int t_ = 0;
};

inline double scheduled_lr(const RunConfig& cfg, int update, int total_updates) {
    if (cfg.lr_schedule == "cosine" && total_updates > 1)
        return 0.5 * cfg.learning_rate *
               (1.0 + std::cos(std::numbers::pi * static_cast<double>(update) / static_cast<double>(total_updates - 1)));
    return cfg.learning_rate;
}

struct TrainOptions {
    int max_updates = -1;  // stop after this many optimiser steps (< 0: run all epochs)
    std::function<void(const EpochLoss&)> on_epoch;
};

struct SampleGradient {
    double loss = 0.0;
    double score = 0.0;
    std::vector<Eigen::MatrixXd> grads;  // aligned with the trainable pointer list
};

/// Loss and its gradient for one sample under a fixed plan.
inline SampleGradient sample_gradient(const ModelBundle& bundle, const TrainSample& sample, const ScorePlan& plan,
                                      const std::vector<Eigen::MatrixXd*>& trainable) {
    ad::Tape tape;
    Binder binder(tape, std::set<const Eigen::MatrixXd*>(trainable.begin(), trainable.end()));
    const ad::Var score = score_on_tape(binder, bundle, sample.z0, plan);
    const ad::Var loss = calibrated_loss(score, bundle.target_window(), sample.target);
    SampleGradient out;
    out.loss = loss.scalar();
    out.score = score.scalar();
    tape.backward(loss);
    for (Eigen::MatrixXd* p : trainable) out.grads.push_back(binder.gradient(*p));
    return out;
}

/// Gradient of the mean batch loss recorded on a single tape; the reference
/// for per-sample accumulation.
inline std::vector<Eigen::MatrixXd> batch_gradient(const ModelBundle& bundle, std::span<const TrainSample> samples,
                                                   std::span<const ScorePlan> plans,
                                                   const std::vector<Eigen::MatrixXd*>& trainable) {
    require(samples.size() == plans.size() && !samples.empty(), ErrorKind::ShapeMismatch, "one plan per sample");
    ad::Tape tape;
    Binder binder(tape, std::set<const Eigen::MatrixXd*>(trainable.begin(), trainable.end()));
    std::vector<ad::Var> losses;
    const ScoreWindow w = bundle.target_window();
    for (std::size_t i = 0; i < samples.size(); ++i)
        losses.push_back(calibrated_loss(score_on_tape(binder, bundle, samples[i].z0, plans[i]), w, samples[i].target));
    tape.backward(ad::mean_scalars(losses));
    std::vector<Eigen::MatrixXd> out;
    for (Eigen::MatrixXd* p : trainable) out.push_back(binder.gradient(*p));
    return out;
}

inline std::vector<Eigen::MatrixXd*> trainable_parameters(ModelBundle& bundle, const ParameterPartition& part) {
    std::vector<Eigen::MatrixXd*> out;
    for (NamedParameter& p : bundle.parameters())
        if (part.is_trainable(p.name)) out.push_back(p.value);
    return out;
}

inline void fit_mos_normalization(ModelBundle& bundle, std::span<const double> train_mos) {
    require(!train_mos.empty(), ErrorKind::EmptyManifest, "no training MOS values");
    const auto [lo, hi] = std::minmax_element(train_mos.begin(), train_mos.end());
    require(*hi > *lo, ErrorKind::Degenerate, "training MOS values are all equal");
    bundle.mos = MosNormalization{*lo, *hi};
}

/// Trains `bundle` in place. Samples carry normalised targets.
inline TrainResult train(ModelBundle& bundle, const std::vector<TrainSample>& samples, const TrainOptions& options = {}) {
    const RunConfig& cfg = bundle.config;
    require(!samples.empty(), ErrorKind::EmptyManifest, "training set is empty");
    require(cfg.epochs >= 1 && cfg.batch_size >= 1, ErrorKind::InvalidConfig, "epochs and batch_size must be >= 1");

    const ParameterPartition part = partition_parameters(bundle);
    const std::vector<Eigen::MatrixXd*> params = trainable_parameters(bundle, part);
    std::map<std::string, Eigen::MatrixXd> frozen_before;
    const auto snapshot_frozen = [&] {
        frozen_before.clear();
        for (const NamedConstParameter& p : std::as_const(bundle).parameters())
            if (!part.is_trainable(p.name)) frozen_before[p.name] = *p.value;
    };
    const auto verify_frozen = [&] {
        for (const NamedConstParameter& p : std::as_const(bundle).parameters()) {
            auto it = frozen_before.find(p.name);
            if (it == frozen_before.end()) continue;
            const Eigen::MatrixXd& before = it->second;
            require(before.rows() == p.value->rows() && before.cols() == p.value->cols() &&
                        std::equal(before.data(), before.data() + before.size(), p.value->data()),
                    ErrorKind::Validation, "frozen parameter " + p.name + " changed during an update");
        }
    };

    Adam adam;
    adam.weight_decay = cfg.weight_decay;
    Rng rng = derive_rng(cfg.seed, {6});
    const int batches_per_epoch = (static_cast<int>(samples.size()) + cfg.batch_size - 1) / cfg.batch_size;
    const int total_updates = batches_per_epoch * cfg.epochs;

    TrainResult result;
    result.trainable = part.trainable;
    std::vector<std::size_t> order(samples.size());
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        std::size_t seen = 0;
        bool stop = false;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<Eigen::MatrixXd> acc;
            for (Eigen::MatrixXd* p : params) acc.push_back(Eigen::MatrixXd::Zero(p->rows(), p->cols()));
            for (std::size_t k = start; k < end; ++k) {
                const TrainSample& s = samples[order[k]];
                const ScorePlan plan = plan_training(bundle, rng);
                const SampleGradient sg = sample_gradient(bundle, s, plan, params);
                require(std::isfinite(sg.loss), ErrorKind::NanLoss,
                        "non-finite loss on sample '" + s.id + "' at epoch " + std::to_string(epoch) + " (t=" +
                            std::to_string(plan.draws.front().t) + ")");
                epoch_loss += sg.loss;
                ++seen;
                for (std::size_t i = 0; i < params.size(); ++i) acc[i] += sg.grads[i];
            }
            if (params.empty()) continue;
            const double n = static_cast<double>(end - start);
            for (Eigen::MatrixXd& g : acc) g /= n;
            if (cfg.check_frozen) snapshot_frozen();
            adam.step(params, acc, scheduled_lr(cfg, result.updates, total_updates));
            ++result.updates;
            if (cfg.check_frozen) verify_frozen();
            if (options.max_updates >= 0 && result.updates >= options.max_updates) {
                stop = true;
                break;
            }
        }
        EpochLoss el{epoch, epoch_loss / static_cast<double>(seen)};
        result.history.push_back(el);
        if (options.on_epoch) options.on_epoch(el);
        if (stop) break;
    }
    return result;
}

} // namespace liqa
