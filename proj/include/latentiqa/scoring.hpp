#pragma once

// Scoring pipeline: noise a clean latent at K timesteps, run the denoiser
// under each active prompt, pool the tapped attention maps and average.
// One tape-based path serves plain scoring, instrumented traces and
// gradients.

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "autodiff.hpp"
#include "bundle.hpp"
#include "error.hpp"
#include "image.hpp"
#include "params.hpp"
#include "rng.hpp"
#include "schedule.hpp"

namespace liqa {

/// One noise draw: the starting timestep and the noise injected there.
struct TimestepDraw {
    int t = 1;
    Latent eps;
};

/// Everything random about one score evaluation, drawn up front so the
/// same plan can be replayed (finite differences, pooling ablations).
struct ScorePlan {
    std::vector<TimestepDraw> draws;
    int steps = 1;   // denoising chain length; maps come from the last pass
    int delta = 20;  // timestep decrement between chain steps
};

struct TimestepTrace {
    int t_start = 0;
    int t_tap = 0;
    double g_pos = 0.0;
    std::optional<double> g_neg;
    double score = 0.0;
    Eigen::VectorXd profile;  // positive prompt, block- and token-averaged, length M
};

struct ScoreTrace {
    std::vector<TimestepTrace> timesteps;
    double score = 0.0;
};

/// Start timesteps admissible for a chain of `steps` reverse steps spaced
/// by `delta`: the last tap must stay at t >= 1.
inline TimestepRange multi_step_start_range(const TimestepRange& range, int steps, int delta) {
    require(steps >= 1 && delta >= 1, ErrorKind::InvalidConfig, "denoise steps and delta must be >= 1");
    const long long need = static_cast<long long>(steps - 1) * delta;
    TimestepRange r = range;
    if (need > r.lo) r.lo = static_cast<int>(need);
    require(r.lo < r.hi, ErrorKind::Underflow,
            std::to_string(steps) + " steps of " + std::to_string(delta) + " underflow every start in " +
                format_timestep_range(range));
    return r;
}

inline Latent draw_noise(const LatentShape& s, Rng& rng) { return Latent::standard_normal(s.channels, s.height, s.width, rng); }

inline ScorePlan plan_from_timesteps(const ModelBundle& bundle, const std::vector<int>& timesteps, int steps, int delta,
                                     Rng& rng) {
    require(!timesteps.empty(), ErrorKind::InvalidConfig, "no inference timesteps");
    ScorePlan plan;
    plan.steps = steps;
    plan.delta = delta;
    const LatentShape shape = bundle.codec->latent_shape();
    for (int t : timesteps) {
        bundle.schedule.check_timestep(t);
        plan.draws.push_back(TimestepDraw{t, draw_noise(shape, rng)});
    }
    return plan;
}

/// Evaluation plan: K timesteps from the eval policy, one fresh noise draw
/// per timestep.
inline ScorePlan plan_inference(const ModelBundle& bundle, Rng& rng, int steps, int delta) {
    TimestepPolicy policy = bundle.eval_policy();
    if (policy.mode == TimestepMode::UniformRange) policy.range = multi_step_start_range(policy.range, steps, delta);
    policy.validate(bundle.schedule.total_timesteps());
    const std::vector<int> ts = inference_timesteps(policy, bundle.eval_spacing(), rng);
    return plan_from_timesteps(bundle, ts, steps, delta, rng);
}

inline ScorePlan plan_inference(const ModelBundle& bundle, Rng& rng) {
    return plan_inference(bundle, rng, bundle.config.denoise_steps, bundle.config.denoise_delta);
}

/// Training plan: a single timestep drawn uniformly from the train range.
inline ScorePlan plan_training(const ModelBundle& bundle, Rng& rng) {
    const TimestepPolicy policy = bundle.train_policy();
    policy.validate(bundle.schedule.total_timesteps());
    const int t = sample_timestep(policy, rng);
    return plan_from_timesteps(bundle, {t}, 1, 1, rng);
}

namespace scoring_detail {

inline ad::Var pooled_quality(const BackboneOutput& out, const CrossAttentionReadout& readout,
                              Eigen::VectorXd* profile) {
    std::vector<ad::Var> parts;
    for (int i : readout.tapped) {
        const ad::Var map = out.maps[static_cast<std::size_t>(i)];
        parts.push_back(readout_tape::pool(map, readout.lambda, readout.pooling));
        if (profile) {
            const Eigen::VectorXd col_mean = map.value().colwise().mean().transpose();
            if (profile->size() == 0)
                *profile = col_mean;
            else
                *profile += col_mean;
        }
    }
    if (profile) *profile /= static_cast<double>(readout.tapped.size());
    return ad::mean_scalars(parts);
}

} // namespace scoring_detail

/// Records the score of clean latent `z0` under `plan` on the binder's tape.
/// The reverse chain of multi-step plans runs outside the tape (it is an
/// evaluation-only path); the final pass and the pooling are recorded.
inline ad::Var score_on_tape(Binder& binder, const ModelBundle& bundle, const Latent& z0, const ScorePlan& plan,
                             ScoreTrace* trace = nullptr) {
    require(!plan.draws.empty(), ErrorKind::InvalidConfig, "empty score plan");
    const std::vector<PromptSide> sides = bundle.prompts.active_sides();
    std::vector<ad::Var> text;
    for (PromptSide side : sides) text.push_back(encode_prompt(binder, bundle.prompts, side, bundle.encoder));

    std::vector<ad::Var> per_timestep;
    for (const TimestepDraw& draw : plan.draws) {
        const std::vector<int> chain = multi_step_timesteps(draw.t, plan.steps, plan.delta);
        const Latent z_start = forward_noise(z0, draw.t, draw.eps, bundle.schedule);
        TimestepTrace tt;
        tt.t_start = draw.t;
        tt.t_tap = chain.back();
        std::vector<ad::Var> side_scores;
        for (std::size_t s = 0; s < sides.size(); ++s) {
            Latent z = z_start;
            for (std::size_t k = 0; k + 1 < chain.size(); ++k)
                z = denoise_step(z, chain[k], chain[k + 1], *bundle.backbone, text[s].value(), bundle.readout,
                                 bundle.schedule);
            const BackboneOutput out = bundle.backbone->forward(binder, z, chain.back(), text[s], bundle.readout, false);
            Eigen::VectorXd* profile = (trace && sides[s] == PromptSide::Positive) ? &tt.profile : nullptr;
            const ad::Var g = scoring_detail::pooled_quality(out, bundle.readout, profile);
            side_scores.push_back(g);
            if (sides[s] == PromptSide::Positive)
                tt.g_pos = g.scalar();
            else
                tt.g_neg = g.scalar();
        }
        const ad::Var step_score = ad::mean_scalars(side_scores);
        tt.score = step_score.scalar();
        per_timestep.push_back(step_score);
        if (trace) trace->timesteps.push_back(std::move(tt));
    }
    const ad::Var score = ad::mean_scalars(per_timestep);
    if (trace) trace->score = score.scalar();
    return score;
}

inline double score_latent(const ModelBundle& bundle, const Latent& z0, const ScorePlan& plan,
                           ScoreTrace* trace = nullptr) {
    ad::Tape tape;
    Binder binder(tape);
    return score_on_tape(binder, bundle, z0, plan, trace).scalar();
}

inline Latent encode_for_scoring(const ModelBundle& bundle, const Image& image) {
    return bundle.codec->encode(preprocess(image, bundle.codec->image_resolution()));
}

/// Mean over K inference timesteps of the prompt-averaged pooled quality.
inline double score_image(const Image& image, const ModelBundle& bundle, Rng& rng) {
    const Latent z0 = encode_for_scoring(bundle, image);
    return score_latent(bundle, z0, plan_inference(bundle, rng));
}

inline ScoreTrace trace_image(const Image& image, const ModelBundle& bundle, Rng& rng) {
    const Latent z0 = encode_for_scoring(bundle, image);
    ScoreTrace trace;
    score_latent(bundle, z0, plan_inference(bundle, rng), &trace);
    return trace;
}

/// score_image with the maps collected after a `steps`-long reverse chain.
inline double multi_step_score(const Image& image, const ModelBundle& bundle, int steps, int delta, Rng& rng) {
    const Latent z0 = encode_for_scoring(bundle, image);
    return score_latent(bundle, z0, plan_inference(bundle, rng, steps, delta));
}

struct ScoreGradient {
    double score = 0.0;
    std::map<std::string, Eigen::MatrixXd> grads;  // keyed by parameter name
};

/// d(score)/d(parameter) for every parameter whose name is in `names`.
inline ScoreGradient score_gradient(const ModelBundle& bundle, const Latent& z0, const ScorePlan& plan,
                                    const std::vector<std::string>& names) {
    std::set<const Eigen::MatrixXd*> ptrs;
    std::map<std::string, const Eigen::MatrixXd*> by_name;
    for (const NamedConstParameter& p : bundle.parameters()) by_name[p.name] = p.value;
    for (const std::string& n : names) {
        auto it = by_name.find(n);
        require(it != by_name.end(), ErrorKind::MissingKey, "no parameter named " + n);
        ptrs.insert(it->second);
    }
    ad::Tape tape;
    Binder binder(tape, ptrs);
    const ad::Var s = score_on_tape(binder, bundle, z0, plan);
    tape.backward(s);
    ScoreGradient out;
    out.score = s.scalar();
    for (const std::string& n : names) out.grads[n] = binder.gradient(*by_name[n]);
    return out;
}

} // namespace liqa
