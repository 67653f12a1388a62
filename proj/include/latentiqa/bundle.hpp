#pragma once

// Everything needed to score an image: codec, denoiser, readout, prompts,
// text encoder, noise schedule, timestep policies and MOS normalisation.

#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "backbone.hpp"
#include "config.hpp"
#include "error.hpp"
#include "prompt.hpp"
#include "readout.hpp"
#include "schedule.hpp"

namespace liqa {

/// Min-max map of raw MOS onto [0, 1], fitted on the training split.
struct MosNormalization {
    double lo = 0.0;
    double hi = 100.0;

    double normalize(double mos) const { return (mos - lo) / (hi - lo); }
};

struct ModelBundle {
    RunConfig config;
    NoiseSchedule schedule;
    std::shared_ptr<LatentCodec> codec;
    std::shared_ptr<DenoiserBackbone> backbone;
    CrossAttentionReadout readout;
    TextEncoder encoder;
    PromptPair prompts;
    MosNormalization mos;
    std::string train_db;  // dataset the trainable parameters were fitted on

    /// Full parameter inventory with stable names.
    std::vector<NamedParameter> parameters() {
        std::vector<NamedParameter> out;
        for (NamedParameter& p : codec->parameters()) out.push_back(p);
        for (NamedParameter& p : backbone->parameters()) out.push_back(p);
        for (std::size_t i = 0; i < readout.blocks.size(); ++i) {
            ReadoutBlock& b = readout.blocks[i];
            const std::string s = "block." + std::to_string(i);
            out.push_back({s + ".q.base", &b.w_q});
            out.push_back({s + ".k.base", &b.w_k});
            out.push_back({s + ".v.base", &b.w_v});
            const auto adapter = [&](const char* which, std::optional<LoRAAdapter>& a) {
                if (!a) return;
                out.push_back({s + "." + which + ".lora_B", &a->B});
                out.push_back({s + "." + which + ".lora_A", &a->A});
            };
            adapter("q", b.q_lora);
            adapter("k", b.k_lora);
            adapter("v", b.v_lora);
        }
        out.push_back({"encoder.token_table", &encoder.token_table});
        out.push_back({"encoder.positional", &encoder.positional});
        out.push_back({"encoder.projection", &encoder.projection});
        out.push_back({"context.tokens", &prompts.context});
        return out;
    }

    std::vector<NamedConstParameter> parameters() const {
        std::vector<NamedConstParameter> out;
        for (const NamedParameter& p : const_cast<ModelBundle*>(this)->parameters()) out.push_back({p.name, p.value});
        return out;
    }

    TimestepPolicy eval_policy() const {
        TimestepPolicy p;
        p.range = config.eval_range();
        p.count = config.eval_timestep_count;
        return p;
    }

    TimestepPolicy train_policy() const {
        TimestepPolicy p;
        p.range = config.train_timestep_range;
        p.count = 1;
        return p;
    }

    TimestepSpacing eval_spacing() const {
        return config.eval_timestep_spacing == "random" ? TimestepSpacing::Random : TimestepSpacing::Even;
    }

    std::vector<int> tapped_token_counts() const {
        std::vector<int> n;
        for (int i : readout.tapped) n.push_back(backbone->block_specs()[static_cast<std::size_t>(i)].tokens);
        return n;
    }

    /// Attainable interval of the reported score, used to place normalised
    /// MOS targets onto the score's scale.
    ScoreWindow score_window() const {
        const std::vector<int> n = tapped_token_counts();
        ScoreWindow acc{0.0, 0.0};
        const auto sides = prompts.active_sides();
        for (PromptSide side : sides) {
            const ScoreWindow w = liqa::score_window(n, prompts.text_tokens(side), readout.lambda, readout.pooling);
            acc.lo += w.lo;
            acc.hi += w.hi;
        }
        acc.lo /= static_cast<double>(sides.size());
        acc.hi /= static_cast<double>(sides.size());
        return acc;
    }

    /// Score interval that normalised MOS [0, 1] is regressed onto: the low
    /// end of the attainable window and `target_span` of its width.
    ScoreWindow target_window() const {
        const ScoreWindow w = score_window();
        return ScoreWindow{w.lo, w.lo + config.target_span * (w.hi - w.lo)};
    }
};

inline std::vector<int> parse_tapped_blocks(const std::string& text, int num_blocks) {
    std::vector<int> out;
    if (text == "all" || text.empty()) {
        for (int i = 0; i < num_blocks; ++i) out.push_back(i);
        return out;
    }
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const int i = config_detail::to_int("tapped_blocks", config_detail::trim(item));
        require(i >= 0 && i < num_blocks, ErrorKind::InvalidConfig, "tapped block " + item + " out of range");
        require(std::find(out.begin(), out.end(), i) == out.end(), ErrorKind::InvalidConfig,
                "tapped block " + item + " listed twice");
        out.push_back(i);
    }
    require(!out.empty(), ErrorKind::InvalidConfig, "tapped_blocks is empty");
    return out;
}

inline ToyBackboneConfig toy_backbone_config(const RunConfig& cfg) {
    require(cfg.resolution % cfg.downsample_factor == 0, ErrorKind::InvalidConfig,
            "resolution must be a multiple of downsample_factor");
    ToyBackboneConfig t;
    t.latent_channels = cfg.latent_channels;
    t.latent_height = cfg.resolution / cfg.downsample_factor;
    t.latent_width = cfg.resolution / cfg.downsample_factor;
    t.base_width = cfg.base_width;
    t.num_blocks = cfg.num_blocks;
    t.text_width = cfg.d_tau;
    t.attention_width = cfg.attn_dim;
    return t;
}

/// Applies the pooling/prompt switches of the config to an existing bundle.
inline void apply_runtime_switches(ModelBundle& b) {
    b.readout.lambda = b.config.lambda;
    b.readout.pooling = b.config.mean_pool_instead_of_lse ? Pooling::Mean : Pooling::LogSumExp;
    b.readout.tapped = parse_tapped_blocks(b.config.tapped_blocks, b.backbone->num_blocks());
    b.prompts.mode = parse_prompt_mode(b.config.prompt_mode);
    b.prompts.trainable = b.config.prompt_trainable;
    b.readout.validate();
}

/// Builds the toy bundle, every random component seeded from `cfg.seed`.
inline ModelBundle build_toy_bundle(const RunConfig& cfg) {
    cfg.validate();
    require(cfg.backbone == "toy", ErrorKind::Unsupported,
            "backbone '" + cfg.backbone + "' cannot be built in-process; attach it through an adapter");
    require(cfg.num_blocks >= 1, ErrorKind::InvalidConfig, "num_blocks must be >= 1");
    ModelBundle b;
    b.config = cfg;
    b.schedule = build_linear_schedule(cfg.total_timesteps, cfg.beta_start, cfg.beta_end);

    Rng codec_rng = derive_rng(cfg.seed, {1});
    b.codec = std::make_shared<ToyCodec>(cfg.resolution, cfg.downsample_factor, cfg.latent_channels,
                                         cfg.latent_scale, codec_rng);
    Rng backbone_rng = derive_rng(cfg.seed, {2});
    auto backbone = std::make_shared<ToyBackbone>(toy_backbone_config(cfg), backbone_rng);
    Rng readout_rng = derive_rng(cfg.seed, {3});
    b.readout = make_readout(backbone->block_specs(), cfg.d_tau, cfg.lora_rank, cfg.lora_scale,
                             cfg.train_query_weights, cfg.lambda, readout_rng);
    b.backbone = backbone;
    Rng encoder_rng = derive_rng(cfg.seed, {4});
    b.encoder = TextEncoder::random(cfg.d_tau, encoder_rng);
    Rng prompt_rng = derive_rng(cfg.seed, {5});
    b.prompts = build_prompt_pair(cfg.pos_attribute, cfg.neg_attribute, cfg.context_length, cfg.d_tau, b.encoder.vocab,
                                  prompt_rng, cfg.context_init_std);
    apply_runtime_switches(b);
    return b;
}

/// Split of the parameter inventory into what the optimiser may touch and
/// what must stay bit-identical.
struct ParameterPartition {
    std::vector<std::string> trainable;
    std::vector<std::string> frozen;

    bool is_trainable(const std::string& name) const {
        return std::find(trainable.begin(), trainable.end(), name) != trainable.end();
    }
};

inline bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline ParameterPartition partition_parameters(const ModelBundle& bundle) {
    ParameterPartition part;
    const RunConfig& cfg = bundle.config;
    for (const NamedConstParameter& p : bundle.parameters()) {
        const std::string& n = p.name;
        const bool lora = ends_with(n, ".lora_B") || ends_with(n, ".lora_A");
        bool train = false;
        if (lora && (n.find(".k.lora") != std::string::npos || n.find(".v.lora") != std::string::npos))
            train = !cfg.freeze_cross_attention;
        else if (lora && n.find(".q.lora") != std::string::npos)
            train = cfg.train_query_weights;
        else if (n == "context.tokens")
            train = cfg.prompt_trainable;
        (train ? part.trainable : part.frozen).push_back(n);
    }
    return part;
}

inline std::set<const Eigen::MatrixXd*> trainable_pointers(const ModelBundle& bundle, const ParameterPartition& part) {
    std::set<const Eigen::MatrixXd*> out;
    for (const NamedConstParameter& p : bundle.parameters())
        if (part.is_trainable(p.name)) out.insert(p.value);
    return out;
}

/// Deep copy of every parameter value by name.
inline std::map<std::string, Eigen::MatrixXd> snapshot_parameters(const ModelBundle& bundle) {
    std::map<std::string, Eigen::MatrixXd> out;
    for (const NamedConstParameter& p : bundle.parameters()) out[p.name] = *p.value;
    return out;
}

} // namespace liqa
