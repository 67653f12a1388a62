#pragma once

// Latent codec and denoiser interfaces, the desk-scale toy implementations,
// and the deterministic reverse step.

#include <cmath>
#include <memory>
#include <numbers>
#include <utility>
#include <algorithm>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "autodiff.hpp"
#include "error.hpp"
#include "image.hpp"
#include "kernels.hpp"
#include "params.hpp"
#include "readout.hpp"
#include "rng.hpp"
#include "schedule.hpp"

namespace liqa {

struct LatentShape {
    int channels = 0;
    int height = 0;
    int width = 0;
    friend bool operator==(const LatentShape&, const LatentShape&) = default;
};

class LatentCodec {
public:
    virtual ~LatentCodec() = default;
    virtual LatentShape latent_shape() const = 0;
    virtual int image_resolution() const = 0;
    virtual Latent encode(const Image& image) const = 0;
    virtual bool can_decode() const { return false; }
    virtual Image decode(const Latent&) const { fail(ErrorKind::Unsupported, "codec cannot decode"); }
    virtual std::vector<NamedParameter> parameters() { return {}; }
};

/// Fixed patchifier. Every f x f RGB patch (centred at 0.5) is projected
/// onto `channels` orthonormal directions and multiplied by `scale`:
/// direction 0 is the patch mean, the next ones are luminance cosine
/// patterns nearest the middle of the patch spectrum, and any further
/// directions are random, orthogonalised against the rest.
class ToyCodec final : public LatentCodec {
public:
    ToyCodec(int resolution, int factor, int channels, double scale, Rng& rng)
        : resolution_(resolution), factor_(factor), channels_(channels), scale_(scale) {
        require(resolution > 0 && factor > 0 && resolution % factor == 0, ErrorKind::InvalidConfig,
                "resolution must be a multiple of the downsampling factor");
        const int dim = 3 * factor * factor;
        require(channels >= 1 && channels <= dim, ErrorKind::InvalidConfig, "bad latent channel count");
        Eigen::MatrixXd raw(dim, channels);
        const auto freqs = band_order(factor);
        for (int c = 0; c < channels; ++c) {
            if (c == 0 || c - 1 < static_cast<int>(freqs.size())) {
                const auto [u, v] = c == 0 ? std::pair<int, int>{0, 0} : freqs[static_cast<std::size_t>(c - 1)];
                int k = 0;
                for (int y = 0; y < factor; ++y)
                    for (int x = 0; x < factor; ++x)
                        for (int ch = 0; ch < 3; ++ch)
                            raw(k++, c) = std::cos((2 * y + 1) * u * std::numbers::pi / (2 * factor)) *
                                          std::cos((2 * x + 1) * v * std::numbers::pi / (2 * factor));
            } else {
                raw.col(c) = gaussian_matrix(dim, 1, 1.0, rng);
            }
        }
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(raw);
        Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(dim, channels);
        // QR may flip signs; align each direction with its source pattern.
        for (int c = 0; c < channels; ++c)
            if (q.col(c).dot(raw.col(c)) < 0) q.col(c) = -q.col(c);
        projection = q.transpose();
    }

    /// Non-constant cosine frequencies (u, v) ordered by distance from the
    /// centre of the patch spectrum, ties broken by (u, v).
    static std::vector<std::pair<int, int>> band_order(int factor) {
        std::vector<std::pair<int, int>> out;
        for (int u = 0; u < factor; ++u)
            for (int v = 0; v < factor; ++v)
                if (u + v > 0) out.emplace_back(u, v);
        const double mid = (factor - 1) / 2.0 - 0.5;
        std::stable_sort(out.begin(), out.end(), [mid](const auto& a, const auto& b) {
            const double da = std::abs(a.first - mid) + std::abs(a.second - mid);
            const double db = std::abs(b.first - mid) + std::abs(b.second - mid);
            return da < db;
        });
        return out;
    }

    LatentShape latent_shape() const override {
        return {channels_, resolution_ / factor_, resolution_ / factor_};
    }
    int image_resolution() const override { return resolution_; }
    int factor() const { return factor_; }
    double scale() const { return scale_; }

    Latent encode(const Image& image) const override {
        require(image.width == resolution_ && image.height == resolution_, ErrorKind::ShapeMismatch,
                "codec expects " + std::to_string(resolution_) + "x" + std::to_string(resolution_) + " input, got " +
                    std::to_string(image.width) + "x" + std::to_string(image.height));
        const LatentShape s = latent_shape();
        Latent z(s.channels, s.height, s.width);
        const int dim = 3 * factor_ * factor_;
        Eigen::VectorXd patch(dim);
        for (int py = 0; py < s.height; ++py)
            for (int px = 0; px < s.width; ++px) {
                int k = 0;
                for (int y = 0; y < factor_; ++y)
                    for (int x = 0; x < factor_; ++x)
                        for (int c = 0; c < 3; ++c)
                            patch(k++) = static_cast<double>(image.at(py * factor_ + y, px * factor_ + x, c)) - 0.5;
                z.values.row(py * s.width + px) = (scale_ * (projection * patch)).transpose();
            }
        return z;
    }

    bool can_decode() const override { return true; }

    /// Least-squares inverse of the projection (lossy for channels < 3 f^2).
    Image decode(const Latent& z) const override {
        const LatentShape s = latent_shape();
        require(z.channels == s.channels && z.height == s.height && z.width == s.width, ErrorKind::ShapeMismatch,
                "latent shape does not match codec");
        Image img(resolution_, resolution_);
        for (int py = 0; py < s.height; ++py)
            for (int px = 0; px < s.width; ++px) {
                const Eigen::VectorXd patch =
                    projection.transpose() * z.values.row(py * s.width + px).transpose() / scale_;
                int k = 0;
                for (int y = 0; y < factor_; ++y)
                    for (int x = 0; x < factor_; ++x)
                        for (int c = 0; c < 3; ++c)
                            img.at(py * factor_ + y, px * factor_ + x, c) = static_cast<float>(patch(k++) + 0.5);
            }
        return img;
    }

    std::vector<NamedParameter> parameters() override { return {{"codec.projection", &projection}}; }

    Eigen::MatrixXd projection;  // channels x 3 f^2, orthonormal rows

private:
    int resolution_;
    int factor_;
    int channels_;
    double scale_;
};

struct BackboneBlockSpec {
    int index = 0;
    int tokens = 0;        // N^i, flattened spatial extent
    int grid_height = 0;
    int grid_width = 0;
    int visual_width = 0;  // d_phi^i
    int attention_width = 0;
    friend bool operator==(const BackboneBlockSpec&, const BackboneBlockSpec&) = default;
};

struct BackboneOutput {
    std::vector<ad::Var> features;  // phi_i, N^i x d_phi^i
    std::vector<ad::Var> maps;      // A_i, N^i x M
    std::optional<ad::Var> predicted_noise;  // tokens x channels
};

/// Noise-prediction network with cross-attention blocks whose projections
/// come from an explicit readout object rather than hidden hooks.
class DenoiserBackbone {
public:
    virtual ~DenoiserBackbone() = default;
    virtual std::string kind() const = 0;
    virtual LatentShape latent_shape() const = 0;
    virtual const std::vector<BackboneBlockSpec>& block_specs() const = 0;
    virtual int text_width() const = 0;
    virtual BackboneOutput forward(Binder& binder, const Latent& z_t, int t, ad::Var text_emb,
                                   const CrossAttentionReadout& readout, bool predict_noise) const = 0;
    virtual std::vector<NamedParameter> parameters() = 0;

    int num_blocks() const { return static_cast<int>(block_specs().size()); }

    Latent predict_noise(const Latent& z_t, int t, const Eigen::MatrixXd& text_emb,
                         const CrossAttentionReadout& readout) const {
        ad::Tape tape;
        Binder binder(tape);
        BackboneOutput out = forward(binder, z_t, t, binder.constant(text_emb), readout, true);
        Latent eps(z_t.channels, z_t.height, z_t.width);
        eps.values = out.predicted_noise->value();
        return eps;
    }
};

struct ToyBackboneConfig {
    int latent_channels = 4;
    int latent_height = 16;
    int latent_width = 16;
    int base_width = 64;
    int num_blocks = 2;
    int text_width = 64;       // d_tau
    int attention_width = 64;  // d
    int time_embedding = 32;

    void validate() const {
        require(latent_channels >= 1 && base_width >= 1 && text_width >= 1 && attention_width >= 1,
                ErrorKind::InvalidConfig, "toy backbone widths must be positive");
        require(num_blocks >= 1, ErrorKind::InvalidConfig, "need at least one cross-attention block");
        const int div = 1 << (num_blocks - 1);
        require(latent_height % div == 0 && latent_width % div == 0, ErrorKind::InvalidConfig,
                "latent grid must be divisible by 2^(blocks-1)");
        require(time_embedding % 2 == 0 && time_embedding >= 2, ErrorKind::InvalidConfig, "time embedding must be even");
    }
};

inline Eigen::MatrixXd timestep_embedding(int t, int dim) {
    Eigen::MatrixXd e(1, dim);
    const int half = dim / 2;
    for (int k = 0; k < half; ++k) {
        const double freq = std::pow(10000.0, -static_cast<double>(k) / half);
        e(0, k) = std::sin(t * freq);
        e(0, half + k) = std::cos(t * freq);
    }
    return e;
}

/// Small encoder-decoder denoiser. Block i runs on a grid downsampled by 2^i
/// with width base_width * 2^i:
///   h_0 = silu(conv3x3(z_t) + b + T_0 temb(t))
///   h_i = silu(avgpool(h_{i-1}) D_i^T + T_i temb(t))            (i > 0)
///   h_i <- h_i + softmax(Q K^T / sqrt d) V O_i^T                (cross-attention)
/// and the noise head upsamples back with skip connections.
class ToyBackbone final : public DenoiserBackbone {
public:
    ToyBackbone(const ToyBackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg.validate();
        for (int i = 0; i < cfg.num_blocks; ++i) {
            BackboneBlockSpec s;
            s.index = i;
            s.grid_height = cfg.latent_height >> i;
            s.grid_width = cfg.latent_width >> i;
            s.tokens = s.grid_height * s.grid_width;
            s.visual_width = cfg.base_width << i;
            s.attention_width = cfg.attention_width;
            specs_.push_back(s);
        }
        const int C = cfg.latent_channels;
        const int w0 = cfg.base_width;
        const auto inv_sqrt = [](int n) { return 1.0 / std::sqrt(static_cast<double>(n)); };
        conv_in = gaussian_matrix(w0, 9 * C, inv_sqrt(9 * C), rng);
        conv_bias = gaussian_matrix(1, w0, 0.1, rng);
        for (int i = 0; i < cfg.num_blocks; ++i) {
            const int wi = specs_[static_cast<std::size_t>(i)].visual_width;
            time_proj.push_back(gaussian_matrix(wi, cfg.time_embedding, 0.5 * inv_sqrt(cfg.time_embedding), rng));
            down.push_back(i == 0 ? Eigen::MatrixXd() : gaussian_matrix(wi, wi / 2, inv_sqrt(wi / 2), rng));
            attn_out.push_back(gaussian_matrix(wi, cfg.attention_width, 0.5 * inv_sqrt(cfg.attention_width), rng));
            up.push_back(i + 1 < cfg.num_blocks ? gaussian_matrix(wi, 2 * wi, inv_sqrt(2 * wi), rng) : Eigen::MatrixXd());
        }
        head = gaussian_matrix(C, w0, inv_sqrt(w0), rng);
    }

    std::string kind() const override { return "toy"; }
    LatentShape latent_shape() const override { return {cfg_.latent_channels, cfg_.latent_height, cfg_.latent_width}; }
    const std::vector<BackboneBlockSpec>& block_specs() const override { return specs_; }
    int text_width() const override { return cfg_.text_width; }
    const ToyBackboneConfig& config() const { return cfg_; }

    BackboneOutput forward(Binder& binder, const Latent& z_t, int t, ad::Var text_emb,
                           const CrossAttentionReadout& readout, bool predict_noise) const override {
        const LatentShape shape = latent_shape();
        require(z_t.channels == shape.channels && z_t.height == shape.height && z_t.width == shape.width,
                ErrorKind::ShapeMismatch, "latent shape does not match the backbone");
        require(static_cast<int>(readout.blocks.size()) == num_blocks(), ErrorKind::TopologyMismatch,
                "readout has " + std::to_string(readout.blocks.size()) + " blocks, backbone has " +
                    std::to_string(num_blocks()));
        require(text_emb.cols() == cfg_.text_width, ErrorKind::ShapeMismatch, "text embedding width mismatch");

        const Eigen::MatrixXd temb = timestep_embedding(t, cfg_.time_embedding);
        BackboneOutput out;
        std::vector<ad::Var> skips;

        Eigen::MatrixXd pre = kernels::im2col3(z_t.values, z_t.height, z_t.width) * conv_in.transpose();
        pre.rowwise() += conv_bias.row(0) + temb.row(0) * time_proj[0].transpose();
        ad::Var h = binder.constant(kernels::silu(pre));

        for (int i = 0; i < num_blocks(); ++i) {
            const BackboneBlockSpec& spec = specs_[static_cast<std::size_t>(i)];
            if (i > 0) {
                const BackboneBlockSpec& prev = specs_[static_cast<std::size_t>(i - 1)];
                ad::Var pooled = ad::avg_pool2(h, prev.grid_height, prev.grid_width);
                ad::Var mixed = ad::matmul_nt(pooled, binder.bind(down[static_cast<std::size_t>(i)]));
                mixed = ad::add_row(mixed, binder.constant(temb * time_proj[static_cast<std::size_t>(i)].transpose()));
                h = ad::silu(mixed);
            }
            out.features.push_back(h);
            const ReadoutBlock& rb = readout.blocks[static_cast<std::size_t>(i)];
            require(rb.visual_dim() == spec.visual_width && rb.attention_dim() == spec.attention_width,
                    ErrorKind::TopologyMismatch, "readout block " + std::to_string(i) + " widths do not match");
            readout_tape::BlockAttention att = readout_tape::attend(binder, h, text_emb, rb);
            out.maps.push_back(att.map);
            ad::Var mixed_text = ad::matmul(att.map, att.value);
            h = ad::add(h, ad::matmul_nt(mixed_text, binder.bind(attn_out[static_cast<std::size_t>(i)])));
            skips.push_back(h);
        }

        if (predict_noise) {
            ad::Var u = skips.back();
            for (int i = num_blocks() - 2; i >= 0; --i) {
                const BackboneBlockSpec& deeper = specs_[static_cast<std::size_t>(i + 1)];
                ad::Var lifted = ad::upsample2(u, deeper.grid_height, deeper.grid_width);
                u = ad::silu(ad::add(ad::matmul_nt(lifted, binder.bind(up[static_cast<std::size_t>(i)])),
                                     skips[static_cast<std::size_t>(i)]));
            }
            out.predicted_noise = ad::matmul_nt(u, binder.bind(head));
        }
        return out;
    }

    std::vector<NamedParameter> parameters() override {
        std::vector<NamedParameter> p{{"backbone.conv_in.weight", &conv_in}, {"backbone.conv_in.bias", &conv_bias}};
        for (int i = 0; i < num_blocks(); ++i) {
            const auto s = std::to_string(i);
            const auto idx = static_cast<std::size_t>(i);
            p.push_back({"backbone.time." + s + ".weight", &time_proj[idx]});
            if (i > 0) p.push_back({"backbone.down." + s + ".weight", &down[idx]});
            p.push_back({"block." + s + ".out.weight", &attn_out[idx]});
            if (i + 1 < num_blocks()) p.push_back({"backbone.up." + s + ".weight", &up[idx]});
        }
        p.push_back({"backbone.head.weight", &head});
        return p;
    }

    Eigen::MatrixXd conv_in;
    Eigen::MatrixXd conv_bias;
    std::vector<Eigen::MatrixXd> time_proj;
    std::vector<Eigen::MatrixXd> down;
    std::vector<Eigen::MatrixXd> attn_out;
    std::vector<Eigen::MatrixXd> up;
    Eigen::MatrixXd head;

private:
    ToyBackboneConfig cfg_;
    std::vector<BackboneBlockSpec> specs_;
};

/// Frozen random projections for every block, zero-initialised adapters on
/// key and value (and on the query when requested).
inline CrossAttentionReadout make_readout(const std::vector<BackboneBlockSpec>& specs, int text_width, int lora_rank,
                                          double lora_scale, bool query_adapter, double lambda, Rng& rng) {
    CrossAttentionReadout r;
    r.lambda = lambda;
    for (const BackboneBlockSpec& s : specs) {
        ReadoutBlock b;
        const int d = s.attention_width;
        b.w_q = gaussian_matrix(d, s.visual_width, 1.0 / std::sqrt(static_cast<double>(s.visual_width)), rng);
        b.w_k = gaussian_matrix(d, text_width, 1.0 / std::sqrt(static_cast<double>(text_width)), rng);
        b.w_v = gaussian_matrix(d, text_width, 1.0 / std::sqrt(static_cast<double>(text_width)), rng);
        b.k_lora = LoRAAdapter::zero_init(d, text_width, lora_rank, lora_scale, rng);
        b.v_lora = LoRAAdapter::zero_init(d, text_width, lora_rank, lora_scale, rng);
        if (query_adapter) b.q_lora = LoRAAdapter::zero_init(d, s.visual_width, lora_rank, lora_scale, rng);
        r.blocks.push_back(std::move(b));
        r.tapped.push_back(s.index);
    }
    return r;
}

/// Deterministic reverse step: predict the noise, form the clean estimate
/// z0_hat = (z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t) and re-noise it
/// to t_next with the same predicted noise.
inline Latent reverse_step(const Latent& z_t, const Latent& eps_hat, int t, int t_next, const NoiseSchedule& schedule) {
    require(t_next < t, ErrorKind::TimestepOrder,
            "t_next (" + std::to_string(t_next) + ") must be below t (" + std::to_string(t) + ")");
    require(z_t.same_shape(eps_hat), ErrorKind::ShapeMismatch, "predicted noise shape differs from latent");
    const double abar_t = schedule.alpha_bar(t);
    const double abar_n = schedule.alpha_bar(t_next);
    Latent out(z_t.channels, z_t.height, z_t.width);
    const Eigen::MatrixXd z0_hat = (z_t.values - std::sqrt(1.0 - abar_t) * eps_hat.values) / std::sqrt(abar_t);
    out.values = std::sqrt(abar_n) * z0_hat + std::sqrt(1.0 - abar_n) * eps_hat.values;
    return out;
}

inline Latent denoise_step(const Latent& z_t, int t, int t_next, const DenoiserBackbone& backbone,
                           const Eigen::MatrixXd& text_emb, const CrossAttentionReadout& readout,
                           const NoiseSchedule& schedule) {
    require(t_next < t, ErrorKind::TimestepOrder,
            "t_next (" + std::to_string(t_next) + ") must be below t (" + std::to_string(t) + ")");
    schedule.check_timestep(t);
    schedule.check_timestep(t_next);
    return reverse_step(z_t, backbone.predict_noise(z_t, t, text_emb, readout), t, t_next, schedule);
}

} // namespace liqa
