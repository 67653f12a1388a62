#pragma once

// Cross-attention readout: per-block query/key/value projections with
// low-rank adapters on key and value, row-stochastic attention maps between
// visual tokens and text tokens, and log-sum-exp pooling of those maps into
// a scalar quality.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "autodiff.hpp"
#include "error.hpp"
#include "kernels.hpp"
#include "params.hpp"
#include "rng.hpp"

namespace liqa {

/// W' = W0 + scale * B * A with B: out x rank and A: rank x in.
struct LoRAAdapter {
    Eigen::MatrixXd B;
    Eigen::MatrixXd A;
    double scale = 1.0;

    int rank() const { return static_cast<int>(B.cols()); }

    /// B starts at zero so the adapted weight equals the base weight.
    static LoRAAdapter zero_init(Eigen::Index out, Eigen::Index in, int rank, double scale, Rng& rng) {
        require(rank >= 1 && rank < std::min(out, in), ErrorKind::InvalidConfig,
                "LoRA rank must satisfy 1 <= r < min(d, d_in)");
        LoRAAdapter a;
        a.B = Eigen::MatrixXd::Zero(out, rank);
        a.A = gaussian_matrix(rank, in, 1.0 / std::sqrt(static_cast<double>(in)), rng);
        a.scale = scale;
        return a;
    }

    Eigen::MatrixXd effective(const Eigen::MatrixXd& base) const { return base + scale * (B * A); }
};

enum class Pooling { LogSumExp, Mean };

struct ReadoutBlock {
    Eigen::MatrixXd w_q;  // d x d_phi, always frozen
    Eigen::MatrixXd w_k;  // d x d_tau, frozen base
    Eigen::MatrixXd w_v;  // d x d_tau, frozen base
    std::optional<LoRAAdapter> q_lora;  // only for the query-trainability ablation
    std::optional<LoRAAdapter> k_lora;
    std::optional<LoRAAdapter> v_lora;

    int attention_dim() const { return static_cast<int>(w_q.rows()); }
    int visual_dim() const { return static_cast<int>(w_q.cols()); }
    int text_dim() const { return static_cast<int>(w_k.cols()); }

    Eigen::MatrixXd effective_q() const { return q_lora ? q_lora->effective(w_q) : w_q; }
    Eigen::MatrixXd effective_k() const { return k_lora ? k_lora->effective(w_k) : w_k; }
    Eigen::MatrixXd effective_v() const { return v_lora ? v_lora->effective(w_v) : w_v; }
};

struct CrossAttentionReadout {
    std::vector<ReadoutBlock> blocks;
    std::vector<int> tapped;  // block indices pooled into the score
    double lambda = 0.14;
    Pooling pooling = Pooling::LogSumExp;

    void validate() const {
        require(lambda > 0.0, ErrorKind::InvalidConfig, "lambda must be positive");
        require(!blocks.empty(), ErrorKind::InvalidConfig, "readout has no blocks");
        require(!tapped.empty(), ErrorKind::InvalidConfig, "no tapped blocks");
        for (int i : tapped)
            require(i >= 0 && i < static_cast<int>(blocks.size()), ErrorKind::InvalidConfig,
                    "tapped block index " + std::to_string(i) + " out of range");
    }

    bool is_tapped(int i) const { return std::find(tapped.begin(), tapped.end(), i) != tapped.end(); }
};

struct AttentionMap {
    int block = 0;
    Eigen::MatrixXd values;  // N x M, rows sum to one
};

struct QKV {
    Eigen::MatrixXd Q;
    Eigen::MatrixXd K;
    Eigen::MatrixXd V;
};

/// Q = phi W_Q^T, K = E (W_K + s B_K A_K)^T, V = E (W_V + s B_V A_V)^T.
inline QKV project_qkv(const Eigen::MatrixXd& phi, const Eigen::MatrixXd& text_emb, const ReadoutBlock& block) {
    require(phi.cols() == block.visual_dim(), ErrorKind::ShapeMismatch,
            "visual feature width " + std::to_string(phi.cols()) + " != " + std::to_string(block.visual_dim()));
    require(text_emb.cols() == block.text_dim(), ErrorKind::ShapeMismatch,
            "text embedding width " + std::to_string(text_emb.cols()) + " != " + std::to_string(block.text_dim()));
    QKV out;
    out.Q = phi * block.effective_q().transpose();
    out.K = text_emb * block.effective_k().transpose();
    out.V = text_emb * block.effective_v().transpose();
    return out;
}

/// softmax(Q K^T / sqrt(d)) over the text-token axis.
inline AttentionMap attention_map(const Eigen::MatrixXd& Q, const Eigen::MatrixXd& K, int block = 0) {
    require(Q.cols() == K.cols(), ErrorKind::ShapeMismatch, "Q and K widths differ");
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(Q.cols()));
    return AttentionMap{block, kernels::softmax_rows((Q * K.transpose()) * inv_sqrt_d)};
}

inline double lse_pool_column(std::span<const double> column, double lambda) {
    require(lambda > 0.0, ErrorKind::InvalidConfig, "lambda must be positive");
    require(!column.empty(), ErrorKind::ShapeMismatch, "empty column");
    Eigen::Map<const Eigen::VectorXd> v(column.data(), static_cast<Eigen::Index>(column.size()));
    return kernels::lse_pool(v, lambda);
}

inline double pool_map(const Eigen::MatrixXd& A, double lambda, Pooling pooling) {
    double total = 0.0;
    for (Eigen::Index m = 0; m < A.cols(); ++m)
        total += pooling == Pooling::LogSumExp ? kernels::lse_pool(A.col(m), lambda) : A.col(m).mean();
    return total / static_cast<double>(A.cols());
}

/// g(A) = (1/S) sum_i (1/M) sum_m lse_pool(column m of A_i).
inline double quality_from_maps(std::span<const AttentionMap> maps, double lambda,
                                Pooling pooling = Pooling::LogSumExp) {
    require(!maps.empty(), ErrorKind::ShapeMismatch, "no attention maps");
    require(lambda > 0.0, ErrorKind::InvalidConfig, "lambda must be positive");
    const Eigen::Index M = maps.front().values.cols();
    double total = 0.0;
    for (const AttentionMap& a : maps) {
        require(a.values.cols() == M, ErrorKind::ShapeMismatch, "attention maps disagree on M");
        total += pool_map(a.values, lambda, pooling);
    }
    return total / static_cast<double>(maps.size());
}

/// Attainable interval of the pooled quality for one prompt of M tokens over
/// blocks with the given visual token counts. The lower end is the uniform
/// map; the upper end is one-hot rows split evenly across text tokens.
struct ScoreWindow {
    double lo = 0.0;
    double hi = 1.0;
};

inline ScoreWindow score_window(std::span<const int> token_counts, int text_tokens, double lambda, Pooling pooling) {
    const double M = static_cast<double>(text_tokens);
    if (pooling == Pooling::Mean) return ScoreWindow{1.0 / M, 1.0 / M + 1.0};
    double offset = 0.0;
    for (int n : token_counts) offset += std::log(static_cast<double>(n)) / lambda;
    offset /= static_cast<double>(token_counts.size());
    return ScoreWindow{offset + 1.0 / M, offset + std::log1p(std::expm1(lambda) / M) / lambda};
}

namespace readout_tape {

inline ad::Var effective_weight(Binder& binder, const Eigen::MatrixXd& base, const std::optional<LoRAAdapter>& lora) {
    ad::Var w = binder.bind(base);
    if (!lora) return w;
    ad::Var delta = ad::scale(ad::matmul(binder.bind(lora->B), binder.bind(lora->A)), lora->scale);
    return ad::add(w, delta);
}

struct BlockAttention {
    ad::Var map;    // N x M
    ad::Var value;  // M x d
};

inline BlockAttention attend(Binder& binder, ad::Var phi, ad::Var text_emb, const ReadoutBlock& block) {
    require(phi.cols() == block.visual_dim() && text_emb.cols() == block.text_dim(), ErrorKind::ShapeMismatch,
            "readout block does not match feature widths");
    ad::Var q = ad::matmul_nt(phi, effective_weight(binder, block.w_q, block.q_lora));
    ad::Var k = ad::matmul_nt(text_emb, effective_weight(binder, block.w_k, block.k_lora));
    ad::Var v = ad::matmul_nt(text_emb, effective_weight(binder, block.w_v, block.v_lora));
    ad::Var logits = ad::scale(ad::matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(block.attention_dim())));
    return BlockAttention{ad::softmax_rows(logits), v};
}

inline ad::Var pool(ad::Var map, double lambda, Pooling pooling) {
    return pooling == Pooling::LogSumExp ? ad::lse_pool_mean(map, lambda) : ad::mean_pool_mean(map);
}

} // namespace readout_tape

} // namespace liqa
