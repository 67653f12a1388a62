#pragma once

// Antonym prompt pair with a shared learnable context, and a small frozen
// text encoder standing in for the CLIP text tower.

#include <algorithm>
#include <cctype>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "autodiff.hpp"
#include "error.hpp"
#include "params.hpp"
#include "rng.hpp"

namespace liqa {

enum class PromptMode { Antonym, Single };
enum class PromptSide { Positive, Negative };

inline PromptMode parse_prompt_mode(const std::string& s) {
    if (s == "antonym") return PromptMode::Antonym;
    if (s == "single") return PromptMode::Single;
    fail(ErrorKind::InvalidConfig, "prompt_mode must be 'antonym' or 'single', got '" + s + "'");
}

inline std::string to_string(PromptMode m) { return m == PromptMode::Antonym ? "antonym" : "single"; }

class Vocabulary {
public:
    static constexpr int kBegin = 0;
    static constexpr int kEnd = 1;

    Vocabulary() {
        for (const char* w : {"<bos>", "<eos>", ".", ",", "!", "a", "an", "the", "of", "photo", "image", "picture",
                              "good", "bad", "high", "low", "quality", "definition", "resolution", "sharp", "blurry",
                              "clean", "noisy", "clear", "distorted", "excellent", "poor", "great", "terrible", "nice",
                              "ugly", "detailed", "fine", "coarse", "bright", "dark", "natural", "artificial"})
            add(w);
    }

    int size() const { return static_cast<int>(words_.size()); }
    const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }

    std::optional<int> find(std::string_view w) const {
        auto it = ids_.find(std::string(w));
        if (it == ids_.end()) return std::nullopt;
        return it->second;
    }

    /// Lower-cases, splits on whitespace and peels punctuation into its own
    /// token. Unknown words are a tokenization error.
    std::vector<int> tokenize(std::string_view text) const {
        std::vector<std::string> pieces;
        std::string cur;
        auto flush = [&] {
            if (!cur.empty()) pieces.push_back(cur);
            cur.clear();
        };
        for (char ch : text) {
            const auto c = static_cast<unsigned char>(ch);
            if (std::isspace(c)) {
                flush();
            } else if (ch == '.' || ch == ',' || ch == '!') {
                flush();
                pieces.emplace_back(1, ch);
            } else {
                cur += static_cast<char>(std::tolower(c));
            }
        }
        flush();
        require(!pieces.empty(), ErrorKind::Tokenization, "prompt '" + std::string(text) + "' has no tokens");
        std::vector<int> ids;
        for (const std::string& p : pieces) {
            auto id = find(p);
            require(id.has_value(), ErrorKind::Tokenization, "unknown word '" + p + "'");
            ids.push_back(*id);
        }
        return ids;
    }

private:
    void add(const std::string& w) {
        ids_.emplace(w, static_cast<int>(words_.size()));
        words_.push_back(w);
    }

    std::vector<std::string> words_;
    std::map<std::string, int> ids_;
};

/// Frozen encoder: (token embeddings + positional table) times a fixed
/// orthogonal projection. Only the injected context rows can carry
/// gradients; the body never changes.
class TextEncoder {
public:
    static constexpr int kMaxLength = 77;

    TextEncoder() = default;

    static TextEncoder random(int d_tau, Rng& rng) {
        TextEncoder e;
        e.token_table = gaussian_matrix(e.vocab.size(), d_tau, 1.0, rng);
        e.positional = gaussian_matrix(kMaxLength, d_tau, 0.1, rng);
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian_matrix(d_tau, d_tau, 1.0, rng));
        e.projection = qr.householderQ() * Eigen::MatrixXd::Identity(d_tau, d_tau);
        return e;
    }

    /// Pass-through encoder: zero positional table and identity projection.
    static TextEncoder identity(int d_tau, Rng& rng) {
        TextEncoder e;
        e.token_table = gaussian_matrix(e.vocab.size(), d_tau, 1.0, rng);
        e.positional = Eigen::MatrixXd::Zero(kMaxLength, d_tau);
        e.projection = Eigen::MatrixXd::Identity(d_tau, d_tau);
        return e;
    }

    int width() const { return static_cast<int>(projection.rows()); }

    /// Number of output rows for a context of `context_len` and an attribute
    /// of `attribute_len` tokens: begin and end markers are included.
    static int output_length(int context_len, int attribute_len) { return context_len + attribute_len + 2; }

    ad::Var encode(Binder& binder, ad::Var context, const std::vector<int>& attribute) const {
        const int len = output_length(static_cast<int>(context.rows()), static_cast<int>(attribute.size()));
        require(len <= kMaxLength, ErrorKind::Tokenization, "prompt longer than the positional table");
        require(context.cols() == width(), ErrorKind::ShapeMismatch, "context width differs from encoder width");
        Eigen::MatrixXd begin = token_table.row(Vocabulary::kBegin);
        Eigen::MatrixXd tail(static_cast<Eigen::Index>(attribute.size()) + 1, width());
        for (std::size_t i = 0; i < attribute.size(); ++i) tail.row(static_cast<Eigen::Index>(i)) = token_table.row(attribute[i]);
        tail.row(tail.rows() - 1) = token_table.row(Vocabulary::kEnd);
        const ad::Var parts[] = {binder.constant(std::move(begin)), context, binder.constant(std::move(tail))};
        ad::Var tokens = ad::concat_rows(parts);
        ad::Var with_pos = ad::add(tokens, binder.constant(positional.topRows(len)));
        return ad::matmul(with_pos, binder.bind(projection));
    }

    Vocabulary vocab;
    Eigen::MatrixXd token_table;  // vocab x d_tau
    Eigen::MatrixXd positional;   // kMaxLength x d_tau
    Eigen::MatrixXd projection;   // d_tau x d_tau, orthogonal
};

struct PromptPair {
    Eigen::MatrixXd context;  // context_len x d_tau, shared by both prompts
    std::vector<int> positive;
    std::vector<int> negative;
    std::string positive_text;
    std::string negative_text;
    bool trainable = true;
    PromptMode mode = PromptMode::Antonym;

    int context_length() const { return static_cast<int>(context.rows()); }
    const std::vector<int>& attribute(PromptSide side) const { return side == PromptSide::Positive ? positive : negative; }
    int text_tokens(PromptSide side) const { return TextEncoder::output_length(context_length(), static_cast<int>(attribute(side).size())); }

    /// Sides that feed the score: both for antonym mode, positive only for
    /// single mode.
    std::vector<PromptSide> active_sides() const {
        if (mode == PromptMode::Single) return {PromptSide::Positive};
        return {PromptSide::Positive, PromptSide::Negative};
    }
};

inline PromptPair build_prompt_pair(const std::string& pos_text, const std::string& neg_text, int context_len, int d_tau,
                                    const Vocabulary& vocab, Rng& rng, double init_std = 0.02) {
    require(context_len >= 1, ErrorKind::InvalidConfig, "context length must be >= 1");
    require(d_tau >= 1, ErrorKind::InvalidConfig, "d_tau must be >= 1");
    PromptPair p;
    p.positive = vocab.tokenize(pos_text);
    p.negative = vocab.tokenize(neg_text);
    require(p.positive != p.negative, ErrorKind::Validation,
            "antonym prompts must differ ('" + pos_text + "' vs '" + neg_text + "')");
    p.positive_text = pos_text;
    p.negative_text = neg_text;
    p.context = gaussian_matrix(context_len, d_tau, init_std, rng);
    return p;
}

inline ad::Var encode_prompt(Binder& binder, const PromptPair& pair, PromptSide side, const TextEncoder& encoder) {
    return encoder.encode(binder, binder.bind(pair.context), pair.attribute(side));
}

inline Eigen::MatrixXd encode_prompt(const PromptPair& pair, PromptSide side, const TextEncoder& encoder) {
    ad::Tape tape;
    Binder binder(tape);
    return encode_prompt(binder, pair, side, encoder).value();
}

/// Copy of the pair that scores with the positive prompt alone.
inline PromptPair single_prompt_mode(PromptPair pair) {
    pair.mode = PromptMode::Single;
    return pair;
}

} // namespace liqa
