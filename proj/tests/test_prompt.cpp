#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace liqa;

namespace {

ErrorKind kind_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind();
    }
    ADD_FAILURE() << "no error raised";
    return ErrorKind::Io;
}

} // namespace

TEST(Tokenizer, SplitsPunctuationAndLowercases) {
    const Vocabulary v;
    const std::vector<int> ids = v.tokenize("Good Photo.");
    ASSERT_EQ(ids.size(), 3u);
    EXPECT_EQ(v.word(ids[0]), "good");
    EXPECT_EQ(v.word(ids[1]), "photo");
    EXPECT_EQ(v.word(ids[2]), ".");
}

TEST(Tokenizer, UnknownWordIsTokenizationError) {
    const Vocabulary v;
    EXPECT_EQ(kind_of([&] { v.tokenize("Splendid Photo."); }), ErrorKind::Tokenization);
    EXPECT_EQ(kind_of([&] { v.tokenize("   "); }), ErrorKind::Tokenization);
}

TEST(PromptPair, TokenCountIsContextPlusAttributePlusMarkers) {
    const Vocabulary v;
    Rng rng = derive_rng(1);
    const PromptPair p = build_prompt_pair("Good Photo.", "Bad Photo.", 16, 8, v, rng);
    EXPECT_EQ(p.text_tokens(PromptSide::Positive), 21);
    EXPECT_EQ(p.text_tokens(PromptSide::Negative), 21);
    EXPECT_EQ(p.context.rows(), 16);
    EXPECT_EQ(p.context.cols(), 8);

    TextEncoder enc = TextEncoder::random(8, rng);
    EXPECT_EQ(encode_prompt(p, PromptSide::Positive, enc).rows(), 21);
}

TEST(PromptPair, AntonymAttributesTokenizeDifferently) {
    const Vocabulary v;
    Rng rng = derive_rng(2);
    const PromptPair p = build_prompt_pair("High Quality.", "Low Quality.", 4, 8, v, rng);
    EXPECT_NE(p.positive, p.negative);
    EXPECT_EQ(p.positive.size(), p.negative.size());
}

TEST(PromptPair, IdenticalAttributesRejected) {
    const Vocabulary v;
    Rng rng = derive_rng(3);
    EXPECT_EQ(kind_of([&] { build_prompt_pair("Good Photo.", "good photo .", 4, 8, v, rng); }), ErrorKind::Validation);
}

TEST(PromptPair, RejectsEmptyContext) {
    const Vocabulary v;
    Rng rng = derive_rng(4);
    EXPECT_EQ(kind_of([&] { build_prompt_pair("Good Photo.", "Bad Photo.", 0, 8, v, rng); }), ErrorKind::InvalidConfig);
}

TEST(PromptPair, SeededInitialisationIsDeterministic) {
    const Vocabulary v;
    Rng a = derive_rng(7), b = derive_rng(7), c = derive_rng(8);
    const PromptPair pa = build_prompt_pair("Good Photo.", "Bad Photo.", 6, 8, v, a);
    const PromptPair pb = build_prompt_pair("Good Photo.", "Bad Photo.", 6, 8, v, b);
    const PromptPair pc = build_prompt_pair("Good Photo.", "Bad Photo.", 6, 8, v, c);
    EXPECT_TRUE(fixtures::bit_equal(pa.context, pb.context));
    EXPECT_FALSE(fixtures::bit_equal(pa.context, pc.context));
}

TEST(TextEncoder, IdentityEncoderPassesContextThrough) {
    Rng rng = derive_rng(5);
    const TextEncoder enc = TextEncoder::identity(8, rng);
    const PromptPair p = build_prompt_pair("Good Photo.", "Bad Photo.", 5, 8, enc.vocab, rng, 1.0);
    const Eigen::MatrixXd e = encode_prompt(p, PromptSide::Positive, enc);
    ASSERT_EQ(e.rows(), 5 + 3 + 2);
    EXPECT_TRUE(fixtures::bit_equal(e.middleRows(1, 5), p.context));
    EXPECT_TRUE(fixtures::bit_equal(e.row(0), enc.token_table.row(Vocabulary::kBegin)));
    EXPECT_TRUE(fixtures::bit_equal(e.row(e.rows() - 1), enc.token_table.row(Vocabulary::kEnd)));
    for (std::size_t i = 0; i < p.positive.size(); ++i)
        EXPECT_TRUE(fixtures::bit_equal(e.row(6 + static_cast<Eigen::Index>(i)), enc.token_table.row(p.positive[i])));
}

TEST(TextEncoder, SharedContextMovesBothPrompts) {
    Rng rng = derive_rng(6);
    const TextEncoder enc = TextEncoder::random(8, rng);
    PromptPair p = build_prompt_pair("Good Photo.", "Bad Photo.", 4, 8, enc.vocab, rng);
    const Eigen::MatrixXd pos0 = encode_prompt(p, PromptSide::Positive, enc);
    const Eigen::MatrixXd neg0 = encode_prompt(p, PromptSide::Negative, enc);
    p.context(2, 3) += 0.5;
    const Eigen::MatrixXd pos1 = encode_prompt(p, PromptSide::Positive, enc);
    const Eigen::MatrixXd neg1 = encode_prompt(p, PromptSide::Negative, enc);
    EXPECT_GT((pos1 - pos0).cwiseAbs().maxCoeff(), 1e-3);
    EXPECT_GT((neg1 - neg0).cwiseAbs().maxCoeff(), 1e-3);
    // Only the edited context row moves; the encoder is row-wise.
    EXPECT_TRUE(fixtures::bit_equal(pos1.topRows(3), pos0.topRows(3)));
    EXPECT_TRUE(fixtures::bit_equal(pos1.bottomRows(pos1.rows() - 4), pos0.bottomRows(pos0.rows() - 4)));
    // Same context rows in both prompts encode identically.
    EXPECT_TRUE(fixtures::bit_equal(pos1.middleRows(1, 4), neg1.middleRows(1, 4)));
}

TEST(TextEncoder, EncodingIsDeterministic) {
    Rng rng = derive_rng(9);
    const TextEncoder enc = TextEncoder::random(8, rng);
    const PromptPair p = build_prompt_pair("Good Photo.", "Bad Photo.", 4, 8, enc.vocab, rng);
    EXPECT_TRUE(fixtures::bit_equal(encode_prompt(p, PromptSide::Negative, enc), encode_prompt(p, PromptSide::Negative, enc)));
}

TEST(TextEncoder, WidthMismatchRejected) {
    Rng rng = derive_rng(10);
    const TextEncoder enc = TextEncoder::random(8, rng);
    const PromptPair p = build_prompt_pair("Good Photo.", "Bad Photo.", 4, 6, enc.vocab, rng);
    EXPECT_EQ(kind_of([&] { encode_prompt(p, PromptSide::Positive, enc); }), ErrorKind::ShapeMismatch);
}

class PromptModes : public ::testing::Test {
protected:
    void SetUp() override {
        bundle = build_toy_bundle(fixtures::tiny_config());
        Rng rng = derive_rng(11);
        z0 = Latent::standard_normal(4, 4, 4, rng);
        plan = plan_inference(bundle, rng);
    }
    ModelBundle bundle;
    Latent z0;
    ScorePlan plan;
};

TEST_F(PromptModes, AntonymScoreIsMeanOfBothSides) {
    ScoreTrace trace;
    const double s = score_latent(bundle, z0, plan, &trace);
    ASSERT_EQ(trace.timesteps.size(), plan.draws.size());
    double acc = 0.0;
    for (const TimestepTrace& t : trace.timesteps) {
        ASSERT_TRUE(t.g_neg.has_value());
        EXPECT_NEAR(t.score, 0.5 * (t.g_pos + *t.g_neg), 1e-15);
        acc += t.score;
    }
    EXPECT_NEAR(s, acc / static_cast<double>(trace.timesteps.size()), 1e-15);
}

TEST_F(PromptModes, SingleModeScoresPositivePromptOnly) {
    ScoreTrace antonym;
    score_latent(bundle, z0, plan, &antonym);
    ModelBundle single = bundle;
    single.prompts = single_prompt_mode(single.prompts);
    ScoreTrace trace;
    const double s = score_latent(single, z0, plan, &trace);
    double acc = 0.0;
    for (std::size_t i = 0; i < trace.timesteps.size(); ++i) {
        EXPECT_FALSE(trace.timesteps[i].g_neg.has_value());
        EXPECT_EQ(trace.timesteps[i].g_pos, antonym.timesteps[i].g_pos);
        acc += trace.timesteps[i].g_pos;
    }
    EXPECT_NEAR(s, acc / static_cast<double>(trace.timesteps.size()), 1e-15);
}

TEST_F(PromptModes, ConfigSwitchesAreIsolated) {
    RunConfig cfg = fixtures::tiny_config();
    cfg.prompt_trainable = false;
    const ModelBundle fixed = build_toy_bundle(cfg);
    const ParameterPartition part = partition_parameters(fixed);
    EXPECT_FALSE(part.is_trainable("context.tokens"));
    EXPECT_TRUE(part.is_trainable("block.0.k.lora_B"));
    EXPECT_EQ(fixed.prompts.mode, PromptMode::Antonym);
    // Freezing the context leaves its initial value and the scores untouched.
    EXPECT_TRUE(fixtures::bit_equal(fixed.prompts.context, bundle.prompts.context));
    EXPECT_EQ(score_latent(fixed, z0, plan), score_latent(bundle, z0, plan));

    cfg = fixtures::tiny_config();
    cfg.prompt_mode = "single";
    const ModelBundle single = build_toy_bundle(cfg);
    EXPECT_EQ(single.prompts.mode, PromptMode::Single);
    EXPECT_TRUE(partition_parameters(single).is_trainable("context.tokens"));
}
