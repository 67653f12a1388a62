#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace liqa;

namespace {

struct Coordinate {
    std::string name;
    Eigen::Index row;
    Eigen::Index col;
};

Eigen::MatrixXd& parameter(ModelBundle& b, const std::string& name) {
    for (NamedParameter& p : b.parameters())
        if (p.name == name) return *p.value;
    throw Error(ErrorKind::MissingKey, name);
}

double central_difference(ModelBundle& b, const Coordinate& c, const std::function<double()>& f, double h) {
    double& x = parameter(b, c.name)(c.row, c.col);
    const double saved = x;
    x = saved + h;
    const double up = f();
    x = saved - h;
    const double down = f();
    x = saved;
    return (up - down) / (2.0 * h);
}

class GradientCheck : public ::testing::Test {
protected:
    void SetUp() override {
        RunConfig cfg = fixtures::tiny_config();
        cfg.train_query_weights = true;
        bundle = build_toy_bundle(cfg);
        fixtures::randomise_adapters(bundle, 0.3, 17);
        Rng rng = derive_rng(23);
        bundle.prompts.context = gaussian_matrix(bundle.prompts.context.rows(), bundle.prompts.context.cols(), 0.5, rng);
        z0 = bundle.codec->encode(fixtures::random_image(32, 32, rng));
        plan = plan_inference(bundle, rng);
        names = partition_parameters(bundle).trainable;
    }

    /// Last block's value projection never reaches a pooled map.
    bool structurally_zero(const std::string& name) const {
        return name.rfind("block." + std::to_string(bundle.readout.blocks.size() - 1) + ".v.", 0) == 0;
    }

    std::vector<Coordinate> sample_coordinates(int count, std::uint64_t seed) {
        std::vector<Coordinate> pool;
        for (const NamedConstParameter& p : std::as_const(bundle).parameters()) {
            if (std::find(names.begin(), names.end(), p.name) == names.end() || structurally_zero(p.name)) continue;
            for (Eigen::Index r = 0; r < p.value->rows(); ++r)
                for (Eigen::Index c = 0; c < p.value->cols(); ++c) pool.push_back({p.name, r, c});
        }
        Rng rng = derive_rng(seed);
        std::shuffle(pool.begin(), pool.end(), rng);
        pool.resize(std::min<std::size_t>(pool.size(), static_cast<std::size_t>(count)));
        return pool;
    }

    ModelBundle bundle;
    Latent z0;
    ScorePlan plan;
    std::vector<std::string> names;
};

} // namespace

TEST_F(GradientCheck, TrainableSetCoversAdaptersAndContext) {
    int lora = 0;
    for (const std::string& n : names) lora += n.find("lora") != std::string::npos;
    EXPECT_EQ(lora, 12);  // {q,k,v} x {A,B} x 2 blocks
    EXPECT_NE(std::find(names.begin(), names.end(), "context.tokens"), names.end());
}

TEST_F(GradientCheck, ScoreGradientMatchesCentralDifferences) {
    const ScoreGradient g = score_gradient(bundle, z0, plan, names);
    const std::vector<Coordinate> coords = sample_coordinates(60, 5);
    ASSERT_GE(coords.size(), 50u);
    std::set<std::string> touched;
    int checked = 0;
    for (const Coordinate& c : coords) {
        const double fd = central_difference(bundle, c, [&] { return score_latent(bundle, z0, plan); }, 1e-4);
        const double an = g.grads.at(c.name)(c.row, c.col);
        const double scale = std::max(std::abs(an), std::abs(fd));
        if (scale < 1e-9) {
            EXPECT_LT(std::abs(an - fd), 1e-9) << c.name;
            continue;
        }
        EXPECT_LT(std::abs(an - fd) / scale, 1e-3) << c.name << "(" << c.row << "," << c.col << ") analytic " << an
                                                   << " numeric " << fd;
        touched.insert(c.name);
        ++checked;
    }
    EXPECT_GE(checked, 50);
    EXPECT_GE(touched.size(), 8u);
}

TEST_F(GradientCheck, LastBlockValueGradientIsZero) {
    const ScoreGradient g = score_gradient(bundle, z0, plan, names);
    int seen = 0;
    for (const auto& [name, grad] : g.grads)
        if (structurally_zero(name)) {
            EXPECT_TRUE(grad.isZero(0.0)) << name;
            ++seen;
        }
    EXPECT_EQ(seen, 2);
}

TEST_F(GradientCheck, LossGradientMatchesCentralDifferences) {
    const TrainSample sample{"s", z0, 0.4};
    const std::vector<Eigen::MatrixXd*> params = trainable_parameters(bundle, partition_parameters(bundle));
    const SampleGradient sg = sample_gradient(bundle, sample, plan, params);
    std::map<const Eigen::MatrixXd*, std::size_t> index;
    for (std::size_t i = 0; i < params.size(); ++i) index[params[i]] = i;
    const ScoreWindow w = bundle.target_window();
    const auto loss = [&] {
        const double s = calibrated_score(score_latent(bundle, z0, plan), w) - sample.target;
        return s * s;
    };
    EXPECT_NEAR(sg.loss, loss(), 1e-12);
    for (const Coordinate& c : sample_coordinates(20, 9)) {
        const double fd = central_difference(bundle, c, loss, 1e-4);
        const double an = sg.grads[index.at(&parameter(bundle, c.name))](c.row, c.col);
        const double scale = std::max({std::abs(an), std::abs(fd), 1e-9});
        EXPECT_LT(std::abs(an - fd) / scale, 1e-3) << c.name;
    }
}

TEST_F(GradientCheck, UnknownParameterName) {
    EXPECT_THROW(score_gradient(bundle, z0, plan, {"block.9.k.lora_A"}), Error);
}
