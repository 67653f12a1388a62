#include <gtest/gtest.h>

#include <fstream>

#include "test_support.hpp"

using namespace liqa;

namespace {

const char* kManifest =
    "# dataset: unit\n"
    "# mos_scale: 1 5\n"
    "image_id\tpath\tmos\tsplit\n"
    "a\timages/a.ppm\t4.5\ttrain\n"
    "b\timages/b.ppm\t1\tval\n"
    "c\t/abs/c.ppm\t3.25\ttest\n";

void expect_error(const std::function<void()>& fn, ErrorKind kind, const std::string& fragment) {
    try {
        fn();
        ADD_FAILURE() << "no error raised";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), kind) << e.what();
        EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
    }
}

} // namespace

TEST(Manifest, ParsesHeaderMetadataAndRows) {
    Manifest m = parse_manifest(kManifest);
    EXPECT_EQ(m.dataset, "unit");
    EXPECT_EQ(m.mos_min, 1.0);
    EXPECT_EQ(m.mos_max, 5.0);
    ASSERT_EQ(m.records.size(), 3u);
    EXPECT_EQ(m.records[0], (DatasetRecord{"a", "images/a.ppm", 4.5, Split::Train}));
    EXPECT_EQ(m.records[1].split, Split::Val);
    EXPECT_EQ(m.records[2].split, Split::Test);
    m.base_dir = "/data";
    EXPECT_EQ(m.resolve(m.records[0]), std::filesystem::path("/data/images/a.ppm"));
    EXPECT_EQ(m.resolve(m.records[2]), std::filesystem::path("/abs/c.ppm"));
    EXPECT_EQ(m.subset(Split::Train).records.size(), 1u);
}

TEST(Manifest, RoundTripsThroughText) {
    const Manifest m = parse_manifest(kManifest);
    const Manifest again = parse_manifest(format_manifest(m));
    EXPECT_EQ(again.records, m.records);
    EXPECT_EQ(again.dataset, m.dataset);
    EXPECT_EQ(format_manifest(again), format_manifest(m));

    const auto dir = fixtures::temp_dir("manifest");
    write_manifest(m, dir / "sub" / "m.tsv");
    const Manifest loaded = load_manifest(dir / "sub" / "m.tsv");
    EXPECT_EQ(loaded.records, m.records);
    EXPECT_EQ(loaded.base_dir, dir / "sub");
}

TEST(Manifest, DuplicateIdRejected) {
    std::string text = kManifest;
    text += "a\timages/z.ppm\t2\ttest\n";
    expect_error([&] { parse_manifest(text); }, ErrorKind::Validation, "duplicate image_id 'a'");
}

TEST(Manifest, MosOutsideScaleRejected) {
    std::string text = kManifest;
    text += "d\timages/d.ppm\t7.5\ttest\n";
    expect_error([&] { parse_manifest(text); }, ErrorKind::Validation, "'d'");
}

TEST(Manifest, MalformedLinesReportLineNumber) {
    std::string text = kManifest;
    text += "e\timages/e.ppm\tgood\ttest\n";
    expect_error([&] { parse_manifest(text, "m.tsv"); }, ErrorKind::Parse, "m.tsv:7:");
    text = kManifest;
    text += "e\timages/e.ppm\t3\n";
    expect_error([&] { parse_manifest(text, "m.tsv"); }, ErrorKind::Parse, "m.tsv:7:");
    text = kManifest;
    text += "e\timages/e.ppm\t3\tholdout\n";
    expect_error([&] { parse_manifest(text, "m.tsv"); }, ErrorKind::Parse, "m.tsv:7:");
    expect_error([&] { parse_manifest("a\tb\tc\td\n", "m.tsv"); }, ErrorKind::Parse, "m.tsv:1:");
}

TEST(Manifest, MissingFileIsIoError) {
    expect_error([] { load_manifest("/nonexistent/manifest.tsv"); }, ErrorKind::Io, "/nonexistent/manifest.tsv");
}

TEST(Images, UnreadableFilesAreReported) {
    const auto dir = fixtures::temp_dir("images");
    std::ofstream(dir / "bad.ppm") << "P7\n1 1\n255\n";
    expect_error([&] { read_image(dir / "bad.ppm"); }, ErrorKind::Decode, "bad.ppm");
    expect_error([&] { read_image(dir / "none.ppm"); }, ErrorKind::Io, "none.ppm");
    std::ofstream(dir / "short.ppm", std::ios::binary) << "P6\n4 4\n255\nxyz";
    expect_error([&] { read_image(dir / "short.ppm"); }, ErrorKind::Decode, "truncated");
}

TEST(Images, PpmRoundTripAtEightBits) {
    const auto dir = fixtures::temp_dir("ppm");
    Rng rng = derive_rng(1);
    Image img = fixtures::random_image(7, 5, rng);
    for (float& v : img.data) v = std::round(v * 255.0f) / 255.0f;
    write_ppm(dir / "x.ppm", img);
    const Image back = read_image(dir / "x.ppm");
    ASSERT_EQ(back.width, 7);
    ASSERT_EQ(back.height, 5);
    for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_NEAR(back.data[i], img.data[i], 1e-6);
}

TEST(Images, AsciiGreyIsReplicated) {
    const auto dir = fixtures::temp_dir("pgm");
    std::ofstream(dir / "g.pgm") << "P2\n# comment\n2 1\n4\n0 4\n";
    const Image img = read_image(dir / "g.pgm");
    EXPECT_EQ(img.at(0, 0, 2), 0.0f);
    EXPECT_EQ(img.at(0, 1, 0), 1.0f);
    EXPECT_EQ(img.at(0, 1, 1), 1.0f);
}

TEST(Preprocess, SameSizeIsNoOp) {
    Rng rng = derive_rng(2);
    const Image img = fixtures::random_image(16, 16, rng);
    EXPECT_EQ(preprocess(img, 16).data, img.data);
}

TEST(Preprocess, ShapeConstantsAndDeterminism) {
    Rng rng = derive_rng(3);
    const Image img = fixtures::random_image(37, 21, rng);
    const Image a = preprocess(img, 32), b = preprocess(img, 32);
    EXPECT_EQ(a.width, 32);
    EXPECT_EQ(a.height, 32);
    EXPECT_EQ(a.data, b.data);
    Image flat(13, 9);
    std::fill(flat.data.begin(), flat.data.end(), 0.375f);
    for (float v : preprocess(flat, 32).data) EXPECT_FLOAT_EQ(v, 0.375f);
    EXPECT_THROW(preprocess(img, 0), Error);
}

TEST(Preprocess, BilinearMatchesHandComputedSample) {
    Image img(2, 1);
    for (int c = 0; c < 3; ++c) {
        img.at(0, 0, c) = 0.0f;
        img.at(0, 1, c) = 1.0f;
    }
    const Image up = resize_bilinear(img, 4, 1);
    // Centres map to -0.25, 0.25, 0.75, 1.25 -> clamped 0, 0.25, 0.75, 1.
    EXPECT_FLOAT_EQ(up.at(0, 0, 0), 0.0f);
    EXPECT_FLOAT_EQ(up.at(0, 1, 0), 0.25f);
    EXPECT_FLOAT_EQ(up.at(0, 2, 0), 0.75f);
    EXPECT_FLOAT_EQ(up.at(0, 3, 0), 1.0f);
}

TEST(Synthetic, MosIsLinearInLevel) {
    EXPECT_EQ(synthetic_mos(0, 15), 100.0);
    EXPECT_EQ(synthetic_mos(15, 15), 0.0);
    EXPECT_DOUBLE_EQ(synthetic_mos(5, 10), 50.0);
    for (int l = 1; l <= 15; ++l) EXPECT_LT(synthetic_mos(l, 15), synthetic_mos(l - 1, 15));
}

TEST(Synthetic, LevelZeroIsTheCleanScene) {
    Rng a = derive_rng(4), b = derive_rng(4);
    const Image clean = render_scene(32, a);
    for (Distortion d : {Distortion::GaussianBlur, Distortion::AdditiveNoise, Distortion::JpegBlocking})
        EXPECT_EQ(apply_distortion(clean, d, 0, b).data, clean.data) << to_string(d);
}

TEST(Synthetic, DistortionGrowsWithLevel) {
    Rng rng = derive_rng(5);
    const Image clean = render_scene(32, rng);
    const auto mse = [&](const Image& x) {
        double s = 0.0;
        for (std::size_t i = 0; i < x.data.size(); ++i) s += std::pow(x.data[i] - clean.data[i], 2);
        return s / static_cast<double>(x.data.size());
    };
    double prev = 0.0;
    for (int level : {1, 5, 15}) {
        const double e = mse(apply_distortion(clean, Distortion::GaussianBlur, level, rng));
        EXPECT_GT(e, prev) << level;
        prev = e;
    }
}

TEST(Synthetic, DatasetIsDeterministicWithSevenOneTwoSplit) {
    SyntheticSpec spec;
    spec.count = 40;
    spec.resolution = 16;
    spec.seed = 9;
    const auto d1 = fixtures::temp_dir("synth1"), d2 = fixtures::temp_dir("synth2");
    const Manifest a = generate_synthetic_dataset(spec, d1);
    const Manifest b = generate_synthetic_dataset(spec, d2);
    EXPECT_EQ(a.records, b.records);
    EXPECT_EQ(a.subset(Split::Train).records.size(), 28u);
    EXPECT_EQ(a.subset(Split::Val).records.size(), 4u);
    EXPECT_EQ(a.subset(Split::Test).records.size(), 8u);
    for (const DatasetRecord& r : a.records) {
        EXPECT_EQ(read_file_bytes(d1 / r.path), read_file_bytes(d2 / r.path)) << r.image_id;
        const double level = (100.0 - r.mos) / 100.0 * 15.0;
        EXPECT_NEAR(level, std::round(level), 1e-9);
    }
    const Manifest loaded = load_manifest(d1 / "manifest.tsv");
    EXPECT_EQ(loaded.records, a.records);
    const ImageSet set = load_images(loaded);
    for (const auto& img : set.images) {
        ASSERT_TRUE(img.has_value());
        EXPECT_EQ(img->width, 16);
    }
    spec.count = 5;
    EXPECT_THROW(generate_synthetic_dataset(spec, d1), Error);
}

TEST(Synthetic, DistortionNamesParse) {
    EXPECT_EQ(parse_distortion("gaussian_blur"), Distortion::GaussianBlur);
    EXPECT_EQ(to_string(parse_distortion("additive_noise")), "additive_noise");
    EXPECT_THROW(parse_distortion("fog"), Error);
}

TEST(Config, OverridesAndEnvironment) {
    RunConfig cfg;
    apply_config_text(cfg, "# comment\nlambda = 0.5\nepochs=3\n");
    EXPECT_EQ(cfg.lambda, 0.5);
    EXPECT_EQ(cfg.epochs, 3);
    apply_override(cfg, "train_timestep_range=(100,200]");
    EXPECT_EQ(cfg.train_timestep_range, (TimestepRange{100, 200}));
    EXPECT_THROW(apply_override(cfg, "no_such_key=1"), Error);
    EXPECT_THROW(apply_override(cfg, "epochs=three"), Error);
    EXPECT_THROW(apply_override(cfg, "epochs"), Error);
    EXPECT_EQ(env_key("adapter.blocks"), "LIQA_ADAPTER_BLOCKS");
    ::setenv("LIQA_BATCH_SIZE", "7", 1);
    apply_env_overrides(cfg);
    ::unsetenv("LIQA_BATCH_SIZE");
    EXPECT_EQ(cfg.batch_size, 7);
    RunConfig again;
    apply_config_text(again, cfg.to_text());
    EXPECT_EQ(again.to_map(), cfg.to_map());
}
