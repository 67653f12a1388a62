#pragma once

// Procedural IQA dataset: textured scenes with shapes, each degraded at a
// level s from {0, ..., s_max} and labelled mos = 100 * (1 - s / s_max).

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "error.hpp"
#include "image.hpp"
#include "manifest.hpp"
#include "rng.hpp"

namespace liqa {

enum class Distortion { GaussianBlur, AdditiveNoise, JpegBlocking };

inline Distortion parse_distortion(const std::string& s) {
    if (s == "gaussian_blur" || s == "blur") return Distortion::GaussianBlur;
    if (s == "additive_noise" || s == "noise") return Distortion::AdditiveNoise;
    if (s == "jpeg" || s == "jpeg_blocking" || s == "jpeg-like") return Distortion::JpegBlocking;
    fail(ErrorKind::InvalidConfig, "unknown distortion '" + s + "' (gaussian_blur, additive_noise, jpeg)");
}

inline std::string to_string(Distortion d) {
    switch (d) {
    case Distortion::GaussianBlur: return "gaussian_blur";
    case Distortion::AdditiveNoise: return "additive_noise";
    case Distortion::JpegBlocking: return "jpeg";
    }
    return "gaussian_blur";
}

inline double synthetic_mos(int level, int max_level) {
    return 100.0 * (1.0 - static_cast<double>(level) / static_cast<double>(max_level));
}

namespace synthetic_detail {

struct Grating {
    double fx, fy, phase, amp;
    double colour[3];
};

/// Broadband texture: gratings with log-uniform frequencies in
/// [0.03, 0.45] cycles/pixel and random orientation, phase and tint.
inline std::vector<Grating> random_texture(int count, double amp, Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<Grating> out;
    for (int k = 0; k < count; ++k) {
        const double freq = 0.03 * std::pow(0.45 / 0.03, u(rng));
        const double angle = std::numbers::pi * u(rng);
        Grating g{freq * std::cos(angle), freq * std::sin(angle), 2 * std::numbers::pi * u(rng), amp, {}};
        for (double& c : g.colour) c = 0.6 + 0.4 * u(rng);
        out.push_back(g);
    }
    return out;
}

inline double texture_at(const std::vector<Grating>& tex, int c, int x, int y) {
    double v = 0.0;
    for (const Grating& g : tex) v += g.amp * g.colour[c] * std::sin(2 * std::numbers::pi * (g.fx * x + g.fy * y) + g.phase);
    return v;
}

} // namespace synthetic_detail

/// Broadband grating texture over a tinted background with a few
/// hard-edged discs and rectangles carrying their own texture.
inline Image render_scene(int size, Rng& rng) {
    using namespace synthetic_detail;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Image img(size, size);
    double base[3];
    for (double& c : base) c = 0.35 + 0.3 * u(rng);
    const std::vector<Grating> background = random_texture(16, 0.06, rng);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>(base[c] + texture_at(background, c, x, y));

    const int n_shapes = 2 + static_cast<int>(u(rng) * 4);
    for (int k = 0; k < n_shapes; ++k) {
        const double cx = u(rng) * size, cy = u(rng) * size;
        const double r = size * (0.08 + 0.17 * u(rng));
        const bool disc = u(rng) < 0.5;
        double colour[3];
        for (double& c : colour) c = 0.25 + 0.5 * u(rng);
        const std::vector<Grating> tex = random_texture(8, 0.07, rng);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                const double dx = x - cx, dy = y - cy;
                const bool inside = disc ? (dx * dx + dy * dy <= r * r) : (std::abs(dx) <= r && std::abs(dy) <= 0.6 * r);
                if (!inside) continue;
                for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>(colour[c] + texture_at(tex, c, x, y));
            }
    }
    for (float& v : img.data) v = std::clamp(v, 0.0f, 1.0f);
    return img;
}

inline Image gaussian_blur(const Image& src, double sigma) {
    if (sigma <= 0.0) return src;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double total = 0.0;
    for (int i = -radius; i <= radius; ++i) total += k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (double& w : k) w /= total;
    const auto clampi = [](int v, int hi) { return std::clamp(v, 0, hi - 1); };
    Image tmp(src.width, src.height), out(src.width, src.height);
    for (int y = 0; y < src.height; ++y)
        for (int x = 0; x < src.width; ++x)
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i) acc += k[static_cast<std::size_t>(i + radius)] * src.at(y, clampi(x + i, src.width), c);
                tmp.at(y, x, c) = static_cast<float>(acc);
            }
    for (int y = 0; y < src.height; ++y)
        for (int x = 0; x < src.width; ++x)
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i) acc += k[static_cast<std::size_t>(i + radius)] * tmp.at(clampi(y + i, src.height), x, c);
                out.at(y, x, c) = static_cast<float>(acc);
            }
    return out;
}

inline Image additive_noise(const Image& src, double sigma, Rng& rng) {
    Image out = src;
    std::normal_distribution<double> n(0.0, 1.0);
    for (float& v : out.data) v = static_cast<float>(std::clamp(v + sigma * n(rng), 0.0, 1.0));
    return out;
}

/// 8x8 DCT per channel with frequency-dependent uniform quantisation.
inline Image jpeg_blocking(const Image& src, double step) {
    if (step <= 0.0) return src;
    constexpr int B = 8;
    double basis[B][B];
    for (int u = 0; u < B; ++u)
        for (int x = 0; x < B; ++x)
            basis[u][x] = (u == 0 ? std::sqrt(1.0 / B) : std::sqrt(2.0 / B)) * std::cos((2 * x + 1) * u * std::numbers::pi / (2 * B));
    Image out = src;
    for (int by = 0; by + B <= src.height; by += B)
        for (int bx = 0; bx + B <= src.width; bx += B)
            for (int c = 0; c < 3; ++c) {
                double coef[B][B] = {};
                for (int u = 0; u < B; ++u)
                    for (int v = 0; v < B; ++v) {
                        double acc = 0.0;
                        for (int y = 0; y < B; ++y)
                            for (int x = 0; x < B; ++x) acc += basis[u][y] * basis[v][x] * (src.at(by + y, bx + x, c) - 0.5);
                        const double q = step * (1.0 + u + v);
                        coef[u][v] = q * std::round(acc / q);
                    }
                for (int y = 0; y < B; ++y)
                    for (int x = 0; x < B; ++x) {
                        double acc = 0.0;
                        for (int u = 0; u < B; ++u)
                            for (int v = 0; v < B; ++v) acc += basis[u][y] * basis[v][x] * coef[u][v];
                        out.at(by + y, bx + x, c) = static_cast<float>(std::clamp(acc + 0.5, 0.0, 1.0));
                    }
            }
    return out;
}

inline Image apply_distortion(const Image& img, Distortion d, int level, Rng& rng) {
    switch (d) {
    case Distortion::GaussianBlur: return gaussian_blur(img, 0.2 * level);
    case Distortion::AdditiveNoise: return additive_noise(img, 0.02 * level, rng);
    case Distortion::JpegBlocking: return jpeg_blocking(img, 0.02 * level);
    }
    return img;
}

struct SyntheticSpec {
    int count = 500;
    Distortion distortion = Distortion::GaussianBlur;
    int levels = 16;  // levels 0 .. levels-1
    int resolution = 128;
    std::uint64_t seed = 0;
};

/// Writes images/<id>.ppm and manifest.tsv under out_dir and returns the
/// manifest (paths relative to out_dir).
inline Manifest generate_synthetic_dataset(const SyntheticSpec& spec, const std::filesystem::path& out_dir) {
    require(spec.count >= 10, ErrorKind::InvalidConfig, "synthetic dataset needs at least 10 images");
    require(spec.levels >= 2, ErrorKind::InvalidConfig, "need at least two distortion levels");
    const int max_level = spec.levels - 1;
    std::filesystem::create_directories(out_dir / "images");

    Manifest m;
    m.dataset = "synthetic-" + to_string(spec.distortion);
    m.mos_min = 0.0;
    m.mos_max = 100.0;
    m.base_dir = out_dir;

    Rng split_rng = derive_rng(spec.seed, {11});
    std::vector<std::size_t> order(static_cast<std::size_t>(spec.count));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), split_rng);
    const auto n_train = static_cast<std::size_t>(std::lround(0.7 * spec.count));
    const auto n_val = static_cast<std::size_t>(std::lround(0.1 * spec.count));
    std::vector<Split> split(order.size(), Split::Test);
    for (std::size_t k = 0; k < order.size(); ++k)
        split[order[k]] = k < n_train ? Split::Train : (k < n_train + n_val ? Split::Val : Split::Test);

    for (int i = 0; i < spec.count; ++i) {
        Rng rng = derive_rng(spec.seed, {10, static_cast<std::uint64_t>(i)});
        const int level = std::uniform_int_distribution<int>(0, max_level)(rng);
        const Image clean = render_scene(spec.resolution, rng);
        const Image img = apply_distortion(clean, spec.distortion, level, rng);
        char id[32];
        std::snprintf(id, sizeof(id), "img_%04d", i);
        const std::string rel = std::string("images/") + id + ".ppm";
        write_ppm(out_dir / rel, img);
        m.records.push_back(DatasetRecord{id, rel, synthetic_mos(level, max_level), split[static_cast<std::size_t>(i)]});
    }
    write_manifest(m, out_dir / "manifest.tsv");
    return m;
}

} // namespace liqa
