#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "error.hpp"
#include "rng.hpp"

namespace liqa {

/// Image latent of shape channels x height x width. Values are stored
/// token-major: row `y * width + x`, column `c`.
struct Latent {
    int channels = 0;
    int height = 0;
    int width = 0;
    Eigen::MatrixXd values;

    Latent() = default;
    Latent(int c, int h, int w) : channels(c), height(h), width(w), values(Eigen::MatrixXd::Zero(h * w, c)) {}

    int tokens() const { return height * width; }
    double& at(int c, int y, int x) { return values(y * width + x, c); }
    double at(int c, int y, int x) const { return values(y * width + x, c); }

    bool same_shape(const Latent& o) const {
        return channels == o.channels && height == o.height && width == o.width;
    }
    bool all_finite() const { return values.allFinite(); }

    static Latent standard_normal(int c, int h, int w, Rng& rng) {
        Latent z(c, h, w);
        z.values = gaussian_matrix(h * w, c, 1.0, rng);
        return z;
    }
};

/// Variance schedule of the forward process. Timesteps are 1-indexed:
/// `alpha_bar(t)` for t in [1, T].
class NoiseSchedule {
public:
    NoiseSchedule() = default;

    explicit NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
        require(!betas_.empty(), ErrorKind::InvalidBounds, "schedule needs at least one timestep");
        alphas_.reserve(betas_.size());
        alpha_bars_.reserve(betas_.size());
        double prod = 1.0;
        for (double b : betas_) {
            require(b > 0.0 && b < 1.0, ErrorKind::InvalidBounds, "beta must lie in (0, 1)");
            const double a = 1.0 - b;
            prod *= a;
            alphas_.push_back(a);
            alpha_bars_.push_back(prod);
        }
    }

    int total_timesteps() const { return static_cast<int>(betas_.size()); }

    double beta(int t) const { return betas_[index(t)]; }
    double alpha(int t) const { return alphas_[index(t)]; }
    double alpha_bar(int t) const { return alpha_bars_[index(t)]; }

    const std::vector<double>& betas() const { return betas_; }
    const std::vector<double>& alphas() const { return alphas_; }
    const std::vector<double>& alpha_bars() const { return alpha_bars_; }

    void check_timestep(int t) const {
        require(t >= 1 && t <= total_timesteps(), ErrorKind::TimestepOutOfRange,
                "timestep " + std::to_string(t) + " outside [1, " + std::to_string(total_timesteps()) + "]");
    }

private:
    std::size_t index(int t) const {
        check_timestep(t);
        return static_cast<std::size_t>(t - 1);
    }

    std::vector<double> betas_;
    std::vector<double> alphas_;
    std::vector<double> alpha_bars_;
};

inline NoiseSchedule build_linear_schedule(int total_timesteps, double beta_start, double beta_end) {
    require(total_timesteps >= 1, ErrorKind::InvalidBounds, "total_timesteps must be >= 1");
    require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0, ErrorKind::InvalidBounds,
            "need 0 < beta_start <= beta_end < 1");
    std::vector<double> betas(static_cast<std::size_t>(total_timesteps));
    if (total_timesteps == 1) {
        betas[0] = beta_start;
    } else {
        const double step = (beta_end - beta_start) / static_cast<double>(total_timesteps - 1);
        for (int i = 0; i < total_timesteps; ++i) betas[static_cast<std::size_t>(i)] = beta_start + step * i;
        betas.back() = beta_end;
    }
    return NoiseSchedule(std::move(betas));
}

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
inline Latent forward_noise(const Latent& z0, int t, const Latent& eps, const NoiseSchedule& schedule) {
    require(z0.same_shape(eps), ErrorKind::ShapeMismatch, "eps must have the latent's shape");
    const double abar = schedule.alpha_bar(t);
    Latent out(z0.channels, z0.height, z0.width);
    out.values = std::sqrt(abar) * z0.values + std::sqrt(1.0 - abar) * eps.values;
    return out;
}

/// Half-open integer interval (lo, hi].
struct TimestepRange {
    int lo = 0;
    int hi = 100;

    int size() const { return hi - lo; }
    bool contains(int t) const { return t > lo && t <= hi; }
    friend bool operator==(const TimestepRange&, const TimestepRange&) = default;
};

/// Parses "(0,100]", "[100,200]", "0-100" (read as (0,100]). A closed lower
/// bound [a, is stored as (a-1.
inline TimestepRange parse_timestep_range(const std::string& text) {
    std::string s;
    for (char c : text)
        if (c != ' ') s += c;
    require(!s.empty(), ErrorKind::Parse, "empty timestep range");
    bool closed_lo = false;
    if (s.front() == '(' || s.front() == '[') {
        closed_lo = s.front() == '[';
        require(s.back() == ']' || s.back() == ')', ErrorKind::Parse, "bad timestep range '" + text + "'");
        require(s.back() == ']', ErrorKind::Parse, "upper bound must be inclusive in '" + text + "'");
        s = s.substr(1, s.size() - 2);
    }
    auto sep = s.find(',');
    if (sep == std::string::npos) sep = s.find('-');
    require(sep != std::string::npos, ErrorKind::Parse, "bad timestep range '" + text + "'");
    TimestepRange r;
    try {
        r.lo = std::stoi(s.substr(0, sep));
        r.hi = std::stoi(s.substr(sep + 1));
    } catch (const std::exception&) {
        fail(ErrorKind::Parse, "bad timestep range '" + text + "'");
    }
    if (closed_lo) r.lo -= 1;
    return r;
}

inline std::string format_timestep_range(const TimestepRange& r) {
    return "(" + std::to_string(r.lo) + "," + std::to_string(r.hi) + "]";
}

enum class TimestepMode { UniformRange, FixedList };

struct TimestepPolicy {
    TimestepMode mode = TimestepMode::UniformRange;
    TimestepRange range{0, 100};
    int count = 8;
    std::vector<int> fixed;

    void validate(int total_timesteps) const {
        if (mode == TimestepMode::UniformRange) {
            require(range.lo >= 0 && range.lo < range.hi && range.hi <= total_timesteps, ErrorKind::InvalidBounds,
                    "timestep range " + format_timestep_range(range) + " must satisfy 0 <= lo < hi <= T");
        } else {
            require(!fixed.empty(), ErrorKind::InvalidBounds, "fixed timestep list is empty");
            for (int t : fixed)
                require(t >= 1 && t <= total_timesteps, ErrorKind::TimestepOutOfRange,
                        "fixed timestep " + std::to_string(t) + " out of range");
        }
        require(count >= 1, ErrorKind::InvalidBounds, "timestep count must be >= 1");
    }
};

inline int sample_timestep(const TimestepPolicy& policy, Rng& rng) {
    if (policy.mode == TimestepMode::FixedList) {
        std::uniform_int_distribution<std::size_t> pick(0, policy.fixed.size() - 1);
        return policy.fixed[pick(rng)];
    }
    std::uniform_int_distribution<int> dist(policy.range.lo + 1, policy.range.hi);
    return dist(rng);
}

/// Deterministic, evenly spaced timesteps: the midpoints of `count` equal
/// sub-intervals of (lo, hi], rounded down onto the integer grid.
inline std::vector<int> evenly_spaced_timesteps(const TimestepRange& range, int count) {
    require(count >= 1 && range.hi > range.lo, ErrorKind::InvalidBounds, "bad even-spacing request");
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(count));
    const long long width = range.hi - range.lo;
    for (int k = 0; k < count; ++k)
        out.push_back(range.lo + 1 + static_cast<int>(((2LL * k + 1) * width) / (2LL * count)));
    return out;
}

enum class TimestepSpacing { Even, Random };

/// Timesteps used to average the score at inference.
inline std::vector<int> inference_timesteps(const TimestepPolicy& policy, TimestepSpacing spacing, Rng& rng) {
    if (policy.mode == TimestepMode::FixedList) {
        if (spacing == TimestepSpacing::Even) return policy.fixed;
        std::vector<int> out;
        for (int k = 0; k < policy.count; ++k) out.push_back(sample_timestep(policy, rng));
        return out;
    }
    if (spacing == TimestepSpacing::Even) return evenly_spaced_timesteps(policy.range, policy.count);
    std::vector<int> out;
    for (int k = 0; k < policy.count; ++k) out.push_back(sample_timestep(policy, rng));
    return out;
}

inline std::vector<int> multi_step_timesteps(int t_start, int steps, int delta) {
    require(steps >= 1 && delta >= 1, ErrorKind::InvalidBounds, "steps and delta must be positive");
    require(t_start - static_cast<long long>(steps - 1) * delta >= 1, ErrorKind::Underflow,
            "chain from t=" + std::to_string(t_start) + " with " + std::to_string(steps) + " steps of " +
                std::to_string(delta) + " reaches t < 1");
    std::vector<int> out;
    for (int k = 0; k < steps; ++k) out.push_back(t_start - k * delta);
    return out;
}

} // namespace liqa
