#pragma once

// Rank and linear correlation between predictions and MOS.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"

namespace liqa {

/// True when every value equals the first up to a relative tolerance.
inline bool is_constant(std::span<const double> v, double rel_tol = 1e-12) {
    if (v.empty()) return true;
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    return (*hi - *lo) <= rel_tol * std::max(1.0, std::abs(mean));
}

/// 1-based fractional ranks; tied values share the mean of their positions.
inline std::vector<double> fractional_ranks(std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
        i = j + 1;
    }
    return ranks;
}

namespace metrics_detail {

inline double pearson_unchecked(std::span<const double> a, std::span<const double> b) {
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

inline void check_inputs(std::span<const double> pred, std::span<const double> mos, const char* what) {
    require(pred.size() == mos.size(), ErrorKind::ShapeMismatch, std::string(what) + ": length mismatch");
    require(pred.size() >= 2, ErrorKind::ShapeMismatch, std::string(what) + ": need at least two samples");
    require(!is_constant(pred), ErrorKind::Degenerate, std::string(what) + ": predictions are constant");
    require(!is_constant(mos), ErrorKind::Degenerate, std::string(what) + ": MOS values are constant");
}

} // namespace metrics_detail

inline double plcc(std::span<const double> pred, std::span<const double> mos) {
    metrics_detail::check_inputs(pred, mos, "plcc");
    return metrics_detail::pearson_unchecked(pred, mos);
}

inline double srcc(std::span<const double> pred, std::span<const double> mos) {
    metrics_detail::check_inputs(pred, mos, "srcc");
    const std::vector<double> rp = fractional_ranks(pred);
    const std::vector<double> rm = fractional_ranks(mos);
    return metrics_detail::pearson_unchecked(rp, rm);
}

/// Correlations that report a degenerate flag instead of raising.
struct Correlation {
    double srcc = 0.0;
    double plcc = 0.0;
    bool degenerate = false;
};

/// Optional monotone map applied to predictions before PLCC, e.g. a fitted
/// logistic. SRCC is computed on raw predictions regardless.
using MonotoneFit = std::function<std::vector<double>(std::span<const double> pred, std::span<const double> mos)>;

inline Correlation correlate(std::span<const double> pred, std::span<const double> mos, const MonotoneFit& fit = {}) {
    Correlation c;
    if (pred.size() < 2 || is_constant(pred) || is_constant(mos)) {
        c.degenerate = true;
        return c;
    }
    c.srcc = srcc(pred, mos);
    if (fit) {
        const std::vector<double> mapped = fit(pred, mos);
        if (is_constant(mapped)) {
            c.degenerate = true;
            return c;
        }
        c.plcc = plcc(mapped, mos);
    } else {
        c.plcc = plcc(pred, mos);
    }
    return c;
}

/// Least-squares affine map of predictions onto MOS; a minimal monotone fit.
inline std::vector<double> affine_fit(std::span<const double> pred, std::span<const double> mos) {
    const double n = static_cast<double>(pred.size());
    double mp = 0.0, mm = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        mp += pred[i];
        mm += mos[i];
    }
    mp /= n;
    mm /= n;
    double spm = 0.0, spp = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        spm += (pred[i] - mp) * (mos[i] - mm);
        spp += (pred[i] - mp) * (pred[i] - mp);
    }
    const double slope = spp > 0.0 ? spm / spp : 0.0;
    std::vector<double> out(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) out[i] = mm + slope * (pred[i] - mp);
    return out;
}

} // namespace liqa
