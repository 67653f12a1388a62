#pragma once

// Plain numeric kernels shared by the public operations and the tape ops so
// there is exactly one implementation of each formula.

#include <cmath>

#include <Eigen/Dense>

namespace liqa::kernels {

using Mat = Eigen::MatrixXd;

inline Mat silu(const Mat& x) {
    return x.unaryExpr([](double v) { return v / (1.0 + std::exp(-v)); });
}

/// Row-wise softmax with per-row max subtraction.
inline Mat softmax_rows(const Mat& logits) {
    Mat out(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double mx = logits.row(i).maxCoeff();
        double sum = 0.0;
        for (Eigen::Index j = 0; j < logits.cols(); ++j) {
            const double e = std::exp(logits(i, j) - mx);
            out(i, j) = e;
            sum += e;
        }
        out.row(i) /= sum;
    }
    return out;
}

/// (1/lambda) log sum_n exp(lambda a_n), evaluated as
/// max + (1/lambda) log sum_n exp(lambda (a_n - max)).
template <typename Vec>
double lse_pool(const Vec& a, double lambda) {
    const double mx = a.maxCoeff();
    double sum = 0.0;
    for (Eigen::Index n = 0; n < a.size(); ++n) sum += std::exp(lambda * (a(n) - mx));
    return mx + std::log(sum) / lambda;
}

/// d lse_pool / d a: the softmax of lambda * a.
template <typename Vec>
Eigen::VectorXd lse_weights(const Vec& a, double lambda) {
    const double mx = a.maxCoeff();
    Eigen::VectorXd w(a.size());
    double sum = 0.0;
    for (Eigen::Index n = 0; n < a.size(); ++n) {
        w(n) = std::exp(lambda * (a(n) - mx));
        sum += w(n);
    }
    return w / sum;
}

/// 2x2 mean over a token-major (height*width) x channels map.
inline Mat avg_pool2(const Mat& x, int height, int width) {
    const int oh = height / 2;
    const int ow = width / 2;
    Mat out(static_cast<Eigen::Index>(oh) * ow, x.cols());
    for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
            const Eigen::Index r0 = static_cast<Eigen::Index>(2 * y) * width + 2 * xx;
            const Eigen::Index r1 = r0 + width;
            out.row(static_cast<Eigen::Index>(y) * ow + xx) =
                0.25 * (x.row(r0) + x.row(r0 + 1) + x.row(r1) + x.row(r1 + 1));
        }
    return out;
}

/// Nearest-neighbour 2x upsampling; (height, width) is the input grid.
inline Mat upsample2(const Mat& x, int height, int width) {
    const int oh = height * 2;
    const int ow = width * 2;
    Mat out(static_cast<Eigen::Index>(oh) * ow, x.cols());
    for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx)
            out.row(static_cast<Eigen::Index>(y) * ow + xx) = x.row(static_cast<Eigen::Index>(y / 2) * width + xx / 2);
    return out;
}

/// 3x3 zero-padded patches of a token-major latent: row (y*width + x) holds
/// the 9 neighbours x channels, ordered (dy, dx, c).
inline Mat im2col3(const Mat& x, int height, int width) {
    const Eigen::Index channels = x.cols();
    Mat out = Mat::Zero(static_cast<Eigen::Index>(height) * width, 9 * channels);
    for (int y = 0; y < height; ++y)
        for (int xx = 0; xx < width; ++xx) {
            const Eigen::Index row = static_cast<Eigen::Index>(y) * width + xx;
            int k = 0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx, ++k) {
                    const int sy = y + dy;
                    const int sx = xx + dx;
                    if (sy < 0 || sy >= height || sx < 0 || sx >= width) continue;
                    out.block(row, k * channels, 1, channels) = x.row(static_cast<Eigen::Index>(sy) * width + sx);
                }
        }
    return out;
}

} // namespace liqa::kernels
