#pragma once

// Minimal reverse-mode differentiation over dense matrices. A Tape records
// every intermediate value; nodes that do not depend on a trainable leaf carry
// no backward closure, so frozen parts of the network cost a plain forward.

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "error.hpp"
#include "kernels.hpp"

namespace liqa::ad {

using Mat = Eigen::MatrixXd;

class Tape;

struct Var {
    Tape* tape = nullptr;
    int id = -1;

    const Mat& value() const;
    bool requires_grad() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    double scalar() const { return value()(0, 0); }
};

class Tape {
public:
    using Backward = std::function<void(Tape&, const Mat&)>;

    Tape() { nodes_.reserve(256); }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Mat value) { return push(std::move(value), false, nullptr); }
    Var leaf(Mat value, bool requires_grad) { return push(std::move(value), requires_grad, nullptr); }

    Var push(Mat value, bool requires_grad, Backward back) {
        nodes_.push_back(Node{std::move(value), Mat(), requires_grad, std::move(back)});
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    const Mat& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

    /// Gradient accumulated on a node after backward(); zero if it never
    /// received any.
    Mat grad(Var v) const {
        const Node& n = nodes_[static_cast<std::size_t>(v.id)];
        if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
        return n.grad;
    }

    void accumulate(Var v, const Mat& g) {
        Node& n = nodes_[static_cast<std::size_t>(v.id)];
        if (!n.requires_grad) return;
        if (n.grad.size() == 0)
            n.grad = g;
        else
            n.grad += g;
    }

    /// Seeds d(root)/d(root) = 1 for a 1x1 root and propagates in reverse
    /// creation order.
    void backward(Var root) {
        require(root.rows() == 1 && root.cols() == 1, ErrorKind::ShapeMismatch, "backward root must be scalar");
        if (!requires_grad(root.id)) return;
        nodes_[static_cast<std::size_t>(root.id)].grad = Mat::Ones(1, 1);
        for (int id = root.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (!n.back || n.grad.size() == 0) continue;
            const Mat g = n.grad;
            n.back(*this, g);
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Mat value;
        Mat grad;
        bool requires_grad;
        Backward back;
    };
    std::vector<Node> nodes_;
};

inline const Mat& Var::value() const { return tape->value(id); }
inline bool Var::requires_grad() const { return tape->requires_grad(id); }

namespace detail {
inline void same_tape(Var a, Var b) {
    require(a.tape == b.tape, ErrorKind::ShapeMismatch, "variables recorded on different tapes");
}
} // namespace detail

inline Var matmul(Var a, Var b) {
    detail::same_tape(a, b);
    require(a.cols() == b.rows(), ErrorKind::ShapeMismatch, "matmul inner dimensions differ");
    Tape& t = *a.tape;
    const bool rg = a.requires_grad() || b.requires_grad();
    Mat out = a.value() * b.value();
    if (!rg) return t.constant(std::move(out));
    return t.push(std::move(out), true, [a, b](Tape& tp, const Mat& g) {
        if (a.requires_grad()) tp.accumulate(a, g * b.value().transpose());
        if (b.requires_grad()) tp.accumulate(b, a.value().transpose() * g);
    });
}

/// a * b^T
inline Var matmul_nt(Var a, Var b) {
    detail::same_tape(a, b);
    require(a.cols() == b.cols(), ErrorKind::ShapeMismatch, "matmul_nt inner dimensions differ");
    Tape& t = *a.tape;
    const bool rg = a.requires_grad() || b.requires_grad();
    Mat out = a.value() * b.value().transpose();
    if (!rg) return t.constant(std::move(out));
    return t.push(std::move(out), true, [a, b](Tape& tp, const Mat& g) {
        if (a.requires_grad()) tp.accumulate(a, g * b.value());
        if (b.requires_grad()) tp.accumulate(b, g.transpose() * a.value());
    });
}

inline Var add(Var a, Var b) {
    detail::same_tape(a, b);
    require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorKind::ShapeMismatch, "add shapes differ");
    Tape& t = *a.tape;
    Mat out = a.value() + b.value();
    if (!a.requires_grad() && !b.requires_grad()) return t.constant(std::move(out));
    return t.push(std::move(out), true, [a, b](Tape& tp, const Mat& g) {
        tp.accumulate(a, g);
        tp.accumulate(b, g);
    });
}

/// Adds a 1 x cols row to every row of a.
inline Var add_row(Var a, Var row) {
    detail::same_tape(a, row);
    require(row.rows() == 1 && row.cols() == a.cols(), ErrorKind::ShapeMismatch, "row broadcast shape");
    Tape& t = *a.tape;
    Mat out = a.value().rowwise() + row.value().row(0);
    if (!a.requires_grad() && !row.requires_grad()) return t.constant(std::move(out));
    return t.push(std::move(out), true, [a, row](Tape& tp, const Mat& g) {
        tp.accumulate(a, g);
        tp.accumulate(row, g.colwise().sum());
    });
}

inline Var scale(Var a, double c) {
    Tape& t = *a.tape;
    Mat out = c * a.value();
    if (!a.requires_grad()) return t.constant(std::move(out));
    return t.push(std::move(out), true, [a, c](Tape& tp, const Mat& g) { tp.accumulate(a, c * g); });
}

/// a / n, elementwise.
inline Var divide(Var a, double n) {
    Tape& t = *a.tape;
    Mat out = a.value() / n;
    if (!a.requires_grad()) return t.constant(std::move(out));
    return t.push(std::move(out), true, [a, n](Tape& tp, const Mat& g) { tp.accumulate(a, g / n); });
}

/// mul * a + shift, elementwise.
inline Var affine(Var a, double mul, double shift) {
    Tape& t = *a.tape;
    Mat out = (mul * a.value()).array() + shift;
    if (!a.requires_grad()) return t.constant(std::move(out));
    return t.push(std::move(out), true, [a, mul](Tape& tp, const Mat& g) { tp.accumulate(a, mul * g); });
}

inline Var square(Var a) {
    Tape& t = *a.tape;
    Mat out = a.value().array().square();
    if (!a.requires_grad()) return t.constant(std::move(out));
    return t.push(std::move(out), true, [a](Tape& tp, const Mat& g) {
        tp.accumulate(a, (2.0 * g.array() * a.value().array()).matrix());
    });
}

inline Var silu(Var a) {
    Tape& t = *a.tape;
    Mat out = kernels::silu(a.value());
    if (!a.requires_grad()) return t.constant(std::move(out));
    return t.push(std::move(out), true, [a](Tape& tp, const Mat& g) {
        const Mat& x = a.value();
        Mat d(x.rows(), x.cols());
        for (Eigen::Index j = 0; j < x.cols(); ++j)
            for (Eigen::Index i = 0; i < x.rows(); ++i) {
                const double s = 1.0 / (1.0 + std::exp(-x(i, j)));
                d(i, j) = g(i, j) * s * (1.0 + x(i, j) * (1.0 - s));
            }
        tp.accumulate(a, d);
    });
}

inline Var softmax_rows(Var a) {
    Tape& t = *a.tape;
    Mat out = kernels::softmax_rows(a.value());
    if (!a.requires_grad()) return t.constant(std::move(out));
    const int self = static_cast<int>(t.size());
    return t.push(std::move(out), true, [a, self](Tape& tp, const Mat& g) {
        const Mat& s = tp.value(self);
        const Eigen::VectorXd dots = (g.array() * s.array()).rowwise().sum();
        Mat d = s.array() * (g.colwise() - dots).array();
        tp.accumulate(a, d);
    });
}

/// (1/cols) * sum over columns of the column log-sum-exp with sharpness
/// lambda. Returns a 1x1 value.
inline Var lse_pool_mean(Var a, double lambda) {
    Tape& t = *a.tape;
    const Mat& v = a.value();
    double total = 0.0;
    for (Eigen::Index m = 0; m < v.cols(); ++m) total += kernels::lse_pool(v.col(m), lambda);
    Mat out(1, 1);
    out(0, 0) = total / static_cast<double>(v.cols());
    if (!a.requires_grad()) return t.constant(std::move(out));
    return t.push(std::move(out), true, [a, lambda](Tape& tp, const Mat& g) {
        const Mat& x = a.value();
        Mat d(x.rows(), x.cols());
        for (Eigen::Index m = 0; m < x.cols(); ++m) d.col(m) = kernels::lse_weights(x.col(m), lambda);
        tp.accumulate(a, d * (g(0, 0) / static_cast<double>(x.cols())));
    });
}

/// (1/cols) * sum over columns of the column mean. Returns a 1x1 value.
inline Var mean_pool_mean(Var a) {
    Tape& t = *a.tape;
    const Mat& v = a.value();
    double total = 0.0;
    for (Eigen::Index m = 0; m < v.cols(); ++m) total += v.col(m).mean();
    Mat out(1, 1);
    out(0, 0) = total / static_cast<double>(v.cols());
    if (!a.requires_grad()) return t.constant(std::move(out));
    return t.push(std::move(out), true, [a](Tape& tp, const Mat& g) {
        const double c = g(0, 0) / static_cast<double>(a.rows() * a.cols());
        tp.accumulate(a, Mat::Constant(a.rows(), a.cols(), c));
    });
}

inline Var concat_rows(std::span<const Var> parts) {
    require(!parts.empty(), ErrorKind::ShapeMismatch, "concat of nothing");
    Tape& t = *parts.front().tape;
    Eigen::Index rows = 0;
    const Eigen::Index cols = parts.front().cols();
    bool rg = false;
    for (const Var& p : parts) {
        require(p.cols() == cols, ErrorKind::ShapeMismatch, "concat column counts differ");
        rows += p.rows();
        rg = rg || p.requires_grad();
    }
    Mat out(rows, cols);
    Eigen::Index r = 0;
    for (const Var& p : parts) {
        out.middleRows(r, p.rows()) = p.value();
        r += p.rows();
    }
    if (!rg) return t.constant(std::move(out));
    std::vector<Var> copy(parts.begin(), parts.end());
    return t.push(std::move(out), true, [copy](Tape& tp, const Mat& g) {
        Eigen::Index row = 0;
        for (const Var& p : copy) {
            if (p.requires_grad()) tp.accumulate(p, g.middleRows(row, p.rows()));
            row += p.rows();
        }
    });
}

/// 2x2 average pooling of a token-major (height*width) x channels map.
inline Var avg_pool2(Var a, int height, int width) {
    require(a.rows() == static_cast<Eigen::Index>(height) * width && height % 2 == 0 && width % 2 == 0,
            ErrorKind::ShapeMismatch, "avg_pool2 needs an even grid matching the token count");
    Tape& t = *a.tape;
    Mat out = kernels::avg_pool2(a.value(), height, width);
    if (!a.requires_grad()) return t.constant(std::move(out));
    return t.push(std::move(out), true, [a, height, width](Tape& tp, const Mat& g) {
        tp.accumulate(a, 0.25 * kernels::upsample2(g, height / 2, width / 2));
    });
}

/// Nearest-neighbour 2x upsampling of a token-major map.
inline Var upsample2(Var a, int height, int width) {
    require(a.rows() == static_cast<Eigen::Index>(height) * width, ErrorKind::ShapeMismatch,
            "upsample2 grid does not match the token count");
    Tape& t = *a.tape;
    Mat out = kernels::upsample2(a.value(), height, width);
    if (!a.requires_grad()) return t.constant(std::move(out));
    return t.push(std::move(out), true, [a, height, width](Tape& tp, const Mat& g) {
        tp.accumulate(a, 4.0 * kernels::avg_pool2(g, 2 * height, 2 * width));
    });
}

inline Var sum_scalars(std::span<const Var> parts) {
    require(!parts.empty(), ErrorKind::ShapeMismatch, "sum of nothing");
    Var acc = parts.front();
    for (std::size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
    return acc;
}

inline Var mean_scalars(std::span<const Var> parts) {
    return divide(sum_scalars(parts), static_cast<double>(parts.size()));
}

} // namespace liqa::ad
