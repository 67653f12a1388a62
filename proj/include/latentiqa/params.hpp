#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "autodiff.hpp"

namespace liqa {

/// A named view onto a parameter matrix owned by some component.
struct NamedParameter {
    std::string name;
    Eigen::MatrixXd* value = nullptr;
};

struct NamedConstParameter {
    std::string name;
    const Eigen::MatrixXd* value = nullptr;
};

/// Binds parameter matrices onto a tape. Matrices registered as trainable
/// become differentiable leaves (one leaf per matrix per tape); everything
/// else enters as a constant.
class Binder {
public:
    explicit Binder(ad::Tape& tape) : tape_(tape) {}
    Binder(ad::Tape& tape, std::set<const Eigen::MatrixXd*> trainable)
        : tape_(tape), trainable_(std::move(trainable)) {}

    ad::Tape& tape() { return tape_; }

    ad::Var bind(const Eigen::MatrixXd& m) {
        if (!trainable_.contains(&m)) return tape_.constant(m);
        auto it = leaves_.find(&m);
        if (it != leaves_.end()) return it->second;
        ad::Var v = tape_.leaf(m, true);
        leaves_.emplace(&m, v);
        return v;
    }

    ad::Var constant(Eigen::MatrixXd m) { return tape_.constant(std::move(m)); }

    /// Gradient w.r.t. a bound trainable matrix (zero if it was never used).
    Eigen::MatrixXd gradient(const Eigen::MatrixXd& m) const {
        auto it = leaves_.find(&m);
        if (it == leaves_.end()) return Eigen::MatrixXd::Zero(m.rows(), m.cols());
        return tape_.grad(it->second);
    }

    bool tracks_gradients() const { return !trainable_.empty(); }

private:
    ad::Tape& tape_;
    std::set<const Eigen::MatrixXd*> trainable_;
    std::map<const Eigen::MatrixXd*, ad::Var> leaves_;
};

} // namespace liqa
