#pragma once

#include "fluid/core.hpp"

#include <string>
#include <unordered_map>
#include <vector>

namespace fluid {

/// Named dense parameter blocks with matching gradient accumulators and
/// Adam moment buffers. Blocks marked frozen (e.g. random Fourier features)
/// are serialized but never updated by the optimizer.
template <class S>
class ParamStore {
 public:
  struct Block {
    std::string name;
    MatX<S> value;
    MatX<S> grad;
    MatX<S> m;  // first moment
    MatX<S> v;  // second moment
    bool trainable = true;
  };

  int add(const std::string& name, Eigen::Index rows, Eigen::Index cols,
          bool trainable = true) {
    FLUID_REQUIRE(index_.find(name) == index_.end(),
                  "ParamStore: duplicate block name " + name);
    Block b;
    b.name = name;
    b.value = MatX<S>::Zero(rows, cols);
    b.grad = MatX<S>::Zero(rows, cols);
    b.m = MatX<S>::Zero(rows, cols);
    b.v = MatX<S>::Zero(rows, cols);
    b.trainable = trainable;
    blocks_.push_back(std::move(b));
    const int id = static_cast<int>(blocks_.size()) - 1;
    index_[name] = id;
    return id;
  }

  Block& operator[](int id) { return blocks_[static_cast<size_t>(id)]; }
  const Block& operator[](int id) const {
    return blocks_[static_cast<size_t>(id)];
  }

  MatX<S>& value(int id) { return blocks_[static_cast<size_t>(id)].value; }
  const MatX<S>& value(int id) const {
    return blocks_[static_cast<size_t>(id)].value;
  }
  MatX<S>& grad(int id) { return blocks_[static_cast<size_t>(id)].grad; }

  int find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }

  size_t size() const { return blocks_.size(); }
  const std::vector<Block>& blocks() const { return blocks_; }
  std::vector<Block>& blocks() { return blocks_; }

  std::int64_t step_count() const { return step_count_; }
  void set_step_count(std::int64_t s) { step_count_ = s; }

  void zero_grad() {
    for (auto& b : blocks_) b.grad.setZero();
  }

  /// Global L2 norm over all trainable gradients.
  double grad_norm() const {
    double sq = 0.0;
    for (const auto& b : blocks_)
      if (b.trainable) sq += static_cast<double>(b.grad.squaredNorm());
    return std::sqrt(sq);
  }

  void clip_grad_norm(double max_norm) {
    FLUID_REQUIRE(max_norm > 0.0, "clip_grad_norm: max_norm must be > 0");
    const double norm = grad_norm();
    if (norm > max_norm) {
      const S scale = static_cast<S>(max_norm / norm);
      for (auto& b : blocks_)
        if (b.trainable) b.grad *= scale;
    }
  }

  /// Bias-corrected Adam update; clears gradients afterwards.
  void adam_step(double lr, double beta1 = 0.9, double beta2 = 0.999,
                 double eps = 1e-8) {
    FLUID_REQUIRE(lr > 0.0, "adam_step: lr must be > 0");
    ++step_count_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count_));
    const S b1 = static_cast<S>(beta1);
    const S b2 = static_cast<S>(beta2);
    const S step = static_cast<S>(lr / bc1);
    const S inv_sqrt_bc2 = static_cast<S>(1.0 / std::sqrt(bc2));
    const S se = static_cast<S>(eps);
    for (auto& b : blocks_) {
      if (!b.trainable) continue;
      b.m = b1 * b.m + (S(1) - b1) * b.grad;
      b.v = b2 * b.v + (S(1) - b2) * b.grad.cwiseProduct(b.grad);
      b.value.array() -=
          step * b.m.array() /
          (b.v.array().sqrt() * inv_sqrt_bc2 + se);
      FLUID_CHECK(all_finite(b.value),
                  "adam_step: non-finite parameters in block " + b.name);
      b.grad.setZero();
    }
  }

 private:
  std::vector<Block> blocks_;
  std::unordered_map<std::string, int> index_;
  std::int64_t step_count_ = 0;
};

}  // namespace fluid
