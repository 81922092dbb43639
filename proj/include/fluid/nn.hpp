#pragma once

#include "fluid/core.hpp"
#include "fluid/param_store.hpp"

#include <string>
#include <vector>

namespace fluid {

// Batched layers: rows are batch elements. Backward passes accumulate
// parameter gradients into the store and return input gradients.

template <class S>
MatX<S> silu(const MatX<S>& x) {
  return x.array() / (S(1) + (-x.array()).exp());
}

template <class S>
MatX<S> silu_grad(const MatX<S>& x) {
  const auto sig = (S(1) / (S(1) + (-x.array()).exp())).eval();
  return sig * (S(1) + x.array() * (S(1) - sig));
}

/// y = x W^T + b, with W stored (out x in) and b (out x 1).
template <class S>
struct Linear {
  int w = -1;
  int b = -1;
  Eigen::Index in = 0, out = 0;

  static Linear create(ParamStore<S>& store, const std::string& prefix,
                       Eigen::Index in, Eigen::Index out, Rng* init_rng,
                       double init_scale) {
    Linear lin;
    lin.in = in;
    lin.out = out;
    lin.w = store.add(prefix + ".w", out, in);
    lin.b = store.add(prefix + ".b", out, 1);
    if (init_rng != nullptr && init_scale != 0.0) {
      auto& W = store.value(lin.w);
      for (Eigen::Index j = 0; j < W.cols(); ++j)
        for (Eigen::Index i = 0; i < W.rows(); ++i)
          W(i, j) = static_cast<S>(init_rng->uniform(-init_scale, init_scale));
    }
    return lin;
  }

  MatX<S> forward(const ParamStore<S>& store, const MatX<S>& x) const {
    FLUID_REQUIRE(x.cols() == in, "Linear: input width mismatch");
    MatX<S> y = x * store.value(w).transpose();
    y.rowwise() += store.value(b).col(0).transpose();
    return y;
  }

  /// x is the forward input; dy the gradient of the loss w.r.t. the output.
  MatX<S> backward(ParamStore<S>& store, const MatX<S>& x,
                   const MatX<S>& dy) const {
    store.grad(w).noalias() += dy.transpose() * x;
    store.grad(b).col(0).noalias() += dy.colwise().sum().transpose();
    return dy * store.value(w);
  }
};

/// Stack of SiLU hidden layers followed by a linear readout. The readout is
/// zero-initialized so the enclosing flow layer starts as the identity.
template <class S>
struct Mlp {
  std::vector<Linear<S>> hidden;
  Linear<S> readout;

  struct Cache {
    std::vector<MatX<S>> pre;   // pre-activations per hidden layer
    std::vector<MatX<S>> act;   // inputs to each layer (act[0] = x)
  };

  static Mlp create(ParamStore<S>& store, const std::string& prefix,
                    Eigen::Index in, Eigen::Index width, int depth,
                    Eigen::Index out, Rng& init_rng) {
    Mlp mlp;
    Eigen::Index cur = in;
    for (int i = 0; i < depth; ++i) {
      const double scale = 1.0 / std::sqrt(static_cast<double>(cur));
      mlp.hidden.push_back(Linear<S>::create(
          store, prefix + ".h" + std::to_string(i), cur, width, &init_rng,
          scale));
      cur = width;
    }
    mlp.readout =
        Linear<S>::create(store, prefix + ".out", cur, out, nullptr, 0.0);
    return mlp;
  }

  MatX<S> forward(const ParamStore<S>& store, const MatX<S>& x,
                  Cache* cache = nullptr) const {
    MatX<S> a = x;
    if (cache != nullptr) {
      cache->pre.clear();
      cache->act.clear();
      cache->act.push_back(a);
    }
    for (const auto& lin : hidden) {
      MatX<S> pre = lin.forward(store, a);
      a = silu(pre);
      if (cache != nullptr) {
        cache->pre.push_back(std::move(pre));
        cache->act.push_back(a);
      }
    }
    return readout.forward(store, a);
  }

  MatX<S> backward(ParamStore<S>& store, const Cache& cache,
                   const MatX<S>& dy) const {
    MatX<S> da = readout.backward(store, cache.act.back(), dy);
    for (int i = static_cast<int>(hidden.size()) - 1; i >= 0; --i) {
      const MatX<S> dpre =
          da.cwiseProduct(silu_grad(cache.pre[static_cast<size_t>(i)]));
      da = hidden[static_cast<size_t>(i)].backward(
          store, cache.act[static_cast<size_t>(i)], dpre);
    }
    return da;
  }
};

}  // namespace fluid
