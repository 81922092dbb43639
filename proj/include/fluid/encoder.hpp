#pragma once

#include "fluid/core.hpp"
#include "fluid/nn.hpp"
#include "fluid/param_store.hpp"

#include <string>
#include <vector>

namespace fluid {

struct EncoderConfig {
  int obs_dim = 1;      // d_y
  int hidden_dim = 128;  // d_h
  int layers = 4;        // L
  int summary_dim = 3;   // d_s, default 3 * d_y

  void validate() const {
    FLUID_REQUIRE(obs_dim > 0 && hidden_dim > 0 && layers > 0 &&
                      summary_dim > 0,
                  "EncoderConfig: all dimensions must be positive");
  }
};

/// Stacked LSTM over observation sequences plus an affine summary head.
/// Gate weights are packed per layer as [input; forget; output; candidate]
/// blocks of hidden_dim rows each. Batched: matrices carry one trajectory
/// per row.
template <class S>
class EncoderModel {
 public:
  EncoderModel() = default;

  EncoderModel(EncoderConfig config, ParamStore<S>& store,
               const std::string& prefix, Rng& init_rng)
      : cfg_(config) {
    cfg_.validate();
    const int dh = cfg_.hidden_dim;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int l = 0; l < cfg_.layers; ++l) {
      const int in = l == 0 ? cfg_.obs_dim : dh;
      Layer layer;
      const std::string p = prefix + ".lstm" + std::to_string(l);
      layer.wy = store.add(p + ".wy", 4 * dh, in);
      layer.wh = store.add(p + ".wh", 4 * dh, dh);
      layer.b = store.add(p + ".b", 4 * dh, 1);
      init_uniform(store.value(layer.wy), init_rng, scale);
      init_uniform(store.value(layer.wh), init_rng, scale);
      // forget-gate bias starts at +1
      store.value(layer.b).block(dh, 0, dh, 1).setConstant(S(1));
      layers_.push_back(layer);
    }
    head_ = Linear<S>::create(store, prefix + ".head", dh, cfg_.summary_dim,
                              &init_rng, scale);
  }

  const EncoderConfig& config() const { return cfg_; }

  struct State {
    std::vector<MatX<S>> h, c;  // per layer, B x d_h
  };

  State initial_state(Eigen::Index batch) const {
    State st;
    for (int l = 0; l < cfg_.layers; ++l) {
      st.h.push_back(MatX<S>::Zero(batch, cfg_.hidden_dim));
      st.c.push_back(MatX<S>::Zero(batch, cfg_.hidden_dim));
    }
    return st;
  }

  struct StepCache {
    // per layer
    std::vector<MatX<S>> gi, gf, go, gg, tc, h_prev, c_prev, x;
  };

  struct SeqCache {
    std::vector<StepCache> steps;
    std::vector<MatX<S>> top_hidden;  // per step, B x d_h
  };

  /// One LSTM step through all layers; advances `state` in place and
  /// returns the top-layer hidden state.
  MatX<S> step(const ParamStore<S>& store, const MatX<S>& y, State& state,
               StepCache* cache = nullptr) const {
    FLUID_REQUIRE(y.cols() == cfg_.obs_dim, "encoder: obs dimension mismatch");
    const int dh = cfg_.hidden_dim;
    MatX<S> x = y;
    for (int l = 0; l < cfg_.layers; ++l) {
      const Layer& lay = layers_[static_cast<size_t>(l)];
      auto& h = state.h[static_cast<size_t>(l)];
      auto& c = state.c[static_cast<size_t>(l)];
      MatX<S> pre = x * store.value(lay.wy).transpose() +
                    h * store.value(lay.wh).transpose();
      pre.rowwise() += store.value(lay.b).col(0).transpose();
      MatX<S> gi = sigmoid(pre.leftCols(dh));
      MatX<S> gf = sigmoid(pre.middleCols(dh, dh));
      MatX<S> go = sigmoid(pre.middleCols(2 * dh, dh));
      MatX<S> gg = pre.rightCols(dh).array().tanh().matrix();
      if (cache != nullptr) {
        cache->h_prev.push_back(h);
        cache->c_prev.push_back(c);
        cache->x.push_back(x);
      }
      c = gf.cwiseProduct(c) + gi.cwiseProduct(gg);
      MatX<S> tc = c.array().tanh().matrix();
      h = go.cwiseProduct(tc);
      x = h;
      if (cache != nullptr) {
        cache->gi.push_back(std::move(gi));
        cache->gf.push_back(std::move(gf));
        cache->go.push_back(std::move(go));
        cache->gg.push_back(std::move(gg));
        cache->tc.push_back(std::move(tc));
      }
    }
    return x;
  }

  MatX<S> summary(const ParamStore<S>& store, const MatX<S>& top_hidden) const {
    return head_.forward(store, top_hidden);
  }

  /// Encodes all prefixes in one pass: returns s_t for t = 1..T, each B x d_s.
  std::vector<MatX<S>> encode_sequence(const ParamStore<S>& store,
                                       const std::vector<MatX<S>>& ys,
                                       SeqCache* cache = nullptr) const {
    FLUID_REQUIRE(!ys.empty(), "encode_sequence: empty sequence");
    State st = initial_state(ys.front().rows());
    std::vector<MatX<S>> out;
    out.reserve(ys.size());
    for (const auto& y : ys) {
      StepCache sc;
      MatX<S> top = step(store, y, st, cache != nullptr ? &sc : nullptr);
      if (cache != nullptr) {
        cache->steps.push_back(std::move(sc));
        cache->top_hidden.push_back(top);
      }
      out.push_back(summary(store, top));
    }
    return out;
  }

  /// BPTT given per-step summary gradients (same layout as encode_sequence
  /// output). Accumulates into the store. When truncation > 0 the carried
  /// state gradients are dropped at every segment boundary, so no loss site
  /// reaches more than 2*truncation steps into the past.
  void backward(ParamStore<S>& store, const SeqCache& cache,
                const std::vector<MatX<S>>& d_summaries,
                int truncation = 0) const {
    const int T = static_cast<int>(cache.steps.size());
    FLUID_REQUIRE(static_cast<int>(d_summaries.size()) == T,
                  "encoder backward: gradient count mismatch");
    const int dh = cfg_.hidden_dim;
    const Eigen::Index bsz = cache.top_hidden.front().rows();
    std::vector<MatX<S>> dh_next(static_cast<size_t>(cfg_.layers),
                                 MatX<S>::Zero(bsz, dh));
    std::vector<MatX<S>> dc_next(static_cast<size_t>(cfg_.layers),
                                 MatX<S>::Zero(bsz, dh));
    for (int t = T - 1; t >= 0; --t) {
      const StepCache& sc = cache.steps[static_cast<size_t>(t)];
      // summary head feeds the top layer's hidden state
      MatX<S> dtop = head_.backward(store, cache.top_hidden[static_cast<size_t>(t)],
                                    d_summaries[static_cast<size_t>(t)]);
      dh_next[static_cast<size_t>(cfg_.layers - 1)] += dtop;
      MatX<S> dx_below;  // gradient flowing into the layer below at time t
      for (int l = cfg_.layers - 1; l >= 0; --l) {
        const size_t li = static_cast<size_t>(l);
        const Layer& lay = layers_[li];
        const MatX<S>& gi = sc.gi[li];
        const MatX<S>& gf = sc.gf[li];
        const MatX<S>& go = sc.go[li];
        const MatX<S>& gg = sc.gg[li];
        const MatX<S>& tc = sc.tc[li];
        MatX<S> dh_t = dh_next[li];
        if (l < cfg_.layers - 1) dh_t += dx_below;
        MatX<S> dc_t =
            dc_next[li] +
            dh_t.cwiseProduct(go).cwiseProduct(
                (S(1) - tc.array().square()).matrix());
        MatX<S> dpre(bsz, 4 * dh);
        dpre.leftCols(dh) = dc_t.cwiseProduct(gg).cwiseProduct(
            gi.cwiseProduct((S(1) - gi.array()).matrix()));
        dpre.middleCols(dh, dh) = dc_t.cwiseProduct(sc.c_prev[li])
                                      .cwiseProduct(gf.cwiseProduct(
                                          (S(1) - gf.array()).matrix()));
        dpre.middleCols(2 * dh, dh) = dh_t.cwiseProduct(tc).cwiseProduct(
            go.cwiseProduct((S(1) - go.array()).matrix()));
        dpre.rightCols(dh) = dc_t.cwiseProduct(gi).cwiseProduct(
            (S(1) - gg.array().square()).matrix());
        store.grad(lay.wy).noalias() += dpre.transpose() * sc.x[li];
        store.grad(lay.wh).noalias() += dpre.transpose() * sc.h_prev[li];
        store.grad(lay.b).col(0).noalias() +=
            dpre.colwise().sum().transpose();
        dx_below = dpre * store.value(lay.wy);
        dh_next[li] = dpre * store.value(lay.wh);
        dc_next[li] = dc_t.cwiseProduct(gf);
      }
      if (truncation > 0 && t % truncation == 0) {
        for (int l = 0; l < cfg_.layers; ++l) {
          dh_next[static_cast<size_t>(l)].setZero();
          dc_next[static_cast<size_t>(l)].setZero();
        }
      }
    }
  }

 private:
  struct Layer {
    int wy = -1, wh = -1, b = -1;
  };

  static MatX<S> sigmoid(const MatX<S>& x) {
    return (S(1) / (S(1) + (-x.array()).exp())).matrix();
  }

  static void init_uniform(MatX<S>& m, Rng& rng, double scale) {
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i)
        m(i, j) = static_cast<S>(rng.uniform(-scale, scale));
  }

  EncoderConfig cfg_;
  std::vector<Layer> layers_;
  Linear<S> head_;
};

}  // namespace fluid
