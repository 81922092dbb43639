#pragma once

#include "fluid/core.hpp"
#include "fluid/nn.hpp"
#include "fluid/param_store.hpp"

#include <iostream>
#include <string>
#include <vector>

namespace fluid {

struct FlowConfig {
  int data_dim = 2;        // d_u
  int cond_dim = 0;        // d_c (0 = unconditional)
  int num_coupling = 6;    // K
  double alpha = 0.6;      // coupling scale clamp, scale in (1-a, 1+a)
  int rff_features = 64;
  int mlp_depth = 6;
  int mlp_width = 64;
  double rff_scale_init = 0.0;  // initial value of the trainable log-scale

  void validate() const {
    FLUID_REQUIRE(data_dim >= 1, "FlowConfig: data_dim must be positive");
    FLUID_REQUIRE(cond_dim >= 0, "FlowConfig: cond_dim must be nonnegative");
    FLUID_REQUIRE(num_coupling >= 0, "FlowConfig: num_coupling negative");
    FLUID_REQUIRE(alpha > 0.0 && alpha < 1.0,
                  "FlowConfig: alpha must lie in (0,1)");
    FLUID_REQUIRE(rff_features >= 1 && mlp_depth >= 1 && mlp_width >= 1,
                  "FlowConfig: net sizes must be positive");
  }
};

/// Batched evaluation of the flow map: transformed points and per-row
/// log|det| of the Jacobian.
template <class S>
struct FlowEval {
  MatX<S> output;   // B x d_u
  VecX<S> log_det;  // B
};

/// Conditional KR-net style flow: one conditional scale-bias layer followed
/// by num_coupling affine coupling layers with half-rotation permutations
/// in between. All maps have analytic inverses and log-determinants.
template <class S>
class FlowModel {
 public:
  FlowModel() = default;

  /// Parameters are registered in `store` under `prefix`. Random Fourier
  /// features are frozen at initialization; every readout starts at zero so
  /// the whole flow begins as the identity map.
  FlowModel(FlowConfig config, ParamStore<S>& store, const std::string& prefix,
            Rng& init_rng)
      : cfg_(config) {
    cfg_.validate();
    d_ = cfg_.data_dim;
    dc_ = cfg_.cond_dim;
    k_ = d_ / 2;
    if (d_ < 2 && cfg_.num_coupling > 0) {
      std::cerr << "fluid: data_dim=1 cannot be partitioned; flow degrades to "
                   "a scale-bias-only map\n";
      cfg_.num_coupling = 0;
    }

    if (dc_ > 0) {
      sb_net_ = Mlp<S>::create(store, prefix + ".sb", dc_, cfg_.mlp_width, 1,
                               2 * d_, init_rng);
    } else {
      sb_const_ = store.add(prefix + ".sb.const", 2 * d_, 1);
    }

    const int in_dim = k_ + dc_;
    const int h1_dim = 2 * cfg_.rff_features + in_dim;
    for (int l = 0; l < cfg_.num_coupling; ++l) {
      Coupling cl;
      const std::string p = prefix + ".cpl" + std::to_string(l);
      cl.rff_f = store.add(p + ".rff.f", cfg_.rff_features, in_dim,
                           /*trainable=*/false);
      cl.rff_b0 = store.add(p + ".rff.b0", cfg_.rff_features, 1,
                            /*trainable=*/false);
      store.value(cl.rff_f) =
          init_rng.template normal_matrix<S>(cfg_.rff_features, in_dim);
      auto& b0 = store.value(cl.rff_b0);
      for (int i = 0; i < cfg_.rff_features; ++i)
        b0(i, 0) =
            static_cast<S>(init_rng.uniform(0.0, 2.0 * 3.14159265358979323846));
      cl.rff_sigma = store.add(p + ".rff.sigma", 1, 1);
      store.value(cl.rff_sigma)(0, 0) = static_cast<S>(cfg_.rff_scale_init);
      cl.net = Mlp<S>::create(store, p + ".net", h1_dim, cfg_.mlp_width,
                              cfg_.mlp_depth, 2 * (d_ - k_), init_rng);
      cl.log_gamma = store.add(p + ".log_gamma", d_ - k_, 1);
      couplings_.push_back(cl);
    }
  }

  const FlowConfig& config() const { return cfg_; }
  int data_dim() const { return d_; }
  int cond_dim() const { return dc_; }
  int num_coupling() const { return static_cast<int>(couplings_.size()); }

  // ---------------------------------------------------------------- caches

  struct ScaleBiasCache {
    MatX<S> input;            // B x d
    MatX<S> cond;             // B x dc
    typename Mlp<S>::Cache net;
    MatX<S> eta, xi, exp_eta;  // B x d each
  };

  struct CouplingCache {
    MatX<S> x;                 // B x (k + dc), net input [u1, c]
    MatX<S> lin;               // B x rff, x F^T
    MatX<S> sinp, cosp;        // B x rff
    typename Mlp<S>::Cache net;
    MatX<S> ts, tt;            // B x (d - k), tanh of (s, t) net halves
    MatX<S> scale;             // B x (d - k), 1 + alpha * ts
    MatX<S> u2;                // B x (d - k), second block before transform
  };

  struct Cache {
    ScaleBiasCache sb;
    std::vector<CouplingCache> cpl;
    MatX<S> z;  // transformed batch from the last log_prob call
  };

  // -------------------------------------------------------- layer forward

  FlowEval<S> scale_bias_forward(const ParamStore<S>& store, const MatX<S>& u,
                                 const MatX<S>& c,
                                 ScaleBiasCache* cache = nullptr) const {
    check_shapes(u, c);
    MatX<S> eta_xi = sb_outputs(store, c, cache);
    MatX<S> eta = eta_xi.leftCols(d_);
    MatX<S> xi = eta_xi.rightCols(d_);
    MatX<S> exp_eta = eta.array().exp();
    FlowEval<S> out;
    out.output = exp_eta.cwiseProduct(u) + xi;
    out.log_det = eta.rowwise().sum();
    if (cache != nullptr) {
      cache->input = u;
      cache->cond = c;
      cache->eta = std::move(eta);
      cache->xi = std::move(xi);
      cache->exp_eta = std::move(exp_eta);
    }
    return out;
  }

  MatX<S> scale_bias_inverse(const ParamStore<S>& store, const MatX<S>& v,
                             const MatX<S>& c) const {
    check_shapes(v, c);
    MatX<S> eta_xi = sb_outputs(store, c, nullptr);
    return (v - eta_xi.rightCols(d_))
        .cwiseProduct((-eta_xi.leftCols(d_).array()).exp().matrix());
  }

  /// Outputs of the coupling nets: s and t halves, each B x (d - k).
  std::pair<MatX<S>, MatX<S>> coupling_net(const ParamStore<S>& store,
                                           int layer, const MatX<S>& u1,
                                           const MatX<S>& c,
                                           CouplingCache* cache
                                           = nullptr) const {
    const Coupling& cl = couplings_[static_cast<size_t>(layer)];
    MatX<S> x(u1.rows(), k_ + dc_);
    x.leftCols(k_) = u1;
    if (dc_ > 0) x.rightCols(dc_) = c;
    const S escale =
        std::exp(-store.value(cl.rff_sigma)(0, 0));
    MatX<S> lin = x * store.value(cl.rff_f).transpose();
    MatX<S> pre = escale * lin;
    pre.rowwise() += store.value(cl.rff_b0).col(0).transpose();
    MatX<S> h1(x.rows(), 2 * cfg_.rff_features + k_ + dc_);
    h1.leftCols(cfg_.rff_features) = pre.array().sin().matrix();
    h1.middleCols(cfg_.rff_features, cfg_.rff_features) =
        pre.array().cos().matrix();
    h1.rightCols(k_ + dc_) = x;
    MatX<S> st =
        cl.net.forward(store, h1, cache != nullptr ? &cache->net : nullptr);
    if (cache != nullptr) {
      cache->x = std::move(x);
      cache->lin = std::move(lin);
      cache->sinp = h1.leftCols(cfg_.rff_features);
      cache->cosp = h1.middleCols(cfg_.rff_features, cfg_.rff_features);
    }
    return {st.leftCols(d_ - k_), st.rightCols(d_ - k_)};
  }

  FlowEval<S> coupling_forward(const ParamStore<S>& store, int layer,
                               const MatX<S>& u, const MatX<S>& c,
                               CouplingCache* cache = nullptr) const {
    check_shapes(u, c);
    const Coupling& cl = couplings_[static_cast<size_t>(layer)];
    MatX<S> u1 = u.leftCols(k_);
    MatX<S> u2 = u.rightCols(d_ - k_);
    auto [sraw, traw] = coupling_net(store, layer, u1, c, cache);
    MatX<S> ts = sraw.array().tanh().matrix();
    MatX<S> tt = traw.array().tanh().matrix();
    const S alpha = static_cast<S>(cfg_.alpha);
    MatX<S> scale = (S(1) + alpha * ts.array()).matrix();
    VecX<S> gamma =
        store.value(cl.log_gamma).col(0).array().exp().matrix();
    FlowEval<S> out;
    out.output.resize(u.rows(), d_);
    out.output.leftCols(k_) = u1;
    out.output.rightCols(d_ - k_) =
        scale.cwiseProduct(u2) + tt * gamma.asDiagonal();
    out.log_det = (alpha * ts.array()).log1p().matrix().rowwise().sum();
    if (cache != nullptr) {
      cache->ts = std::move(ts);
      cache->tt = std::move(tt);
      cache->scale = std::move(scale);
      cache->u2 = std::move(u2);
    }
    return out;
  }

  MatX<S> coupling_inverse(const ParamStore<S>& store, int layer,
                           const MatX<S>& v, const MatX<S>& c) const {
    check_shapes(v, c);
    const Coupling& cl = couplings_[static_cast<size_t>(layer)];
    MatX<S> v1 = v.leftCols(k_);
    auto [sraw, traw] = coupling_net(store, layer, v1, c);
    const S alpha = static_cast<S>(cfg_.alpha);
    MatX<S> scale = (S(1) + alpha * sraw.array().tanh()).matrix();
    VecX<S> gamma =
        store.value(cl.log_gamma).col(0).array().exp().matrix();
    MatX<S> u(v.rows(), d_);
    u.leftCols(k_) = v1;
    u.rightCols(d_ - k_) =
        (v.rightCols(d_ - k_) -
         MatX<S>(traw.array().tanh().matrix()) * gamma.asDiagonal())
            .cwiseQuotient(scale);
    return u;
  }

  // --------------------------------------------------------- full forward

  FlowEval<S> forward(const ParamStore<S>& store, const MatX<S>& u,
                      const MatX<S>& c, Cache* cache = nullptr) const {
    Cache local;
    Cache* cc = cache != nullptr ? cache : &local;
    cc->cpl.resize(couplings_.size());
    FlowEval<S> acc = scale_bias_forward(store, u, c, &cc->sb);
    for (int l = 0; l < num_coupling(); ++l) {
      FlowEval<S> step = coupling_forward(store, l, acc.output, c,
                                          &cc->cpl[static_cast<size_t>(l)]);
      acc.output = permute(step.output);
      acc.log_det += step.log_det;
    }
    return acc;
  }

  MatX<S> inverse(const ParamStore<S>& store, const MatX<S>& z,
                  const MatX<S>& c) const {
    MatX<S> v = z;
    for (int l = num_coupling() - 1; l >= 0; --l)
      v = coupling_inverse(store, l, unpermute(v), c);
    return scale_bias_inverse(store, v, c);
  }

  VecX<S> log_prob(const ParamStore<S>& store, const MatX<S>& u,
                   const MatX<S>& c, Cache* cache = nullptr) const {
    Cache local;
    Cache* cc = cache != nullptr ? cache : &local;
    FlowEval<S> fw = forward(store, u, c, cc);
    cc->z = fw.output;
    VecX<S> logp =
        fw.log_det -
        (S(0.5) * fw.output.array().square().matrix().rowwise().sum());
    logp.array() -= static_cast<S>(0.5 * kLog2Pi * d_);
    FLUID_CHECK(logp.allFinite(), "log_prob: non-finite density");
    return logp;
  }

  /// Accumulates parameter gradients of sum_i w_i * log_prob(u_i | c_i) and
  /// optionally the gradient with respect to the conditioning inputs.
  void log_prob_backward(ParamStore<S>& store, const Cache& cache,
                         const VecX<S>& w, MatX<S>* dc_out = nullptr) const {
    const Eigen::Index bsz = cache.z.rows();
    MatX<S> dc;
    if (dc_out != nullptr) {
      dc = MatX<S>::Zero(bsz, dc_);
    }
    // d/dz of w * (-0.5 z^2) = -w z
    MatX<S> dv = -(cache.z.array().colwise() * w.array()).matrix();
    for (int l = num_coupling() - 1; l >= 0; --l) {
      dv = coupling_backward(store, l, cache.cpl[static_cast<size_t>(l)],
                             unpermute_grad(dv), w,
                             dc_out != nullptr ? &dc : nullptr);
    }
    scale_bias_backward(store, cache.sb, dv, w,
                        dc_out != nullptr ? &dc : nullptr);
    if (dc_out != nullptr) *dc_out = std::move(dc);
  }

  /// Draws c.rows() samples; for an unconditional flow pass a B x 0 matrix.
  MatX<S> sample(const ParamStore<S>& store, const MatX<S>& c, Rng& rng) const {
    MatX<S> z = rng.template normal_matrix<S>(c.rows(), d_);
    return inverse(store, z, c);
  }

 private:
  struct Coupling {
    int rff_f = -1;
    int rff_b0 = -1;
    int rff_sigma = -1;
    Mlp<S> net;
    int log_gamma = -1;
  };

  void check_shapes(const MatX<S>& u, const MatX<S>& c) const {
    FLUID_REQUIRE(u.cols() == d_, "flow: data dimension mismatch");
    if (dc_ > 0) {
      FLUID_REQUIRE(c.cols() == dc_, "flow: conditioner dimension mismatch");
      FLUID_REQUIRE(c.rows() == u.rows(), "flow: batch size mismatch");
    }
  }

  MatX<S> sb_outputs(const ParamStore<S>& store, const MatX<S>& c,
                     ScaleBiasCache* cache) const {
    if (dc_ > 0)
      return sb_net_.forward(store, c, cache != nullptr ? &cache->net
                                                        : nullptr);
    MatX<S> out(c.rows(), 2 * d_);
    out.rowwise() = store.value(sb_const_).col(0).transpose();
    return out;
  }

  /// Half-rotation: output[i] = input[(i + k) mod d].
  MatX<S> permute(const MatX<S>& v) const {
    MatX<S> out(v.rows(), d_);
    out.leftCols(d_ - k_) = v.rightCols(d_ - k_);
    out.rightCols(k_) = v.leftCols(k_);
    return out;
  }

  MatX<S> unpermute(const MatX<S>& v) const {
    MatX<S> out(v.rows(), d_);
    out.leftCols(k_) = v.rightCols(k_);
    out.rightCols(d_ - k_) = v.leftCols(d_ - k_);
    return out;
  }

  // Gradient flows backwards through the same index map as unpermute.
  MatX<S> unpermute_grad(const MatX<S>& dout) const { return unpermute(dout); }

  void scale_bias_backward(ParamStore<S>& store, const ScaleBiasCache& cache,
                           const MatX<S>& dv, const VecX<S>& w,
                           MatX<S>* dc) const {
    // v = exp(eta) .* u + xi, log_det = sum_j eta_j
    MatX<S> deta = dv.cwiseProduct(cache.exp_eta).cwiseProduct(cache.input);
    deta.array().colwise() += w.array();
    const MatX<S>& dxi = dv;
    if (dc_ > 0) {
      MatX<S> dout(dv.rows(), 2 * d_);
      dout.leftCols(d_) = deta;
      dout.rightCols(d_) = dxi;
      MatX<S> dcond = sb_net_.backward(store, cache.net, dout);
      if (dc != nullptr) *dc += dcond;
    } else {
      MatX<S> dout(dv.rows(), 2 * d_);
      dout.leftCols(d_) = deta;
      dout.rightCols(d_) = dxi;
      store.grad(sb_const_).col(0) += dout.colwise().sum().transpose();
    }
    // No gradient w.r.t. the data input is needed by callers.
  }

  MatX<S> coupling_backward(ParamStore<S>& store, int layer,
                            const CouplingCache& cache, const MatX<S>& dv,
                            const VecX<S>& w, MatX<S>* dc) const {
    const Coupling& cl = couplings_[static_cast<size_t>(layer)];
    const S alpha = static_cast<S>(cfg_.alpha);
    const Eigen::Index m = d_ - k_;
    MatX<S> dv2 = dv.rightCols(m);
    VecX<S> gamma =
        store.value(cl.log_gamma).col(0).array().exp().matrix();

    // v2 = scale .* u2 + gamma .* tt; w * log_det adds w * alpha ts' / scale.
    MatX<S> dscale =
        dv2.cwiseProduct(cache.u2) +
        (cache.scale.cwiseInverse().array().colwise() * w.array()).matrix();
    MatX<S> dsraw = (alpha * dscale.array() *
                     (S(1) - cache.ts.array().square()))
                        .matrix();
    MatX<S> dgt = dv2 * gamma.asDiagonal();  // grad w.r.t. tt scaled by gamma
    store.grad(cl.log_gamma).col(0) +=
        (dv2.cwiseProduct(cache.tt).colwise().sum().transpose().array() *
         gamma.array())
            .matrix();
    MatX<S> dtraw =
        dgt.cwiseProduct((S(1) - cache.tt.array().square()).matrix());

    MatX<S> dst(dv.rows(), 2 * m);
    dst.leftCols(m) = dsraw;
    dst.rightCols(m) = dtraw;
    MatX<S> dh1 = cl.net.backward(store, cache.net, dst);

    // Through the RFF embedding h1 = [sin(pre); cos(pre); x].
    const int r = cfg_.rff_features;
    MatX<S> dpre = dh1.leftCols(r).cwiseProduct(cache.cosp) -
                   dh1.middleCols(r, r).cwiseProduct(cache.sinp);
    const S escale = std::exp(-store.value(cl.rff_sigma)(0, 0));
    store.grad(cl.rff_sigma)(0, 0) +=
        -escale * dpre.cwiseProduct(cache.lin).sum();
    MatX<S> dx = escale * (dpre * store.value(cl.rff_f));
    dx += dh1.rightCols(k_ + dc_);

    if (dc != nullptr && dc_ > 0) *dc += dx.rightCols(dc_);

    MatX<S> du(dv.rows(), d_);
    du.leftCols(k_) = dv.leftCols(k_) + dx.leftCols(k_);
    du.rightCols(m) = dv2.cwiseProduct(cache.scale);
    return du;
  }

  FlowConfig cfg_;
  int d_ = 0, dc_ = 0, k_ = 0;
  Mlp<S> sb_net_;
  int sb_const_ = -1;
  std::vector<Coupling> couplings_;
};

}  // namespace fluid
