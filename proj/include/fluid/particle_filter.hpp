#pragma once

#include "fluid/core.hpp"
#include "fluid/dataset.hpp"
#include "fluid/flow.hpp"
#include "fluid/gaussian.hpp"
#include "fluid/model_io.hpp"
#include "fluid/param_store.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

namespace fluid {

/// Pooled one-step transitions (u_prev, u, y): y observes u, rows aligned.
struct TransitionTriples {
  MatX<float> u_prev;
  MatX<float> u;
  MatX<float> y;

  Eigen::Index size() const { return u.rows(); }

  void validate() const {
    FLUID_REQUIRE(u.rows() == u_prev.rows() && u.rows() == y.rows(),
                  "TransitionTriples: row count mismatch");
    FLUID_REQUIRE(u.cols() == u_prev.cols(),
                  "TransitionTriples: state dimension mismatch");
    FLUID_REQUIRE(u.rows() > 0, "TransitionTriples: empty");
  }
};

inline TransitionTriples collect_transition_triples(
    const std::vector<Trajectory>& trajs) {
  FLUID_REQUIRE(!trajs.empty(), "collect_transition_triples: no trajectories");
  Eigen::Index total = 0;
  for (const auto& tr : trajs) total += std::max<Eigen::Index>(0, tr.u.rows() - 1);
  FLUID_REQUIRE(total > 0, "collect_transition_triples: no transitions");
  TransitionTriples out;
  out.u_prev.resize(total, trajs[0].u.cols());
  out.u.resize(total, trajs[0].u.cols());
  out.y.resize(total, trajs[0].y.cols());
  Eigen::Index row = 0;
  for (const auto& tr : trajs)
    for (Eigen::Index t = 0; t + 1 < tr.u.rows(); ++t, ++row) {
      out.u_prev.row(row) = tr.u.row(t);
      out.u.row(row) = tr.u.row(t + 1);
      out.y.row(row) = tr.y.row(t + 1);
    }
  return out;
}

struct PFModelConfig {
  int state_dim = 1;
  int obs_dim = 1;
  int flow_couplings = 6;
  int flow_depth = 6;
  int flow_width = 64;
  int rff_features = 64;
  bool bootstrap = false;  // also build the transition/likelihood pair

  void validate() const {
    FLUID_REQUIRE(state_dim > 0 && obs_dim > 0,
                  "PFModelConfig: dimensions must be positive");
    FLUID_REQUIRE(flow_couplings >= 0 && flow_depth > 0 && flow_width > 0 &&
                      rff_features > 0,
                  "PFModelConfig: flow sizes must be positive");
  }
};

/// Learned factors for the flow-based particle filter: a predictive
/// observation density p(y_k | u_{k-1}) used for weighting and an adapted
/// proposal p(u_k | y_k, u_{k-1}) used for propagation. The optional
/// bootstrap pair models p(u_k | u_{k-1}) and p(y_k | u_k) instead.
/// All public entry points work in physical units; standardization is
/// internal.
template <class S = float>
class PFModel {
 public:
  PFModel() = default;

  PFModel(PFModelConfig config, Standardization stats, Rng& init_rng)
      : cfg_(config), stats_(std::move(stats)) {
    cfg_.validate();
    FLUID_REQUIRE(stats_.u_mean.size() == cfg_.state_dim &&
                      stats_.y_mean.size() == cfg_.obs_dim,
                  "PFModel: standardization dims do not match config");
    FlowConfig fc;
    fc.num_coupling = cfg_.flow_couplings;
    fc.mlp_depth = cfg_.flow_depth;
    fc.mlp_width = cfg_.flow_width;
    fc.rff_features = cfg_.rff_features;

    FlowConfig obs = fc;
    obs.data_dim = cfg_.obs_dim;
    obs.cond_dim = cfg_.state_dim;
    obs_flow_ = FlowModel<S>(obs, params, "pf_obs", init_rng);

    FlowConfig prop = fc;
    prop.data_dim = cfg_.state_dim;
    prop.cond_dim = cfg_.obs_dim + cfg_.state_dim;
    prop_flow_ = FlowModel<S>(prop, params, "pf_prop", init_rng);

    if (cfg_.bootstrap) {
      FlowConfig trans = fc;
      trans.data_dim = cfg_.state_dim;
      trans.cond_dim = cfg_.state_dim;
      trans_flow_ = FlowModel<S>(trans, params, "pf_trans", init_rng);
      FlowConfig lik = fc;
      lik.data_dim = cfg_.obs_dim;
      lik.cond_dim = cfg_.state_dim;
      lik_flow_ = FlowModel<S>(lik, params, "pf_lik", init_rng);
    }
  }

  ParamStore<S> params;

  const PFModelConfig& config() const { return cfg_; }
  const Standardization& stats() const { return stats_; }
  bool has_bootstrap() const { return cfg_.bootstrap; }
  FlowModel<S>& obs_flow() { return obs_flow_; }
  FlowModel<S>& proposal_flow() { return prop_flow_; }
  FlowModel<S>& transition_flow() { return trans_flow_; }
  FlowModel<S>& likelihood_flow() { return lik_flow_; }

  /// log p(y | u_prev) per row, physical units. `y` may have one row
  /// (broadcast) or one row per particle.
  VecX<double> log_obs(const MatX<S>& u_prev, const MatX<S>& y) const {
    return flow_log_density(obs_flow_, std_y(broadcast(y, u_prev.rows())),
                            std_u(u_prev), log_jac_y());
  }

  MatX<S> propose(const MatX<S>& u_prev, const MatX<S>& y, Rng& rng) const {
    MatX<S> cond(u_prev.rows(), cfg_.obs_dim + cfg_.state_dim);
    cond.leftCols(cfg_.obs_dim) = std_y(broadcast(y, u_prev.rows()));
    cond.rightCols(cfg_.state_dim) = std_u(u_prev);
    MatX<S> z = prop_flow_.sample(params, cond, rng);
    FLUID_CHECK(all_finite(z), "PFModel::propose: non-finite samples");
    return destd_u(z);
  }

  VecX<double> log_proposal(const MatX<S>& u_prev, const MatX<S>& u,
                            const MatX<S>& y) const {
    MatX<S> cond(u_prev.rows(), cfg_.obs_dim + cfg_.state_dim);
    cond.leftCols(cfg_.obs_dim) = std_y(broadcast(y, u_prev.rows()));
    cond.rightCols(cfg_.state_dim) = std_u(u_prev);
    VecX<S> lp = prop_flow_.log_prob(params, std_u(u), cond);
    return lp.template cast<double>().array() - log_jac_u();
  }

  MatX<S> propagate(const MatX<S>& u_prev, Rng& rng) const {
    FLUID_REQUIRE(cfg_.bootstrap, "PFModel: no bootstrap transition flow");
    MatX<S> z = trans_flow_.sample(params, std_u(u_prev), rng);
    FLUID_CHECK(all_finite(z), "PFModel::propagate: non-finite samples");
    return destd_u(z);
  }

  VecX<double> log_lik(const MatX<S>& u, const MatX<S>& y) const {
    FLUID_REQUIRE(cfg_.bootstrap, "PFModel: no bootstrap likelihood flow");
    return flow_log_density(lik_flow_, std_y(broadcast(y, u.rows())),
                            std_u(u), log_jac_y());
  }

  void save(const std::string& path) const {
    nlohmann::json cfg;
    cfg["kind"] = "fluid.pf_model.v1";
    cfg["state_dim"] = cfg_.state_dim;
    cfg["obs_dim"] = cfg_.obs_dim;
    cfg["flow_couplings"] = cfg_.flow_couplings;
    cfg["flow_depth"] = cfg_.flow_depth;
    cfg["flow_width"] = cfg_.flow_width;
    cfg["rff_features"] = cfg_.rff_features;
    cfg["bootstrap"] = cfg_.bootstrap;
    cfg["stats"] = {{"u_mean", to_std(stats_.u_mean)},
                    {"u_std", to_std(stats_.u_std)},
                    {"y_mean", to_std(stats_.y_mean)},
                    {"y_std", to_std(stats_.y_std)}};
    save_container<S>(path, cfg, params);
  }

  static PFModel load(const std::string& path) {
    nlohmann::json cfg = peek_container_config(path);
    FLUID_CHECK(cfg.value("kind", "") == "fluid.pf_model.v1",
                "PFModel::load: not a particle-filter container: " + path);
    PFModelConfig mc;
    mc.state_dim = cfg.at("state_dim").get<int>();
    mc.obs_dim = cfg.at("obs_dim").get<int>();
    mc.flow_couplings = cfg.at("flow_couplings").get<int>();
    mc.flow_depth = cfg.at("flow_depth").get<int>();
    mc.flow_width = cfg.at("flow_width").get<int>();
    mc.rff_features = cfg.at("rff_features").get<int>();
    mc.bootstrap = cfg.at("bootstrap").get<bool>();
    Standardization st;
    st.u_mean = from_std(cfg.at("stats").at("u_mean"));
    st.u_std = from_std(cfg.at("stats").at("u_std"));
    st.y_mean = from_std(cfg.at("stats").at("y_mean"));
    st.y_std = from_std(cfg.at("stats").at("y_std"));
    Rng scratch(0);
    PFModel model(mc, std::move(st), scratch);
    load_container<S>(path, model.params);
    return model;
  }

 private:
  static std::vector<double> to_std(const VecX<double>& v) {
    return std::vector<double>(v.data(), v.data() + v.size());
  }
  static VecX<double> from_std(const nlohmann::json& j) {
    auto v = j.get<std::vector<double>>();
    return Eigen::Map<const VecX<double>>(v.data(),
                                          static_cast<Eigen::Index>(v.size()));
  }

  static MatX<S> broadcast(const MatX<S>& y, Eigen::Index rows) {
    if (y.rows() == rows) return y;
    FLUID_REQUIRE(y.rows() == 1, "PFModel: observation row count mismatch");
    return y.replicate(rows, 1);
  }

  template <class M>
  static MatX<S> apply_std(const M& x, const VecX<double>& mean,
                           const VecX<double>& std) {
    FLUID_REQUIRE(x.cols() == mean.size(), "PFModel: dimension mismatch");
    MatX<S> out = x;
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      out.col(j) = (x.col(j).array() - static_cast<S>(mean(j))) /
                   static_cast<S>(std(j));
    return out;
  }

  MatX<S> std_u(const MatX<S>& u) const {
    return apply_std(u, stats_.u_mean, stats_.u_std);
  }
  MatX<S> std_y(const MatX<S>& y) const {
    return apply_std(y, stats_.y_mean, stats_.y_std);
  }
  MatX<S> destd_u(const MatX<S>& z) const {
    MatX<S> out = z;
    for (Eigen::Index j = 0; j < z.cols(); ++j)
      out.col(j) = z.col(j).array() * static_cast<S>(stats_.u_std(j)) +
                   static_cast<S>(stats_.u_mean(j));
    return out;
  }
  // change of variables from standardized to physical units
  double log_jac_y() const { return stats_.y_std.array().log().sum(); }
  double log_jac_u() const { return stats_.u_std.array().log().sum(); }

  VecX<double> flow_log_density(const FlowModel<S>& flow, const MatX<S>& data,
                                const MatX<S>& cond, double log_jac) const {
    VecX<S> lp = flow.log_prob(params, data, cond);
    return lp.template cast<double>().array() - log_jac;
  }

  PFModelConfig cfg_;
  Standardization stats_;
  FlowModel<S> obs_flow_, prop_flow_, trans_flow_, lik_flow_;
};

struct PFTrainConfig {
  int epochs = 100;
  int batch_size = 128;
  double lr = 1e-3;
  double grad_clip = 10.0;
  std::uint64_t seed = 0;

  void validate() const {
    FLUID_REQUIRE(epochs > 0 && batch_size > 0, "PFTrainConfig: bad sizes");
    FLUID_REQUIRE(lr > 0.0 && grad_clip > 0.0,
                  "PFTrainConfig: lr and grad_clip must be positive");
  }
};

namespace detail {

/// Minibatch Adam on the NLL of one conditional flow; data and cond are
/// standardized. Each flow has its own objective, so the others' gradients
/// stay untouched (their parameter blocks simply receive zero grad).
template <class S>
void fit_flow_nll(ParamStore<S>& store, const FlowModel<S>& flow,
                  const MatX<S>& data, const MatX<S>& cond,
                  const PFTrainConfig& cfg, Rng& rng) {
  const Eigen::Index n = data.rows();
  std::vector<Eigen::Index> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (size_t i = idx.size(); i > 1; --i)
      std::swap(idx[i - 1], idx[rng.next_u64() % i]);
    for (Eigen::Index start = 0; start < n; start += cfg.batch_size) {
      const Eigen::Index stop = std::min(n, start + cfg.batch_size);
      const Eigen::Index b = stop - start;
      MatX<S> db(b, data.cols()), cb(b, cond.cols());
      for (Eigen::Index i = 0; i < b; ++i) {
        db.row(i) = data.row(idx[static_cast<size_t>(start + i)]);
        cb.row(i) = cond.row(idx[static_cast<size_t>(start + i)]);
      }
      store.zero_grad();
      typename FlowModel<S>::Cache cache;
      VecX<S> lp = flow.log_prob(store, db, cb, &cache);
      FLUID_CHECK(std::isfinite(static_cast<double>(lp.sum())),
                  "fit_flow_nll: non-finite loss");
      VecX<S> w = VecX<S>::Constant(b, static_cast<S>(-1.0 / b));
      flow.log_prob_backward(store, cache, w);
      store.clip_grad_norm(cfg.grad_clip);
      store.adam_step(cfg.lr);
    }
  }
}

}  // namespace detail

/// Fits the predictive-observation and adapted-proposal flows (plus the
/// bootstrap pair when configured) on pooled transitions by independent NLL
/// minimization.
template <class S = float>
PFModel<S> train_pf_flows(const TransitionTriples& triples, PFModelConfig mcfg,
                          PFTrainConfig tcfg) {
  triples.validate();
  tcfg.validate();
  FLUID_REQUIRE(triples.u.cols() == mcfg.state_dim &&
                    triples.y.cols() == mcfg.obs_dim,
                "train_pf_flows: triple dims do not match config");

  // state statistics over both endpoints of the transitions
  std::vector<Trajectory> pseudo(1);
  pseudo[0].u.resize(2 * triples.size(), triples.u.cols());
  pseudo[0].u << triples.u_prev, triples.u;
  pseudo[0].y.resize(2 * triples.size(), triples.y.cols());
  pseudo[0].y << triples.y, triples.y;
  Standardization stats = compute_standardization(pseudo);

  Rng init_rng(tcfg.seed, 20);
  PFModel<S> model(mcfg, stats, init_rng);

  auto stdz = [](const MatX<float>& x, const VecX<double>& mean,
                 const VecX<double>& sd) {
    MatX<S> out = x.template cast<S>();
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      out.col(j) = (out.col(j).array() - static_cast<S>(mean(j))) /
                   static_cast<S>(sd(j));
    return out;
  };
  MatX<S> up = stdz(triples.u_prev, stats.u_mean, stats.u_std);
  MatX<S> uc = stdz(triples.u, stats.u_mean, stats.u_std);
  MatX<S> yc = stdz(triples.y, stats.y_mean, stats.y_std);

  Rng rng_obs(tcfg.seed, 21);
  detail::fit_flow_nll(model.params, model.obs_flow(), yc, up, tcfg, rng_obs);

  MatX<S> prop_cond(triples.size(), yc.cols() + up.cols());
  prop_cond << yc, up;
  Rng rng_prop(tcfg.seed, 22);
  detail::fit_flow_nll(model.params, model.proposal_flow(), uc, prop_cond,
                       tcfg, rng_prop);

  if (mcfg.bootstrap) {
    Rng rng_trans(tcfg.seed, 23);
    detail::fit_flow_nll(model.params, model.transition_flow(), uc, up, tcfg,
                         rng_trans);
    Rng rng_lik(tcfg.seed, 24);
    detail::fit_flow_nll(model.params, model.likelihood_flow(), yc, uc, tcfg,
                         rng_lik);
  }
  return model;
}

// ------------------------------------------------------------- ensembles

template <class S = float>
struct ParticleEnsemble {
  MatX<S> particles;          // N x d_u
  VecX<double> weights;       // nonnegative, sums to 1
  std::vector<int> ancestors;  // of the last resampling, empty before any
  double ress = 1.0;           // of the pre-resampling weights of the last step

  Eigen::Index size() const { return particles.rows(); }

  void validate() const {
    FLUID_REQUIRE(particles.rows() == weights.size(),
                  "ParticleEnsemble: weight count mismatch");
    FLUID_REQUIRE(weights.minCoeff() >= 0.0,
                  "ParticleEnsemble: negative weight");
    FLUID_REQUIRE(std::abs(weights.sum() - 1.0) < 1e-9,
                  "ParticleEnsemble: weights must sum to 1");
  }
};

template <class S>
ParticleEnsemble<S> make_uniform_ensemble(MatX<S> particles) {
  ParticleEnsemble<S> e;
  const Eigen::Index n = particles.rows();
  FLUID_REQUIRE(n > 0, "make_uniform_ensemble: empty");
  e.particles = std::move(particles);
  e.weights = VecX<double>::Constant(n, 1.0 / static_cast<double>(n));
  return e;
}

enum class Resampler { kMultinomial, kSystematic };

namespace detail {

inline std::vector<int> resample_indices(const VecX<double>& w, Rng& rng,
                                         Resampler kind) {
  const auto n = static_cast<int>(w.size());
  std::vector<int> idx(static_cast<size_t>(n));
  if (kind == Resampler::kMultinomial) {
    for (int i = 0; i < n; ++i)
      idx[static_cast<size_t>(i)] = rng.categorical(w);
  } else {
    const double u0 = rng.uniform() / n;
    double cum = w(0);
    int j = 0;
    for (int i = 0; i < n; ++i) {
      const double pos = u0 + static_cast<double>(i) / n;
      while (pos > cum && j + 1 < n) cum += w(++j);
      idx[static_cast<size_t>(i)] = j;
    }
  }
  return idx;
}

}  // namespace detail

struct EssReport {
  double ess = 0.0;
  double ress = 0.0;
  double chi2 = 0.0;  // N / ESS - 1
};

inline EssReport ess_from_weights(const VecX<double>& w) {
  FLUID_REQUIRE(w.size() > 0, "ess_from_weights: empty");
  double sum = 0.0, sq = 0.0;
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    FLUID_CHECK(std::isfinite(w(i)) && w(i) >= 0.0,
                "ess_from_weights: invalid weight");
    sum += w(i);
    sq += w(i) * w(i);
  }
  FLUID_CHECK(sq > 0.0, "ess_from_weights: all weights zero");
  EssReport r;
  r.ess = sum * sum / sq;
  r.ress = r.ess / static_cast<double>(w.size());
  r.chi2 = static_cast<double>(w.size()) / r.ess - 1.0;
  return r;
}

inline EssReport ess_from_log_weights(const VecX<double>& logw) {
  FLUID_REQUIRE(logw.size() > 0, "ess_from_log_weights: empty");
  double lmax = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < logw.size(); ++i) {
    FLUID_CHECK(!std::isnan(logw(i)) &&
                    logw(i) < std::numeric_limits<double>::infinity(),
                "ess_from_log_weights: invalid log-weight");
    lmax = std::max(lmax, logw(i));
  }
  FLUID_CHECK(std::isfinite(lmax), "ess_from_log_weights: all weights zero");
  return ess_from_weights((logw.array() - lmax).exp());
}

/// One auxiliary-weight step with pluggable factors. `log_obs(particles)`
/// returns per-particle log p(y_k | u_{k-1}); `propose(ancestors, rng)`
/// returns the propagated particles. Output weights are uniform.
template <class S, class LogObsFn, class ProposeFn>
ParticleEnsemble<S> pf_step_generic(const ParticleEnsemble<S>& ens,
                                    LogObsFn&& log_obs, ProposeFn&& propose,
                                    Rng& rng,
                                    Resampler resampler = Resampler::kMultinomial) {
  ens.validate();
  const Eigen::Index n = ens.size();
  VecX<double> logw = log_obs(ens.particles);
  FLUID_REQUIRE(logw.size() == n, "pf_step: weight count mismatch");
  for (Eigen::Index i = 0; i < n; ++i) {
    logw(i) += ens.weights(i) > 0.0 ? std::log(ens.weights(i))
                                    : -std::numeric_limits<double>::infinity();
    FLUID_CHECK(!std::isnan(logw(i)), "pf_step: NaN log-weight");
  }
  const double lmax = logw.maxCoeff();
  FLUID_CHECK(std::isfinite(lmax),
              "pf_step: particle degeneracy, max log-weight " +
                  std::to_string(lmax));
  VecX<double> aw = (logw.array() - lmax).exp();
  aw /= aw.sum();

  ParticleEnsemble<S> out;
  out.ress = ess_from_weights(aw).ress;
  out.ancestors = detail::resample_indices(aw, rng, resampler);
  MatX<S> parents(n, ens.particles.cols());
  for (Eigen::Index i = 0; i < n; ++i)
    parents.row(i) = ens.particles.row(out.ancestors[static_cast<size_t>(i)]);
  out.particles = propose(parents, rng);
  FLUID_CHECK(all_finite(out.particles), "pf_step: non-finite particles");
  out.weights = VecX<double>::Constant(n, 1.0 / static_cast<double>(n));
  return out;
}

/// Adapted step with the learned flows: weight by p(y_k | u_{k-1}), resample,
/// propagate from p(u_k | y_k, u_{k-1}).
template <class S>
ParticleEnsemble<S> pf_step(const PFModel<S>& model,
                            const ParticleEnsemble<S>& ens, const MatX<S>& y,
                            Rng& rng,
                            Resampler resampler = Resampler::kMultinomial) {
  return pf_step_generic(
      ens, [&](const MatX<S>& u_prev) { return model.log_obs(u_prev, y); },
      [&](const MatX<S>& parents, Rng& r) {
        return model.propose(parents, y, r);
      },
      rng, resampler);
}

/// Bootstrap step: propagate with the transition flow first, then weight by
/// the likelihood flow and resample.
template <class S>
ParticleEnsemble<S> bootstrap_pf_step(
    const PFModel<S>& model, const ParticleEnsemble<S>& ens, const MatX<S>& y,
    Rng& rng, Resampler resampler = Resampler::kMultinomial) {
  ens.validate();
  const Eigen::Index n = ens.size();
  MatX<S> moved = model.propagate(ens.particles, rng);
  VecX<double> logw = model.log_lik(moved, y);
  for (Eigen::Index i = 0; i < n; ++i) {
    logw(i) += ens.weights(i) > 0.0 ? std::log(ens.weights(i))
                                    : -std::numeric_limits<double>::infinity();
    FLUID_CHECK(!std::isnan(logw(i)), "bootstrap_pf_step: NaN log-weight");
  }
  const double lmax = logw.maxCoeff();
  FLUID_CHECK(std::isfinite(lmax),
              "bootstrap_pf_step: particle degeneracy, max log-weight " +
                  std::to_string(lmax));
  VecX<double> w = (logw.array() - lmax).exp();
  w /= w.sum();
  ParticleEnsemble<S> out;
  out.ress = ess_from_weights(w).ress;
  out.ancestors = detail::resample_indices(w, rng, resampler);
  out.particles.resize(n, moved.cols());
  for (Eigen::Index i = 0; i < n; ++i)
    out.particles.row(i) = moved.row(out.ancestors[static_cast<size_t>(i)]);
  out.weights = VecX<double>::Constant(n, 1.0 / static_cast<double>(n));
  return out;
}

/// Sequential filter over y (one observation per row) from an initial
/// uniform ensemble.
template <class S>
std::vector<ParticleEnsemble<S>> run_pf(
    const PFModel<S>& model, const MatX<S>& y, MatX<S> init_particles,
    Rng& rng, Resampler resampler = Resampler::kMultinomial) {
  FLUID_REQUIRE(y.rows() >= 1, "run_pf: empty observation sequence");
  std::vector<ParticleEnsemble<S>> out;
  ParticleEnsemble<S> ens = make_uniform_ensemble(std::move(init_particles));
  for (Eigen::Index t = 0; t < y.rows(); ++t) {
    ens = pf_step(model, ens, MatX<S>(y.row(t)), rng, resampler);
    out.push_back(ens);
  }
  return out;
}

// ------------------------------------------------------------ diagnostics

/// Importance-weight diagnostic of the learned factors against exact model
/// densities. Inputs are aligned per sample: u was drawn from the model's
/// proposal given (u_prev, y); `log_trans` and `log_lik` hold the exact
/// log p(u | u_prev) and log p(y | u). The weight of each sample is
/// exact joint over learned joint.
template <class S>
EssReport ess_diagnostic(const PFModel<S>& model, const MatX<S>& u_prev,
                         const MatX<S>& u, const MatX<S>& y,
                         const VecX<double>& log_trans,
                         const VecX<double>& log_lik) {
  const Eigen::Index n = u.rows();
  FLUID_REQUIRE(u_prev.rows() == n && y.rows() == n &&
                    log_trans.size() == n && log_lik.size() == n,
                "ess_diagnostic: row count mismatch");
  VecX<double> logw = log_trans + log_lik - model.log_obs(u_prev, y) -
                      model.log_proposal(u_prev, u, y);
  return ess_from_log_weights(logw);
}

/// RESS-over-time CSV for a completed filter run.
/// Fully adapted particle filter with the closed-form linear-Gaussian
/// weighting N(y; H M u, H Q H^T + R) and proposal p(u | y, u_prev). Every
/// step shares the same covariances, so gains and Cholesky factors are built
/// once. The importance weights cancel exactly for this model; the reported
/// per-step ress only reflects the p(y | u_prev) pre-resampling spread.
template <class S = float>
std::vector<ParticleEnsemble<S>> exact_linear_pf(
    const LinearSSM<double>& ssm, const MatX<S>& y, int n_particles, Rng& rng,
    Resampler resampler = Resampler::kMultinomial) {
  FLUID_REQUIRE(y.rows() >= 1, "exact_linear_pf: empty observation sequence");
  FLUID_REQUIRE(n_particles >= 1, "exact_linear_pf: need particles");
  FLUID_REQUIRE(y.cols() == ssm.obs_dim(),
                "exact_linear_pf: observation dimension mismatch");
  const auto d = ssm.state_dim();
  const auto dy = ssm.obs_dim();

  MatX<double> innov = ssm.H * ssm.Q * ssm.H.transpose() + ssm.R;
  auto llt_innov = detail::chol_with_jitter<double>(innov, "exact_linear_pf innovation");
  double log_norm = -0.5 * static_cast<double>(dy) * kLog2Pi;
  for (Eigen::Index i = 0; i < dy; ++i)
    log_norm -= std::log(llt_innov.matrixL()(i, i));
  MatX<double> kbar = llt_innov.solve(ssm.H * ssm.Q).transpose();
  MatX<double> post_cov =
      (MatX<double>::Identity(d, d) - kbar * ssm.H) * ssm.Q;
  MatX<double> l_post =
      detail::chol_with_jitter<double>(post_cov, "exact_linear_pf posterior").matrixL();
  MatX<double> l0 =
      detail::chol_with_jitter<double>(MatX<double>(ssm.Sigma0), "exact_linear_pf prior")
          .matrixL();

  MatX<double> init =
      (rng.normal_matrix<double>(n_particles, d) * l0.transpose()).rowwise() +
      ssm.mu0.transpose();
  ParticleEnsemble<S> ens =
      make_uniform_ensemble(MatX<S>(init.template cast<S>()));

  std::vector<ParticleEnsemble<S>> out;
  out.reserve(static_cast<size_t>(y.rows()));
  for (Eigen::Index t = 0; t < y.rows(); ++t) {
    VecX<double> yt = y.row(t).template cast<double>().transpose();
    auto residuals = [&](const MatX<S>& u_prev) {
      MatX<double> pm =
          u_prev.template cast<double>() * ssm.M.transpose();  // M u per row
      MatX<double> resid = (-(pm * ssm.H.transpose())).rowwise() +
                           yt.transpose();
      return std::make_pair(std::move(pm), std::move(resid));
    };
    auto log_obs = [&](const MatX<S>& u_prev) {
      auto [pm, resid] = residuals(u_prev);
      MatX<double> z = llt_innov.matrixL().solve(resid.transpose());
      VecX<double> lw =
          log_norm - 0.5 * z.colwise().squaredNorm().transpose().array();
      return lw;
    };
    auto propose = [&](const MatX<S>& u_prev, Rng& r) {
      auto [pm, resid] = residuals(u_prev);
      MatX<double> mean = pm + resid * kbar.transpose();
      MatX<double> draws =
          mean + r.normal_matrix<double>(u_prev.rows(), d) *
                     l_post.transpose();
      return MatX<S>(draws.template cast<S>());
    };
    ens = pf_step_generic(ens, log_obs, propose, rng, resampler);
    out.push_back(ens);
  }
  return out;
}

inline void write_ress_csv(const std::string& path,
                           const std::vector<double>& ress) {
  std::ofstream os(path);
  FLUID_CHECK(os.good(), "write_ress_csv: cannot open " + path);
  os << "# schema: fluid.ress.v1\n";
  os << "step,ress\n";
  os.precision(17);
  for (size_t t = 0; t < ress.size(); ++t)
    os << t + 1 << ',' << ress[t] << '\n';
  FLUID_CHECK(os.good(), "write_ress_csv: write failure on " + path);
}

}  // namespace fluid
