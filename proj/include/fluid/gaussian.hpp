#pragma once

#include "fluid/core.hpp"
#include "fluid/flow.hpp"

#include <cmath>
#include <utility>
#include <vector>

namespace fluid {

/// Linear-Gaussian state-space model
///   u_{t+1} = M u_t + w_t,  w ~ N(0, Q)
///   y_t     = H u_t + v_t,  v ~ N(0, R)
/// with initial state u_1 ~ N(mu0, Sigma0).
template <class S = double>
struct LinearSSM {
  MatX<S> M;
  MatX<S> H;
  MatX<S> Q;
  MatX<S> R;
  VecX<S> mu0;
  MatX<S> Sigma0;

  Eigen::Index state_dim() const { return M.rows(); }
  Eigen::Index obs_dim() const { return H.rows(); }

  void validate() const {
    FLUID_REQUIRE(M.rows() == M.cols(), "LinearSSM: M must be square");
    FLUID_REQUIRE(Q.rows() == M.rows() && Q.cols() == M.rows(),
                  "LinearSSM: Q shape mismatch");
    FLUID_REQUIRE(H.cols() == M.rows(), "LinearSSM: H shape mismatch");
    FLUID_REQUIRE(R.rows() == H.rows() && R.cols() == H.rows(),
                  "LinearSSM: R shape mismatch");
    FLUID_REQUIRE(mu0.size() == M.rows() && Sigma0.rows() == M.rows() &&
                      Sigma0.cols() == M.rows(),
                  "LinearSSM: initial moments shape mismatch");
    FLUID_REQUIRE((Q - Q.transpose()).cwiseAbs().maxCoeff() < S(1e-8),
                  "LinearSSM: Q must be symmetric");
    FLUID_REQUIRE((R - R.transpose()).cwiseAbs().maxCoeff() < S(1e-8),
                  "LinearSSM: R must be symmetric");
  }
};

template <class S = double>
struct GaussianBelief {
  VecX<S> mean;
  MatX<S> cov;
};

namespace detail {

template <class S>
MatX<S> symmetrize(const MatX<S>& a) {
  return ((a + a.transpose()) * S(0.5)).eval();
}

/// Cholesky factorization with jitter escalation 1e-10 .. 1e-6 on failure.
template <class S>
Eigen::LLT<MatX<S>> chol_with_jitter(const MatX<S>& a,
                                     const std::string& what) {
  Eigen::LLT<MatX<S>> llt(a);
  if (llt.info() == Eigen::Success) return llt;
  for (double jitter = 1e-10; jitter <= 1e-6 * 1.0001; jitter *= 10.0) {
    MatX<S> aj = a;
    aj.diagonal().array() += static_cast<S>(jitter);
    llt.compute(aj);
    if (llt.info() == Eigen::Success) return llt;
  }
  throw std::runtime_error("fluid: " + what +
                           " is not positive definite (jitter exhausted)");
}

}  // namespace detail

/// log N(x; mean, cov) via Cholesky.
template <class S>
S gaussian_log_density(const VecX<S>& x, const VecX<S>& mean,
                       const MatX<S>& cov) {
  const auto n = x.size();
  auto llt = detail::chol_with_jitter<S>(cov, "gaussian_log_density covariance");
  VecX<S> d = x - mean;
  VecX<S> z = llt.matrixL().solve(d);
  S log_det = S(0);
  for (Eigen::Index i = 0; i < n; ++i)
    log_det += S(2) * std::log(llt.matrixL()(i, i));
  return S(-0.5) * (static_cast<S>(n) * static_cast<S>(kLog2Pi) + log_det +
                    z.squaredNorm());
}

template <class S>
GaussianBelief<S> kalman_predict(const GaussianBelief<S>& belief,
                                 const LinearSSM<S>& ssm) {
  GaussianBelief<S> out;
  out.mean = ssm.M * belief.mean;
  out.cov = detail::symmetrize<S>(ssm.M * belief.cov * ssm.M.transpose() +
                                  ssm.Q);
  return out;
}

template <class S>
GaussianBelief<S> kalman_update(const GaussianBelief<S>& predicted,
                                const VecX<S>& y, const LinearSSM<S>& ssm) {
  FLUID_REQUIRE(y.size() == ssm.obs_dim(), "kalman_update: y size mismatch");
  MatX<S> innov_cov = detail::symmetrize<S>(
      ssm.H * predicted.cov * ssm.H.transpose() + ssm.R);
  auto llt = detail::chol_with_jitter<S>(innov_cov,
                                         "kalman_update innovation covariance");
  // K = P H^T S^{-1}, computed as solve(S, H P)^T
  MatX<S> K = llt.solve(ssm.H * predicted.cov).transpose();
  GaussianBelief<S> out;
  out.mean = predicted.mean + K * (y - ssm.H * predicted.mean);
  MatX<S> a = MatX<S>::Identity(ssm.state_dim(), ssm.state_dim()) - K * ssm.H;
  // Joseph form keeps the covariance symmetric PSD
  out.cov = detail::symmetrize<S>(a * predicted.cov * a.transpose() +
                                  K * ssm.R * K.transpose());
  return out;
}

/// Backward kernel p(u_t | u_{t+1}, y_{1:t}) = N(offset + G u_{t+1}, S)
/// derived from the filtered belief at time t.
template <class S>
struct RtsKernel {
  MatX<S> G;
  MatX<S> S_cov;
  VecX<S> offset;

  VecX<S> mean_given(const VecX<S>& u_next) const {
    return offset + G * u_next;
  }
};

template <class S>
RtsKernel<S> rts_backward_kernel(const GaussianBelief<S>& filtered,
                                 const LinearSSM<S>& ssm) {
  GaussianBelief<S> pred = kalman_predict(filtered, ssm);
  auto llt = detail::chol_with_jitter<S>(pred.cov,
                                         "rts_backward_kernel predicted cov");
  RtsKernel<S> k;
  // G = P_{t|t} M^T P_{t+1|t}^{-1}
  k.G = llt.solve(ssm.M * filtered.cov).transpose();
  k.S_cov = detail::symmetrize<S>(
      (MatX<S>::Identity(ssm.state_dim(), ssm.state_dim()) - k.G * ssm.M) *
      filtered.cov);
  k.offset = filtered.mean - k.G * pred.mean;
  return k;
}

/// p(u_t | y_t, u_{t-1}) for the linear model: mean M u + Kbar (y - H M u),
/// covariance (I - Kbar H) Q with Kbar = Q H^T (H Q H^T + R)^{-1}.
template <class S>
GaussianBelief<S> one_step_posterior(const VecX<S>& u_prev, const VecX<S>& y,
                                     const LinearSSM<S>& ssm) {
  MatX<S> innov_cov =
      detail::symmetrize<S>(ssm.H * ssm.Q * ssm.H.transpose() + ssm.R);
  auto llt = detail::chol_with_jitter<S>(innov_cov,
                                         "one_step_posterior innovation");
  MatX<S> kbar = llt.solve(ssm.H * ssm.Q).transpose();
  VecX<S> prior_mean = ssm.M * u_prev;
  GaussianBelief<S> out;
  out.mean = prior_mean + kbar * (y - ssm.H * prior_mean);
  out.cov = detail::symmetrize<S>(
      (MatX<S>::Identity(ssm.state_dim(), ssm.state_dim()) - kbar * ssm.H) *
      ssm.Q);
  return out;
}

/// log p(y_{t+1} | u_t) = log N(y_{t+1}; H M u_t, H Q H^T + R).
template <class S>
S predictive_log_density(const VecX<S>& u_t, const VecX<S>& y_next,
                         const LinearSSM<S>& ssm) {
  VecX<S> mean = ssm.H * (ssm.M * u_t);
  MatX<S> cov =
      detail::symmetrize<S>(ssm.H * ssm.Q * ssm.H.transpose() + ssm.R);
  return gaussian_log_density<S>(y_next, mean, cov);
}

/// Full filtering pass. The prior N(mu0, Sigma0) describes u_0; ys[t] is the
/// observation of u_{t+1}, so each step predicts first and then updates.
template <class S>
struct FilterResult {
  std::vector<GaussianBelief<S>> filtered;   // filtered[t] = p(u_{t+1}|y_{1:t+1})
  std::vector<GaussianBelief<S>> predicted;  // predicted[t] = p(u_{t+1}|y_{1:t})
};

template <class S>
FilterResult<S> kalman_filter(const std::vector<VecX<S>>& ys,
                              const LinearSSM<S>& ssm) {
  FLUID_REQUIRE(!ys.empty(), "kalman_filter: empty observation sequence");
  FilterResult<S> res;
  GaussianBelief<S> belief{ssm.mu0, ssm.Sigma0};
  for (size_t t = 0; t < ys.size(); ++t) {
    res.predicted.push_back(kalman_predict(belief, ssm));
    belief = kalman_update(res.predicted.back(), ys[t], ssm);
    res.filtered.push_back(belief);
  }
  return res;
}

/// RTS smoother marginals from a completed filtering pass.
template <class S>
std::vector<GaussianBelief<S>> rts_smoother(const FilterResult<S>& fr,
                                            const LinearSSM<S>& ssm) {
  const auto T = fr.filtered.size();
  std::vector<GaussianBelief<S>> smoothed(T);
  smoothed[T - 1] = fr.filtered[T - 1];
  for (size_t t = T - 1; t-- > 0;) {
    RtsKernel<S> k = rts_backward_kernel(fr.filtered[t], ssm);
    smoothed[t].mean = k.mean_given(smoothed[t + 1].mean);
    smoothed[t].cov = detail::symmetrize<S>(
        k.S_cov + k.G * smoothed[t + 1].cov * k.G.transpose());
  }
  return smoothed;
}

/// Closed-form KL(N_a || N_b).
template <class S>
S kl_gaussian_gaussian(const GaussianBelief<S>& a, const GaussianBelief<S>& b) {
  const auto n = a.mean.size();
  auto llt_b = detail::chol_with_jitter<S>(b.cov, "kl_gaussian_gaussian cov b");
  auto llt_a = detail::chol_with_jitter<S>(a.cov, "kl_gaussian_gaussian cov a");
  S log_det_a = S(0), log_det_b = S(0);
  for (Eigen::Index i = 0; i < n; ++i) {
    log_det_a += S(2) * std::log(llt_a.matrixL()(i, i));
    log_det_b += S(2) * std::log(llt_b.matrixL()(i, i));
  }
  const S trace_term = llt_b.solve(a.cov).trace();
  VecX<S> d = b.mean - a.mean;
  const S maha = d.dot(llt_b.solve(d));
  return S(0.5) * (trace_term + maha - static_cast<S>(n) + log_det_b -
                   log_det_a);
}

struct KlEstimate {
  double value = 0.0;
  double std_error = 0.0;
};

/// Monte Carlo KL(N(mean,cov) || p_flow(.|cond)) with standard error.
/// `cond` is a single conditioning row, broadcast over all draws; pass a
/// 1x0 matrix for unconditional flows.
template <class S>
KlEstimate kl_gaussian_vs_flow(const GaussianBelief<double>& belief,
                               const FlowModel<S>& flow,
                               const ParamStore<S>& store,
                               const Eigen::RowVectorXd& cond, int n_mc,
                               Rng& rng) {
  FLUID_REQUIRE(n_mc > 1, "kl_gaussian_vs_flow: n_mc must be > 1");
  const auto n = belief.mean.size();
  auto llt = detail::chol_with_jitter<double>(belief.cov,
                                              "kl_gaussian_vs_flow cov");
  MatX<double> chol_l = llt.matrixL();

  MatX<S> cond_rows(n_mc, cond.size());
  for (int i = 0; i < n_mc; ++i)
    cond_rows.row(i) = cond.template cast<S>();

  double sum = 0.0, sum_sq = 0.0;
  constexpr int kChunk = 1024;
  for (int done = 0; done < n_mc; done += kChunk) {
    const int b = std::min(kChunk, n_mc - done);
    MatX<double> z = rng.normal_matrix<double>(b, static_cast<int>(n));
    MatX<double> u =
        (z * chol_l.transpose()).rowwise() + belief.mean.transpose();
    VecX<S> flow_lp =
        flow.log_prob(store, u.template cast<S>(), cond_rows.topRows(b));
    for (int i = 0; i < b; ++i) {
      const double lg = gaussian_log_density<double>(
          u.row(i).transpose(), belief.mean, belief.cov);
      const double lf = static_cast<double>(flow_lp(i));
      FLUID_CHECK(std::isfinite(lf),
                  "kl_gaussian_vs_flow: non-finite flow log-prob");
      const double term = lg - lf;
      sum += term;
      sum_sq += term * term;
    }
  }
  KlEstimate est;
  est.value = sum / n_mc;
  const double var = (sum_sq - sum * sum / n_mc) / (n_mc - 1);
  est.std_error = std::sqrt(std::max(var, 0.0) / n_mc);
  return est;
}

}  // namespace fluid
