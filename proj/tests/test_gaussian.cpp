#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fluid/gaussian.hpp"

#include <Eigen/Eigenvalues>

using namespace fluid;

namespace {

LinearSSM<double> scalar_ssm(double m, double q, double h, double r,
                             double mu, double sigma2) {
  LinearSSM<double> ssm;
  ssm.M = MatX<double>::Constant(1, 1, m);
  ssm.Q = MatX<double>::Constant(1, 1, q);
  ssm.H = MatX<double>::Constant(1, 1, h);
  ssm.R = MatX<double>::Constant(1, 1, r);
  ssm.mu0 = VecX<double>::Constant(1, mu);
  ssm.Sigma0 = MatX<double>::Constant(1, 1, sigma2);
  ssm.validate();
  return ssm;
}

LinearSSM<double> random_ssm(int n, int ny, Rng& rng) {
  LinearSSM<double> ssm;
  ssm.M = 0.5 * rng.normal_matrix<double>(n, n) / std::sqrt(double(n));
  ssm.H = rng.normal_matrix<double>(ny, n);
  MatX<double> a = rng.normal_matrix<double>(n, n);
  ssm.Q = 0.3 * (a * a.transpose()) / double(n);
  MatX<double> b = rng.normal_matrix<double>(ny, ny);
  ssm.R = 0.5 * (b * b.transpose()) / double(ny) +
          0.1 * MatX<double>::Identity(ny, ny);
  ssm.mu0 = rng.normal_vector<double>(n);
  MatX<double> c = rng.normal_matrix<double>(n, n);
  ssm.Sigma0 = (c * c.transpose()) / double(n) +
               0.05 * MatX<double>::Identity(n, n);
  ssm.validate();
  return ssm;
}

std::vector<VecX<double>> simulate_obs(const LinearSSM<double>& ssm, int T,
                                       Rng& rng) {
  Eigen::LLT<MatX<double>> ls(ssm.Sigma0), lq(ssm.Q), lr(ssm.R);
  const int n = static_cast<int>(ssm.state_dim());
  const int ny = static_cast<int>(ssm.obs_dim());
  VecX<double> u =
      ssm.mu0 + MatX<double>(ls.matrixL()) * rng.normal_vector<double>(n);
  std::vector<VecX<double>> ys;
  for (int t = 0; t < T; ++t) {
    u = ssm.M * u +
        MatX<double>(lq.matrixL()) * rng.normal_vector<double>(n);
    ys.push_back(ssm.H * u +
                 MatX<double>(lr.matrixL()) * rng.normal_vector<double>(ny));
  }
  return ys;
}

double min_eigenvalue(const MatX<double>& a) {
  Eigen::SelfAdjointEigenSolver<MatX<double>> es(a);
  return es.eigenvalues().minCoeff();
}

/// Exact joint Gaussian over (u_{1:T}, y_{1:T}) built by brute force, then
/// conditioned on all observations. Returns the posterior over u_{1:T}.
GaussianBelief<double> joint_conditioning_oracle(
    const LinearSSM<double>& ssm, const std::vector<VecX<double>>& ys) {
  const int n = static_cast<int>(ssm.state_dim());
  const int ny = static_cast<int>(ssm.obs_dim());
  const int T = static_cast<int>(ys.size());

  std::vector<VecX<double>> mu(static_cast<size_t>(T));
  std::vector<std::vector<MatX<double>>> c(static_cast<size_t>(T));
  // u_1 = M u_0 + w with u_0 ~ N(mu0, Sigma0)
  mu[0] = ssm.M * ssm.mu0;
  c[0] = {ssm.M * ssm.Sigma0 * ssm.M.transpose() + ssm.Q};
  for (int t = 1; t < T; ++t) {
    mu[static_cast<size_t>(t)] = ssm.M * mu[static_cast<size_t>(t - 1)];
    c[static_cast<size_t>(t)].resize(static_cast<size_t>(t) + 1);
    for (int s = 0; s < t; ++s)
      c[static_cast<size_t>(t)][static_cast<size_t>(s)] =
          ssm.M * c[static_cast<size_t>(t - 1)][static_cast<size_t>(s)];
    c[static_cast<size_t>(t)][static_cast<size_t>(t)] =
        ssm.M * c[static_cast<size_t>(t - 1)][static_cast<size_t>(t - 1)] *
            ssm.M.transpose() +
        ssm.Q;
  }
  auto cov_uu = [&](int t, int s) -> MatX<double> {
    if (t >= s) return c[static_cast<size_t>(t)][static_cast<size_t>(s)];
    return c[static_cast<size_t>(s)][static_cast<size_t>(t)].transpose();
  };

  VecX<double> mean_u(T * n), mean_y(T * ny), yvec(T * ny);
  MatX<double> cuu(T * n, T * n), cuy(T * n, T * ny), cyy(T * ny, T * ny);
  for (int t = 0; t < T; ++t) {
    mean_u.segment(t * n, n) = mu[static_cast<size_t>(t)];
    mean_y.segment(t * ny, ny) = ssm.H * mu[static_cast<size_t>(t)];
    yvec.segment(t * ny, ny) = ys[static_cast<size_t>(t)];
    for (int s = 0; s < T; ++s) {
      MatX<double> cts = cov_uu(t, s);
      cuu.block(t * n, s * n, n, n) = cts;
      cuy.block(t * n, s * ny, n, ny) = cts * ssm.H.transpose();
      cyy.block(t * ny, s * ny, ny, ny) = ssm.H * cts * ssm.H.transpose();
      if (t == s) cyy.block(t * ny, s * ny, ny, ny) += ssm.R;
    }
  }
  Eigen::LLT<MatX<double>> llt(cyy);
  GaussianBelief<double> post;
  post.mean = mean_u + cuy * llt.solve(yvec - mean_y);
  post.cov = cuu - cuy * llt.solve(cuy.transpose());
  return post;
}

}  // namespace

TEST_CASE("kalman_update: nearly uninformative observation keeps the prior") {
  LinearSSM<double> ssm = scalar_ssm(1.0, 0.1, 1.0, 1e8, 0.0, 1.0);
  GaussianBelief<double> prior{VecX<double>::Constant(1, 0.3),
                               MatX<double>::Constant(1, 1, 2.0)};
  VecX<double> y = VecX<double>::Constant(1, 50.0);
  auto post = kalman_update(prior, y, ssm);
  CHECK(std::abs(post.mean(0) - 0.3) < 1e-3 * std::sqrt(2.0));
  CHECK(post.cov(0, 0) == doctest::Approx(2.0).epsilon(1e-3));
}

TEST_CASE("kalman_update: scalar Bayes hand computation") {
  // prior N(0,1), unit-noise observation y=2 -> posterior N(1, 0.5)
  LinearSSM<double> ssm = scalar_ssm(1.0, 0.0, 1.0, 1.0, 0.0, 1.0);
  GaussianBelief<double> prior{ssm.mu0, ssm.Sigma0};
  VecX<double> y = VecX<double>::Constant(1, 2.0);
  auto post = kalman_update(prior, y, ssm);
  CHECK(post.mean(0) == doctest::Approx(1.0));
  CHECK(post.cov(0, 0) == doctest::Approx(0.5));
}

TEST_CASE("kalman_filter: matches joint-Gaussian conditioning oracle") {
  Rng rng(21);
  for (int n : {1, 2, 3}) {
    const int ny = std::max(1, n - 1);
    LinearSSM<double> ssm = random_ssm(n, ny, rng);
    const int T = 5;
    auto ys = simulate_obs(ssm, T, rng);
    auto fr = kalman_filter(ys, ssm);
    auto smoothed = rts_smoother(fr, ssm);
    auto joint = joint_conditioning_oracle(ssm, ys);

    // terminal filtering marginal
    const auto& last = fr.filtered.back();
    CHECK((last.mean - joint.mean.segment((T - 1) * n, n)).cwiseAbs()
              .maxCoeff() < 1e-8);
    CHECK((last.cov - joint.cov.block((T - 1) * n, (T - 1) * n, n, n))
              .cwiseAbs()
              .maxCoeff() < 1e-8);
    // all smoothing marginals
    for (int t = 0; t < T; ++t) {
      CHECK((smoothed[static_cast<size_t>(t)].mean -
             joint.mean.segment(t * n, n))
                .cwiseAbs()
                .maxCoeff() < 1e-8);
      CHECK((smoothed[static_cast<size_t>(t)].cov -
             joint.cov.block(t * n, t * n, n, n))
                .cwiseAbs()
                .maxCoeff() < 1e-8);
    }
  }
}

TEST_CASE("covariances stay symmetric PSD through filtering") {
  Rng rng(33);
  LinearSSM<double> ssm = random_ssm(3, 2, rng);
  auto ys = simulate_obs(ssm, 20, rng);
  auto fr = kalman_filter(ys, ssm);
  for (const auto& b : fr.filtered) {
    CHECK((b.cov - b.cov.transpose()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(min_eigenvalue(b.cov) >= -1e-10);
  }
}

TEST_CASE("rts_backward_kernel: deterministic dynamics give G=I, S=0") {
  LinearSSM<double> ssm = scalar_ssm(1.0, 0.0, 1.0, 1.0, 0.0, 1.0);
  ssm.M = MatX<double>::Identity(1, 1);
  GaussianBelief<double> filtered{VecX<double>::Constant(1, 0.4),
                                  MatX<double>::Constant(1, 1, 0.7)};
  auto k = rts_backward_kernel(filtered, ssm);
  CHECK(k.G(0, 0) == doctest::Approx(1.0));
  CHECK(std::abs(k.S_cov(0, 0)) < 1e-12);
}

TEST_CASE("rts_backward_kernel: scalar hand check") {
  // P=1, M=1, Q=1 -> predicted var 2, G = 1/2, S = 1/2
  LinearSSM<double> ssm = scalar_ssm(1.0, 1.0, 1.0, 1.0, 0.0, 1.0);
  GaussianBelief<double> filtered{VecX<double>::Zero(1),
                                  MatX<double>::Identity(1, 1)};
  auto k = rts_backward_kernel(filtered, ssm);
  CHECK(k.G(0, 0) == doctest::Approx(0.5));
  CHECK(k.S_cov(0, 0) == doctest::Approx(0.5));
}

TEST_CASE("backward-kernel sampling reproduces RTS smoother marginals") {
  Rng rng(55);
  LinearSSM<double> ssm = random_ssm(2, 1, rng);
  const int T = 4, N = 40000;
  auto ys = simulate_obs(ssm, T, rng);
  auto fr = kalman_filter(ys, ssm);
  auto smoothed = rts_smoother(fr, ssm);

  // draw terminal filter samples, then recurse the backward kernel
  std::vector<MatX<double>> samples(static_cast<size_t>(T));
  Eigen::LLT<MatX<double>> lterm(fr.filtered.back().cov);
  samples[T - 1] =
      (rng.normal_matrix<double>(N, 2) *
       MatX<double>(lterm.matrixL()).transpose())
          .rowwise() +
      fr.filtered.back().mean.transpose();
  for (int t = T - 2; t >= 0; --t) {
    auto k = rts_backward_kernel(fr.filtered[static_cast<size_t>(t)], ssm);
    Eigen::LLT<MatX<double>> lk(
        k.S_cov + 1e-12 * MatX<double>::Identity(2, 2));
    samples[static_cast<size_t>(t)] =
        (samples[static_cast<size_t>(t + 1)] * k.G.transpose()).rowwise() +
        k.offset.transpose();
    samples[static_cast<size_t>(t)] +=
        rng.normal_matrix<double>(N, 2) *
        MatX<double>(lk.matrixL()).transpose();
  }
  for (int t = 0; t < T; ++t) {
    const auto& ref = smoothed[static_cast<size_t>(t)];
    VecX<double> emp_mean =
        samples[static_cast<size_t>(t)].colwise().mean().transpose();
    for (int i = 0; i < 2; ++i) {
      const double mc_sigma = std::sqrt(ref.cov(i, i) / N);
      CHECK(std::abs(emp_mean(i) - ref.mean(i)) < 3.0 * mc_sigma);
      MatX<double> centered =
          samples[static_cast<size_t>(t)].col(i).array() - emp_mean(i);
      const double emp_var = centered.squaredNorm() / (N - 1);
      // variance of the sample variance is about 2 sigma^4 / N
      const double var_sigma = std::sqrt(2.0 / N) * ref.cov(i, i);
      CHECK(std::abs(emp_var - ref.cov(i, i)) < 3.0 * var_sigma);
    }
  }
}

TEST_CASE("one_step_posterior: zero process noise is deterministic") {
  LinearSSM<double> ssm = scalar_ssm(2.0, 0.0, 1.0, 1.0, 0.0, 1.0);
  VecX<double> u = VecX<double>::Constant(1, 0.3);
  VecX<double> y = VecX<double>::Constant(1, 5.0);
  auto post = one_step_posterior(u, y, ssm);
  CHECK(post.mean(0) == doctest::Approx(0.6));
  CHECK(std::abs(post.cov(0, 0)) < 1e-9);
}

TEST_CASE("one_step_posterior: scalar gain 0.5") {
  LinearSSM<double> ssm = scalar_ssm(1.0, 1.0, 1.0, 1.0, 0.0, 1.0);
  VecX<double> u = VecX<double>::Zero(1);
  VecX<double> y = VecX<double>::Constant(1, 2.0);
  auto post = one_step_posterior(u, y, ssm);
  CHECK(post.mean(0) == doctest::Approx(1.0));  // Kbar = 0.5, y - HMu = 2
  CHECK(post.cov(0, 0) == doctest::Approx(0.5));
}

TEST_CASE("one_step_posterior equals kalman_update with pushed-forward delta") {
  Rng rng(9);
  LinearSSM<double> ssm = random_ssm(3, 2, rng);
  VecX<double> u = rng.normal_vector<double>(3);
  VecX<double> y = rng.normal_vector<double>(2);
  GaussianBelief<double> pushed{ssm.M * u, ssm.Q};
  auto via_update = kalman_update(pushed, y, ssm);
  auto direct = one_step_posterior(u, y, ssm);
  CHECK((via_update.mean - direct.mean).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((via_update.cov - direct.cov).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("predictive_log_density: value at the mean and scalar hand check") {
  Rng rng(10);
  LinearSSM<double> ssm = random_ssm(2, 2, rng);
  VecX<double> u = rng.normal_vector<double>(2);
  MatX<double> cov = ssm.H * ssm.Q * ssm.H.transpose() + ssm.R;
  VecX<double> mean = ssm.H * ssm.M * u;
  const double at_mean = predictive_log_density(u, mean, ssm);
  CHECK(at_mean ==
        doctest::Approx(-0.5 * std::log((2.0 * M_PI * cov).determinant())));

  // scalar: M=1, Q=1, H=1, R=1, u=0 -> y ~ N(0, 2)
  LinearSSM<double> s1 = scalar_ssm(1.0, 1.0, 1.0, 1.0, 0.0, 1.0);
  VecX<double> u0 = VecX<double>::Zero(1);
  VecX<double> y1 = VecX<double>::Constant(1, 1.0);
  const double lp = predictive_log_density(u0, y1, s1);
  CHECK(lp == doctest::Approx(-0.5 * std::log(4.0 * M_PI) - 0.25));
}

TEST_CASE("predictive_log_density: agrees with simulation histogram") {
  LinearSSM<double> ssm = scalar_ssm(0.9, 0.5, 1.0, 0.2, 0.0, 1.0);
  VecX<double> u = VecX<double>::Constant(1, 1.0);
  Rng rng(77);
  const int N = 400000;
  const double y0 = 0.9, half_width = 0.05;
  int hits = 0;
  for (int i = 0; i < N; ++i) {
    const double y = 0.9 * 1.0 + std::sqrt(0.5) * rng.normal() +
                     std::sqrt(0.2) * rng.normal();
    if (std::abs(y - y0) < half_width) ++hits;
  }
  const double est = hits / (N * 2.0 * half_width);
  VecX<double> yv = VecX<double>::Constant(1, y0);
  const double exact = std::exp(predictive_log_density(u, yv, ssm));
  CHECK(std::abs(est - exact) / exact < 0.05);
}

TEST_CASE("kl_gaussian_gaussian: zero iff equal, positive otherwise") {
  Rng rng(12);
  GaussianBelief<double> a;
  a.mean = rng.normal_vector<double>(3);
  MatX<double> w = rng.normal_matrix<double>(3, 3);
  a.cov = w * w.transpose() + 0.1 * MatX<double>::Identity(3, 3);
  CHECK(std::abs(kl_gaussian_gaussian(a, a)) < 1e-10);

  GaussianBelief<double> b = a;
  b.mean(0) += 0.5;
  CHECK(kl_gaussian_gaussian(a, b) > 0.0);
  b = a;
  b.cov *= 2.0;
  CHECK(kl_gaussian_gaussian(a, b) > 0.0);

  // scalar closed form: KL(N(0,1) || N(1,1)) = 1/2
  GaussianBelief<double> p{VecX<double>::Zero(1), MatX<double>::Identity(1, 1)};
  GaussianBelief<double> q{VecX<double>::Constant(1, 1.0),
                           MatX<double>::Identity(1, 1)};
  CHECK(kl_gaussian_gaussian(p, q) == doctest::Approx(0.5));
}

TEST_CASE("kl_gaussian_vs_flow: identity-initialized flow matches N(0, I)") {
  // flow readouts start at zero so the flow density is the standard normal
  FlowConfig cfg;
  cfg.data_dim = 2;
  cfg.cond_dim = 0;
  cfg.num_coupling = 2;
  cfg.rff_features = 8;
  cfg.mlp_depth = 2;
  cfg.mlp_width = 16;
  ParamStore<double> store;
  Rng init_rng(3);
  FlowModel<double> flow(cfg, store, "flow", init_rng);

  GaussianBelief<double> belief{VecX<double>::Zero(2),
                                MatX<double>::Identity(2, 2)};
  Rng rng(4);
  Eigen::RowVectorXd cond(0);
  auto est = kl_gaussian_vs_flow(belief, flow, store, cond, 10000, rng);
  CHECK(std::abs(est.value) < 1e-8);  // exact cancellation sample by sample
  CHECK(est.std_error >= 0.0);

  // shifted target: KL(N(m,I) || N(0,I)) = |m|^2 / 2, estimator within 3 SE
  GaussianBelief<double> shifted{VecX<double>::Constant(2, 0.5),
                                 MatX<double>::Identity(2, 2)};
  auto est2 = kl_gaussian_vs_flow(shifted, flow, store, cond, 20000, rng);
  CHECK(est2.std_error > 0.0);
  CHECK(std::abs(est2.value - 0.25) < 3.0 * est2.std_error);
}

TEST_CASE("chol jitter: near-singular covariance still factorizes") {
  MatX<double> cov(2, 2);
  cov << 1.0, 1.0, 1.0, 1.0;  // rank one
  VecX<double> x = VecX<double>::Zero(2);
  CHECK(std::isfinite(gaussian_log_density<double>(x, x, cov)));
  MatX<double> bad = -MatX<double>::Identity(2, 2);
  CHECK_THROWS(gaussian_log_density<double>(x, x, bad));
}
