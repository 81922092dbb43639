#pragma once

#include "fluid/core.hpp"
#include "fluid/dataset.hpp"
#include "fluid/gaussian.hpp"

#include <cmath>
#include <complex>
#include <string>
#include <vector>

namespace fluid {

// ---------------------------------------------------------------------------
// Advection-diffusion benchmarks (linear-Gaussian)
// ---------------------------------------------------------------------------

enum class AdvDiffScheme { kUpwind, kLaxWendroff };
enum class AdvDiffObservation { kSubsampleEven, kGroupAverage };

struct AdvDiffSpec {
  int n = 10;             // grid points on [0,1), dx = 1/n
  double a = -1.0;        // advection speed
  double kappa = 0.0;     // diffusion coefficient
  double dt_obs = 0.05;   // observation interval
  double q = 0.01;        // Case 1 coarse-scale noise variance (Q = q I)
  double r = 0.1;         // observation noise variance (R = r I)
  double sigma0 = 0.05;   // initial std (Sigma = sigma0^2 I)
  AdvDiffScheme scheme = AdvDiffScheme::kUpwind;
  AdvDiffObservation observation = AdvDiffObservation::kSubsampleEven;
  int n_groups = 8;       // group-average observation only
  bool fine_step_noise = false;  // Case 2: Q induced from per-fine-step noise
};

inline AdvDiffSpec advdiff_case1(int n) {
  AdvDiffSpec s;
  s.n = n;
  return s;
}

inline AdvDiffSpec advdiff_case2(int n) {
  AdvDiffSpec s;
  s.n = n;
  s.a = 1.0;
  s.kappa = 0.01;
  s.dt_obs = 0.01;
  s.r = 0.01;
  s.sigma0 = 0.05 / n;
  s.scheme = AdvDiffScheme::kLaxWendroff;
  s.observation = AdvDiffObservation::kGroupAverage;
  s.fine_step_noise = true;
  return s;
}

namespace detail {

/// One fine-step update matrix for the periodic advection-diffusion
/// discretization. Returns the circulant matrix and its three stencil
/// coefficients (c_minus on u_{j-1}, c_0 on u_j, c_plus on u_{j+1}).
inline MatX<double> advdiff_step_matrix(const AdvDiffSpec& spec, double dt,
                                        double* c_minus_out = nullptr,
                                        double* c0_out = nullptr,
                                        double* c_plus_out = nullptr) {
  const int n = spec.n;
  const double dx = 1.0 / n;
  double c_minus = 0.0, c0 = 1.0, c_plus = 0.0;
  if (spec.scheme == AdvDiffScheme::kUpwind) {
    FLUID_REQUIRE(spec.kappa == 0.0,
                  "advdiff: upwind scheme implemented for kappa = 0 only");
    const double nu = std::abs(spec.a) * dt / dx;
    if (spec.a < 0.0) {  // right-moving transport, backward difference
      c_minus = nu;
      c0 = 1.0 - nu;
    } else {
      c_plus = nu;
      c0 = 1.0 - nu;
    }
  } else {
    // Lax-Wendroff advection plus centered explicit diffusion
    const double adv = spec.a * dt / (2.0 * dx);
    const double diff =
        spec.kappa * dt / (dx * dx) + spec.a * spec.a * dt * dt / (2.0 * dx * dx);
    c_minus = -adv + diff;
    c_plus = adv + diff;
    c0 = 1.0 - 2.0 * diff;
  }
  if (c_minus_out) *c_minus_out = c_minus;
  if (c0_out) *c0_out = c0;
  if (c_plus_out) *c_plus_out = c_plus;

  MatX<double> m = MatX<double>::Zero(n, n);
  for (int j = 0; j < n; ++j) {
    m(j, (j + n - 1) % n) += c_minus;
    m(j, j) += c0;
    m(j, (j + 1) % n) += c_plus;
  }
  return m;
}

/// Spectral radius of the circulant stencil via its Fourier symbol, exact
/// for periodic three-point schemes.
inline double advdiff_symbol_radius(double c_minus, double c0, double c_plus,
                                    int n) {
  double worst = 0.0;
  for (int k = 0; k < n; ++k) {
    const double theta = 2.0 * M_PI * k / n;
    const std::complex<double> g =
        c0 + c_minus * std::exp(std::complex<double>(0.0, -theta)) +
        c_plus * std::exp(std::complex<double>(0.0, theta));
    worst = std::max(worst, std::abs(g));
  }
  return worst;
}

}  // namespace detail

/// Selects the largest stable fine step dt = dt_obs / 2^k (smallest k such
/// that the periodic symbol satisfies |g| <= 1 + 1e-9) and returns the number
/// of fine steps per observation interval.
inline int advdiff_fine_steps(const AdvDiffSpec& spec) {
  double worst_radius = 0.0;
  for (int m = 1; m <= (1 << 20); m *= 2) {
    double cm, c0, cp;
    detail::advdiff_step_matrix(spec, spec.dt_obs / m, &cm, &c0, &cp);
    worst_radius = detail::advdiff_symbol_radius(cm, c0, cp, spec.n);
    if (worst_radius <= 1.0 + 1e-9) return m;
  }
  throw std::invalid_argument(
      "advdiff: no stable fine step found; symbol radius " +
      std::to_string(worst_radius) + " at the smallest step tried");
}

inline LinearSSM<double> build_advdiff(const AdvDiffSpec& spec) {
  FLUID_REQUIRE(spec.n >= 4, "advdiff: n must be at least 4");
  const int n = spec.n;
  const int m_n = advdiff_fine_steps(spec);
  const MatX<double> m_fine =
      detail::advdiff_step_matrix(spec, spec.dt_obs / m_n);

  LinearSSM<double> ssm;
  ssm.M = MatX<double>::Identity(n, n);
  for (int i = 0; i < m_n; ++i) ssm.M = m_fine * ssm.M;

  if (spec.fine_step_noise) {
    // Q = sum_i M_dt^i Q_dt (M_dt^i)^T with Q_dt = (dt/n) I
    const double q_fine = (spec.dt_obs / m_n) / n;
    MatX<double> power = MatX<double>::Identity(n, n);
    ssm.Q = MatX<double>::Zero(n, n);
    for (int i = 0; i < m_n; ++i) {
      ssm.Q += q_fine * power * power.transpose();
      power = m_fine * power;
    }
    ssm.Q = 0.5 * (ssm.Q + ssm.Q.transpose());
  } else {
    ssm.Q = spec.q * MatX<double>::Identity(n, n);
  }

  if (spec.observation == AdvDiffObservation::kSubsampleEven) {
    FLUID_REQUIRE(n % 2 == 0, "advdiff: even-subsample needs even n");
    const int ny = n / 2;
    ssm.H = MatX<double>::Zero(ny, n);
    for (int i = 0; i < ny; ++i) ssm.H(i, 2 * i) = 1.0;
  } else {
    FLUID_REQUIRE(spec.n_groups > 0 && n % spec.n_groups == 0,
                  "advdiff: n must be divisible by the group count");
    const int ny = spec.n_groups;
    const int group = n / ny;
    ssm.H = MatX<double>::Zero(ny, n);
    for (int i = 0; i < ny; ++i)
      for (int j = 0; j < group; ++j) ssm.H(i, i * group + j) = 1.0 / group;
  }
  const auto ny = ssm.H.rows();
  ssm.R = spec.r * MatX<double>::Identity(ny, ny);

  ssm.mu0 = VecX<double>(n);
  for (int j = 0; j < n; ++j) ssm.mu0(j) = std::sin(2.0 * M_PI * j / n);
  ssm.Sigma0 = spec.sigma0 * spec.sigma0 * MatX<double>::Identity(n, n);
  ssm.validate();
  return ssm;
}

/// Exact linear-Gaussian recursion; one rng stream per call.
inline std::vector<Trajectory> simulate_linear(const LinearSSM<double>& ssm,
                                               int T, int N, Rng& rng) {
  FLUID_REQUIRE(T >= 1 && N >= 1, "simulate_linear: T and N must be >= 1");
  const int n = static_cast<int>(ssm.state_dim());
  const int ny = static_cast<int>(ssm.obs_dim());
  Eigen::LLT<MatX<double>> ls(ssm.Sigma0);
  FLUID_CHECK(ls.info() == Eigen::Success || ssm.Sigma0.norm() == 0.0,
              "simulate_linear: Sigma0 not PSD");
  MatX<double> l0 = ssm.Sigma0.norm() == 0.0 ? MatX<double>::Zero(n, n)
                                             : MatX<double>(ls.matrixL());
  MatX<double> lq = MatX<double>::Zero(n, n);
  if (ssm.Q.norm() > 0.0)
    lq = detail::chol_with_jitter<double>(ssm.Q, "simulate_linear Q").matrixL();
  MatX<double> lr = MatX<double>::Zero(ny, ny);
  if (ssm.R.norm() > 0.0)
    lr = detail::chol_with_jitter<double>(ssm.R, "simulate_linear R").matrixL();

  std::vector<Trajectory> out;
  out.reserve(static_cast<size_t>(N));
  for (int i = 0; i < N; ++i) {
    MatX<double> u(T, n), y(T, ny);
    VecX<double> state = ssm.mu0 + l0 * rng.normal_vector<double>(n);
    for (int t = 0; t < T; ++t) {
      // u_0 is the uncertain initial state; recorded steps start at u_1
      state = ssm.M * state + lq * rng.normal_vector<double>(n);
      u.row(t) = state.transpose();
      y.row(t) =
          (ssm.H * state + lr * rng.normal_vector<double>(ny)).transpose();
    }
    out.push_back({u.cast<float>(), y.cast<float>()});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Two-factor stochastic volatility
// ---------------------------------------------------------------------------

struct SVSpec {
  Eigen::Vector2d alpha = Eigen::Vector2d::Zero();
  double gamma1 = 0.97, gamma2 = 0.97;
  double sigma1 = 0.3, sigma2 = 0.3;
  double beta = 0.835;

  double tau_sq(int i) const {
    const double g = i == 0 ? gamma1 : gamma2;
    const double s = i == 0 ? sigma1 : sigma2;
    return s * s / (1.0 - g * g);
  }
};

inline std::vector<Trajectory> simulate_sv(const SVSpec& spec, int T, int N,
                                           Rng& rng) {
  FLUID_REQUIRE(std::abs(spec.gamma1) < 1.0 && std::abs(spec.gamma2) < 1.0,
                "simulate_sv: |gamma| must be < 1 for stationarity");
  FLUID_REQUIRE(T >= 1 && N >= 1, "simulate_sv: T and N must be >= 1");
  const Eigen::Vector2d gamma(spec.gamma1, spec.gamma2);
  const Eigen::Vector2d sigma(spec.sigma1, spec.sigma2);
  const Eigen::Vector2d tau(std::sqrt(spec.tau_sq(0)),
                            std::sqrt(spec.tau_sq(1)));
  std::vector<Trajectory> out;
  out.reserve(static_cast<size_t>(N));
  for (int i = 0; i < N; ++i) {
    MatX<double> u(T, 2), y(T, 2);
    Eigen::Vector2d state =
        tau.cwiseProduct(rng.normal_vector<double>(2));
    for (int t = 0; t < T; ++t) {
      state = spec.alpha + gamma.cwiseProduct(state - spec.alpha) +
              sigma.cwiseProduct(rng.normal_vector<double>(2));
      u.row(t) = state.transpose();
      const Eigen::Vector2d eps = rng.normal_vector<double>(2);
      y.row(t) =
          (spec.beta * (0.5 * state).array().exp() * eps.array()).matrix()
              .transpose();
    }
    out.push_back({u.cast<float>(), y.cast<float>()});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stochastic Burgers equation
// ---------------------------------------------------------------------------

struct BurgersSpec {
  double nu = 0.05;
  double sigma = 1.0;
  int n_space = 50;       // grid points on [-1,1] including both boundaries
  double dt_obs = 0.005;  // observation interval (201 x 50 grid over [0,1])
  int substeps = 1;       // fine steps per observation interval
  double r2 = 0.01;       // observation noise variance
  double blowup_limit = 1e3;
};

/// Semi-implicit step: explicit centered advection, implicit diffusion on
/// the interior points, homogeneous Dirichlet boundaries.
class BurgersSolver {
 public:
  explicit BurgersSolver(const BurgersSpec& spec)
      : spec_(spec),
        n_(spec.n_space),
        dx_(2.0 / (spec.n_space - 1)),
        dt_(spec.dt_obs / spec.substeps) {
    FLUID_REQUIRE(n_ >= 4, "burgers: need at least 4 grid points");
    FLUID_REQUIRE(spec.substeps >= 1, "burgers: substeps must be >= 1");
    const int ni = n_ - 2;
    MatX<double> lhs = MatX<double>::Identity(ni, ni);
    const double mu = spec_.nu * dt_ / (dx_ * dx_);
    for (int i = 0; i < ni; ++i) {
      lhs(i, i) += 2.0 * mu;
      if (i > 0) lhs(i, i - 1) -= mu;
      if (i + 1 < ni) lhs(i, i + 1) -= mu;
    }
    diffusion_solver_.compute(lhs);
  }

  VecX<double> initial_state() const {
    VecX<double> u(n_);
    for (int j = 0; j < n_; ++j)
      u(j) = -std::sin(M_PI * (-1.0 + j * dx_));
    u(0) = 0.0;
    u(n_ - 1) = 0.0;
    return u;
  }

  /// Advances one fine step in place. rng may be null for sigma = 0.
  void step(VecX<double>& u, Rng* rng) const {
    const int ni = n_ - 2;
    VecX<double> rhs(ni);
    for (int i = 1; i <= ni; ++i) {
      const double advect = u(i) * (u(i + 1) - u(i - 1)) / (2.0 * dx_);
      rhs(i - 1) = u(i) - dt_ * advect;
    }
    if (rng && spec_.sigma > 0.0)
      rhs += spec_.sigma * std::sqrt(dt_) * rng->normal_vector<double>(ni);
    VecX<double> interior = diffusion_solver_.solve(rhs);
    u.segment(1, ni) = interior;
    u(0) = 0.0;
    u(n_ - 1) = 0.0;
    FLUID_CHECK(u.allFinite() &&
                    u.cwiseAbs().maxCoeff() <= spec_.blowup_limit,
                "burgers: state blow-up, |u|_inf = " +
                    std::to_string(u.cwiseAbs().maxCoeff()));
  }

  int n_space() const { return n_; }
  double dx() const { return dx_; }

 private:
  BurgersSpec spec_;
  int n_;
  double dx_;
  double dt_;
  Eigen::PartialPivLU<MatX<double>> diffusion_solver_;
};

/// Observed components: 1-based odd grid indices x_1, x_3, ..., x_49.
inline std::vector<int> burgers_obs_indices(int n_space) {
  std::vector<int> idx;
  for (int j = 0; j < n_space; j += 2) idx.push_back(j);
  return idx;
}

inline std::vector<Trajectory> simulate_burgers(const BurgersSpec& spec, int T,
                                                int N, Rng& rng) {
  FLUID_REQUIRE(T >= 1 && N >= 1, "simulate_burgers: T and N must be >= 1");
  BurgersSolver solver(spec);
  const auto obs = burgers_obs_indices(spec.n_space);
  const int ny = static_cast<int>(obs.size());
  const double r = std::sqrt(spec.r2);
  std::vector<Trajectory> out;
  out.reserve(static_cast<size_t>(N));
  for (int i = 0; i < N; ++i) {
    MatX<double> u(T, spec.n_space), y(T, ny);
    VecX<double> state = solver.initial_state();
    for (int t = 0; t < T; ++t) {
      for (int s = 0; s < spec.substeps; ++s) solver.step(state, &rng);
      u.row(t) = state.transpose();
      for (int j = 0; j < ny; ++j)
        y(t, j) = state(obs[static_cast<size_t>(j)]) + r * rng.normal();
    }
    out.push_back({u.cast<float>(), y.cast<float>()});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Lorenz-96, single- and two-scale
// ---------------------------------------------------------------------------

struct LorenzSpec {
  int K = 16;          // slow variables
  int J = 32;          // fast variables per slow variable
  double F = 8.0;
  double h = 1.0;
  double b = 10.0;
  double c = 4.0;      // 0 switches off the fast scale
  double sigma_u = 0.1;
  double sigma_v = 0.01;
  bool two_scale = true;
  double dt_obs = 0.05;
  double dt_int = 0.005;  // Euler-Maruyama fine step
  double blowup_limit = 1e3;
  VecX<double> u0_slow;   // optional; empty selects the default initial state
};

inline LorenzSpec lorenz_single_scale(int K, double F = 8.0) {
  LorenzSpec s;
  s.K = K;
  s.F = F;
  s.c = 0.0;
  s.sigma_u = 1.0;
  s.two_scale = false;
  return s;
}

namespace detail {

inline void lorenz_drift(const LorenzSpec& spec, const VecX<double>& u,
                         const VecX<double>& v, VecX<double>& du,
                         VecX<double>& dv) {
  const int K = spec.K;
  auto um = [&](int i) { return u(((i % K) + K) % K); };
  for (int i = 0; i < K; ++i) {
    double coupling = 0.0;
    if (spec.two_scale) {
      for (int j = i * spec.J; j < (i + 1) * spec.J; ++j)
        coupling += v(j);
      coupling *= spec.h * spec.c / spec.b;
    }
    du(i) = -um(i - 1) * (um(i - 2) - um(i + 1)) - u(i) + spec.F - coupling;
  }
  if (spec.two_scale) {
    const int n = K * spec.J;
    auto vm = [&](int j) { return v(((j % n) + n) % n); };
    for (int j = 0; j < n; ++j)
      dv(j) = -spec.c * spec.b * vm(j + 1) * (vm(j + 2) - vm(j - 1)) -
              spec.c * v(j) + (spec.h * spec.c / spec.b) * u(j / spec.J);
  }
}

}  // namespace detail

inline std::vector<Trajectory> simulate_lorenz(const LorenzSpec& spec, int T,
                                               int N, Rng& rng) {
  FLUID_REQUIRE(T >= 1 && N >= 1, "simulate_lorenz: T and N must be >= 1");
  FLUID_REQUIRE(spec.K >= 4, "simulate_lorenz: K must be at least 4");
  const int substeps =
      static_cast<int>(std::llround(spec.dt_obs / spec.dt_int));
  FLUID_REQUIRE(substeps >= 1 &&
                    std::abs(substeps * spec.dt_int - spec.dt_obs) < 1e-12,
                "simulate_lorenz: dt_obs must be a multiple of dt_int");
  const int K = spec.K;
  const int nv = spec.two_scale ? K * spec.J : 0;
  const double sq_dt = std::sqrt(spec.dt_int);

  // single-scale observes every slow index, two-scale the odd (1-based) ones
  std::vector<int> obs;
  for (int i = 0; i < K; i += spec.two_scale ? 2 : 1) obs.push_back(i);
  const int ny = static_cast<int>(obs.size());

  std::vector<Trajectory> out;
  out.reserve(static_cast<size_t>(N));
  VecX<double> du(K), dv(std::max(nv, 1));
  for (int i = 0; i < N; ++i) {
    MatX<double> us(T, K), ys(T, ny);
    VecX<double> u(K), v = VecX<double>::Zero(std::max(nv, 1));
    if (spec.u0_slow.size() > 0) {
      FLUID_REQUIRE(spec.u0_slow.size() == K,
                    "simulate_lorenz: u0_slow size mismatch");
      u = spec.u0_slow;
      if (spec.two_scale) v = spec.sigma_v * rng.normal_vector<double>(nv);
    } else if (spec.two_scale) {
      u = VecX<double>::Constant(K, spec.F) +
          spec.sigma_u * rng.normal_vector<double>(K);
      v = spec.sigma_v * rng.normal_vector<double>(nv);
    } else {
      for (int j = 0; j < K; ++j) u(j) = std::sin(2.0 * M_PI * j / K);
    }
    for (int t = 0; t < T; ++t) {
      for (int s = 0; s < substeps; ++s) {
        detail::lorenz_drift(spec, u, v, du, dv);
        u += spec.dt_int * du;
        if (spec.sigma_u > 0.0)
          u += spec.sigma_u * sq_dt * rng.normal_vector<double>(K);
        if (spec.two_scale) {
          v += spec.dt_int * dv;
          if (spec.sigma_v > 0.0)
            v += spec.sigma_v * sq_dt * rng.normal_vector<double>(nv);
        }
      }
      FLUID_CHECK(u.allFinite() &&
                      u.cwiseAbs().maxCoeff() <= spec.blowup_limit,
                  "lorenz: state blow-up, |u|_inf = " +
                      std::to_string(u.cwiseAbs().maxCoeff()));
      us.row(t) = u.transpose();
      for (int j = 0; j < ny; ++j)
        ys(t, j) = std::pow(u(obs[static_cast<size_t>(j)]), 3) + rng.normal();
    }
    out.push_back({us.cast<float>(), ys.cast<float>()});
  }
  return out;
}

}  // namespace fluid
