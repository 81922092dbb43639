#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fluid/flow.hpp"

#include "test_util.hpp"

#include <cmath>

using namespace fluid;

namespace {

template <class S>
struct FlowFixture {
  ParamStore<S> store;
  FlowModel<S> flow;
  FlowFixture(FlowConfig cfg, std::uint64_t seed = 42)
      : flow([&] {
          Rng rng(seed);
          return FlowModel<S>(cfg, store, "flow", rng);
        }()) {}

  /// Gives all trainable blocks small random values so the flow is no
  /// longer the identity.
  void randomize(std::uint64_t seed, double scale = 0.3) {
    Rng rng(seed);
    for (auto& b : store.blocks()) {
      if (!b.trainable) continue;
      b.value =
          static_cast<S>(scale) *
          rng.template normal_matrix<S>(b.value.rows(), b.value.cols());
    }
  }
};

FlowConfig small_cfg(int d, int dc, int K) {
  FlowConfig cfg;
  cfg.data_dim = d;
  cfg.cond_dim = dc;
  cfg.num_coupling = K;
  cfg.rff_features = 8;
  cfg.mlp_depth = 2;
  cfg.mlp_width = 16;
  return cfg;
}

/// log|det| of the Jacobian of a map R^d -> R^d via central differences.
template <class F>
double fd_log_abs_det(const F& f, const VecX<double>& u, double step = 1e-6) {
  const int d = static_cast<int>(u.size());
  MatX<double> jac(d, d);
  for (int j = 0; j < d; ++j) {
    VecX<double> up = u, dn = u;
    up[j] += step;
    dn[j] -= step;
    jac.col(j) = (f(up) - f(dn)) / (2.0 * step);
  }
  return std::log(std::abs(jac.determinant()));
}

}  // namespace

TEST_CASE("scale-bias: identity at initialization") {
  FlowFixture<double> fx(small_cfg(3, 2, 0));
  Rng rng(1);
  MatX<double> u = rng.normal_matrix<double>(4, 3);
  MatX<double> c = rng.normal_matrix<double>(4, 2);
  auto eval = fx.flow.scale_bias_forward(fx.store, u, c);
  CHECK((eval.output - u).norm() == doctest::Approx(0.0));
  CHECK(eval.log_det.norm() == doctest::Approx(0.0));
}

TEST_CASE("scale-bias: hand-evaluated example") {
  // unconditional flow: eta and xi are direct parameters
  FlowFixture<double> fx(small_cfg(2, 0, 0));
  int sb = fx.store.find("flow.sb.const");
  REQUIRE(sb >= 0);
  fx.store.value(sb) << std::log(2.0), 0.0, 1.0, -1.0;  // eta=(ln2,0) xi=(1,-1)
  MatX<double> u(1, 2);
  u << 1.0, 1.0;
  MatX<double> c(1, 0);
  auto eval = fx.flow.scale_bias_forward(fx.store, u, c);
  CHECK(eval.output(0, 0) == doctest::Approx(3.0));
  CHECK(eval.output(0, 1) == doctest::Approx(0.0));
  CHECK(eval.log_det[0] == doctest::Approx(std::log(2.0)));

  // v = xi maps back to zero
  MatX<double> v(1, 2);
  v << 1.0, -1.0;
  CHECK(fx.flow.scale_bias_inverse(fx.store, v, c).norm() ==
        doctest::Approx(0.0));
}

TEST_CASE("scale-bias: round trip on random inputs") {
  FlowFixture<double> fx(small_cfg(5, 3, 0));
  fx.randomize(9);
  Rng rng(2);
  MatX<double> u = rng.normal_matrix<double>(16, 5);
  MatX<double> c = rng.normal_matrix<double>(16, 3);
  auto eval = fx.flow.scale_bias_forward(fx.store, u, c);
  MatX<double> back = fx.flow.scale_bias_inverse(fx.store, eval.output, c);
  CHECK((back - u).cwiseAbs().maxCoeff() < 1e-10);
  // and forward(inverse(v)) = v
  MatX<double> v = rng.normal_matrix<double>(16, 5);
  MatX<double> uu = fx.flow.scale_bias_inverse(fx.store, v, c);
  CHECK((fx.flow.scale_bias_forward(fx.store, uu, c).output - v)
            .cwiseAbs()
            .maxCoeff() < 1e-10);
}

TEST_CASE("coupling: identity when nets output zero") {
  FlowFixture<double> fx(small_cfg(4, 2, 1));
  Rng rng(3);
  MatX<double> u = rng.normal_matrix<double>(6, 4);
  MatX<double> c = rng.normal_matrix<double>(6, 2);
  auto eval = fx.flow.coupling_forward(fx.store, 0, u, c);
  CHECK((eval.output - u).norm() == doctest::Approx(0.0));
  CHECK(eval.log_det.norm() == doctest::Approx(0.0));
}

TEST_CASE("coupling: scale factors strictly inside (1-alpha, 1+alpha)") {
  FlowFixture<double> fx(small_cfg(4, 2, 2));
  fx.randomize(77, 0.8);
  Rng rng(4);
  MatX<double> u1 = rng.normal_matrix<double>(64, 2);
  MatX<double> c = rng.normal_matrix<double>(64, 2);
  auto [s, t] = fx.flow.coupling_net(fx.store, 0, u1, c);
  MatX<double> scale = (1.0 + 0.6 * s.array().tanh()).matrix();
  // closed bounds: tanh saturates to exactly +-1 in floating point
  CHECK(scale.minCoeff() >= 0.4);
  CHECK(scale.maxCoeff() <= 1.6);
  CHECK(scale.minCoeff() > 0.0);
}

TEST_CASE("coupling: first block unchanged and analytic inverse") {
  FlowFixture<double> fx(small_cfg(5, 2, 1));
  fx.randomize(5);
  Rng rng(6);
  MatX<double> u = rng.normal_matrix<double>(10, 5);
  MatX<double> c = rng.normal_matrix<double>(10, 2);
  auto eval = fx.flow.coupling_forward(fx.store, 0, u, c);
  CHECK((eval.output.leftCols(2) - u.leftCols(2)).norm() == 0.0);
  MatX<double> back = fx.flow.coupling_inverse(fx.store, 0, eval.output, c);
  CHECK((back - u).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("coupling: log-det matches finite-difference Jacobian") {
  FlowFixture<double> fx(small_cfg(4, 3, 1));
  fx.randomize(13);
  Rng rng(7);
  MatX<double> c = rng.normal_matrix<double>(1, 3);
  for (int trial = 0; trial < 5; ++trial) {
    VecX<double> u = rng.normal_vector<double>(4);
    auto map = [&](const VecX<double>& x) -> VecX<double> {
      return fx.flow.coupling_forward(fx.store, 0, x.transpose(), c)
          .output.row(0)
          .transpose();
    };
    auto eval = fx.flow.coupling_forward(fx.store, 0, u.transpose(), c);
    const double fd = fd_log_abs_det(map, u);
    CHECK(eval.log_det[0] == doctest::Approx(fd).epsilon(1e-4));
  }
}

TEST_CASE("rff net: zero readout means zero outputs, correct shapes") {
  FlowFixture<double> fx(small_cfg(5, 2, 1));
  Rng rng(8);
  MatX<double> u1 = rng.normal_matrix<double>(3, 2);
  MatX<double> c = rng.normal_matrix<double>(3, 2);
  auto [s, t] = fx.flow.coupling_net(fx.store, 0, u1, c);
  CHECK(s.cols() == 3);  // d_u - k = 5 - 2
  CHECK(t.cols() == 3);
  CHECK(s.norm() == 0.0);
  CHECK(t.norm() == 0.0);
}

TEST_CASE("full flow: round trip across dimensions") {
  Rng rng(10);
  for (int d : {2, 3, 4, 10}) {
    FlowFixture<float> fx(small_cfg(d, 3, 4));
    fx.randomize(100 + static_cast<std::uint64_t>(d));
    MatX<float> u = rng.normal_matrix<float>(50, d);
    MatX<float> c = rng.normal_matrix<float>(50, 3);
    auto eval = fx.flow.forward(fx.store, u, c);
    MatX<float> back = fx.flow.inverse(fx.store, eval.output, c);
    CHECK((back - u).cwiseAbs().maxCoeff() < 1e-5f);
  }
}

TEST_CASE("full flow: K=0 reduces to scale-bias") {
  FlowFixture<double> fx(small_cfg(3, 2, 0));
  fx.randomize(21);
  Rng rng(11);
  MatX<double> u = rng.normal_matrix<double>(4, 3);
  MatX<double> c = rng.normal_matrix<double>(4, 2);
  auto full = fx.flow.forward(fx.store, u, c);
  auto sb = fx.flow.scale_bias_forward(fx.store, u, c);
  CHECK((full.output - sb.output).norm() == 0.0);
  CHECK((full.log_det - sb.log_det).norm() == 0.0);
}

TEST_CASE("full flow: log-det additivity and FD Jacobian agreement") {
  FlowFixture<double> fx(small_cfg(4, 2, 3));
  fx.randomize(33);
  Rng rng(12);
  MatX<double> c = rng.normal_matrix<double>(1, 2);
  VecX<double> u = rng.normal_vector<double>(4);
  auto map = [&](const VecX<double>& x) -> VecX<double> {
    return fx.flow.forward(fx.store, x.transpose(), c).output.row(0).transpose();
  };
  auto eval = fx.flow.forward(fx.store, u.transpose(), c);
  CHECK(eval.log_det[0] ==
        doctest::Approx(fd_log_abs_det(map, u)).epsilon(1e-4));

  // additivity against per-layer sums
  typename FlowModel<double>::Cache cache;
  auto sb = fx.flow.scale_bias_forward(fx.store, u.transpose(), c);
  double total = sb.log_det[0];
  MatX<double> cur = sb.output;
  for (int l = 0; l < 3; ++l) {
    auto step = fx.flow.coupling_forward(fx.store, l, cur, c);
    total += step.log_det[0];
    // apply the permutation the composed flow uses
    MatX<double> next(1, 4);
    next.leftCols(2) = step.output.rightCols(2);
    next.rightCols(2) = step.output.leftCols(2);
    cur = next;
  }
  CHECK(eval.log_det[0] == doctest::Approx(total).epsilon(1e-12));
  CHECK((eval.output - cur).norm() < 1e-12);
}

TEST_CASE("log_prob: identity flow at the origin") {
  FlowFixture<double> fx(small_cfg(2, 2, 3));
  MatX<double> u = MatX<double>::Zero(1, 2);
  MatX<double> c = MatX<double>::Ones(1, 2);
  VecX<double> lp = fx.flow.log_prob(fx.store, u, c);
  CHECK(lp[0] == doctest::Approx(-std::log(2.0 * 3.14159265358979323846)));
}

TEST_CASE("log_prob: density integrates to one on a 2-D grid") {
  FlowFixture<double> fx(small_cfg(2, 2, 4));
  fx.randomize(55, 0.2);
  MatX<double> c(1, 2);
  c << 0.4, -0.2;
  const int n = 201;
  const double lo = -6.0, hi = 6.0, h = (hi - lo) / (n - 1);
  double integral = 0.0;
  MatX<double> pts(n, 2);
  MatX<double> cc(n, 2);
  for (int i = 0; i < n; ++i) {
    const double x = lo + i * h;
    for (int j = 0; j < n; ++j) pts(j, 0) = x, pts(j, 1) = lo + j * h,
                                cc.row(j) = c.row(0);
    VecX<double> lp = fx.flow.log_prob(fx.store, pts, cc);
    double row = 0.0;
    for (int j = 0; j < n; ++j) {
      double wt = (j == 0 || j == n - 1) ? 0.5 : 1.0;
      row += wt * std::exp(lp[j]);
    }
    double wi = (i == 0 || i == n - 1) ? 0.5 : 1.0;
    integral += wi * row * h * h;
  }
  CHECK(integral == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("log_prob: conditioning sensitivity") {
  FlowFixture<double> fx(small_cfg(3, 2, 2));
  fx.randomize(66);
  MatX<double> u(2, 3);
  u << 0.3, -0.1, 0.2, 0.3, -0.1, 0.2;
  MatX<double> c(2, 2);
  c << 1.0, 0.0, -1.0, 2.0;
  VecX<double> lp = fx.flow.log_prob(fx.store, u, c);
  CHECK(std::abs(lp[0] - lp[1]) > 0.0);
}

TEST_CASE("sample: identity-initialized flow draws standard normals") {
  FlowFixture<double> fx(small_cfg(4, 2, 2));
  Rng rng(99);
  const int n = 10000;
  MatX<double> c = MatX<double>::Zero(n, 2);
  MatX<double> x = fx.flow.sample(fx.store, c, rng);
  for (int j = 0; j < 4; ++j) {
    const double mean = x.col(j).mean();
    const double var = (x.col(j).array() - mean).square().mean();
    CHECK(std::abs(mean) < 0.05);
    CHECK(var > 0.9);
    CHECK(var < 1.1);
  }
}

TEST_CASE("sample: deterministic under a fixed seed, finite log_prob") {
  FlowFixture<double> fx(small_cfg(3, 2, 2));
  fx.randomize(44);
  MatX<double> c = MatX<double>::Ones(200, 2);
  Rng r1(5), r2(5);
  MatX<double> a = fx.flow.sample(fx.store, c, r1);
  MatX<double> b = fx.flow.sample(fx.store, c, r2);
  CHECK((a - b).norm() == 0.0);
  VecX<double> lp = fx.flow.log_prob(fx.store, a, c);
  CHECK(lp.allFinite());
}

TEST_CASE("data_dim=1 degrades to scale-bias-only flow") {
  FlowFixture<double> fx(small_cfg(1, 2, 4));
  CHECK(fx.flow.num_coupling() == 0);
  fx.randomize(3);
  Rng rng(14);
  MatX<double> u = rng.normal_matrix<double>(8, 1);
  MatX<double> c = rng.normal_matrix<double>(8, 2);
  auto eval = fx.flow.forward(fx.store, u, c);
  MatX<double> back = fx.flow.inverse(fx.store, eval.output, c);
  CHECK((back - u).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("gradients: log_prob of scale-bias flow matches finite differences") {
  FlowFixture<double> fx(small_cfg(3, 2, 0));
  fx.randomize(71, 0.2);
  Rng rng(15);
  MatX<double> u = rng.normal_matrix<double>(4, 3);
  MatX<double> c = rng.normal_matrix<double>(4, 2);
  auto value = [&] { return fx.flow.log_prob(fx.store, u, c).sum(); };
  typename FlowModel<double>::Cache cache;
  fx.flow.log_prob(fx.store, u, c, &cache);
  fx.store.zero_grad();
  fx.flow.log_prob_backward(fx.store, cache, VecX<double>::Ones(4));
  fluid::testing::check_gradients_against_fd(fx.store, value);
}

TEST_CASE("gradients: log_prob of coupling flow matches finite differences") {
  FlowFixture<double> fx(small_cfg(4, 2, 2));
  fx.randomize(72, 0.2);
  Rng rng(16);
  MatX<double> u = rng.normal_matrix<double>(3, 4);
  MatX<double> c = rng.normal_matrix<double>(3, 2);
  auto value = [&] { return fx.flow.log_prob(fx.store, u, c).sum(); };
  typename FlowModel<double>::Cache cache;
  fx.flow.log_prob(fx.store, u, c, &cache);
  fx.store.zero_grad();
  fx.flow.log_prob_backward(fx.store, cache, VecX<double>::Ones(3));
  fluid::testing::check_gradients_against_fd(fx.store, value);
}

TEST_CASE("gradients: conditioner gradient matches finite differences") {
  FlowFixture<double> fx(small_cfg(4, 3, 2));
  fx.randomize(73, 0.2);
  Rng rng(17);
  MatX<double> u = rng.normal_matrix<double>(2, 4);
  MatX<double> c = rng.normal_matrix<double>(2, 3);
  typename FlowModel<double>::Cache cache;
  fx.flow.log_prob(fx.store, u, c, &cache);
  fx.store.zero_grad();
  MatX<double> dc;
  fx.flow.log_prob_backward(fx.store, cache, VecX<double>::Ones(2), &dc);
  const double step = 1e-6;
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 3; ++j) {
      MatX<double> cp = c, cm = c;
      cp(i, j) += step;
      cm(i, j) -= step;
      const double fd = (fx.flow.log_prob(fx.store, u, cp).sum() -
                         fx.flow.log_prob(fx.store, u, cm).sum()) /
                        (2.0 * step);
      CHECK(dc(i, j) == doctest::Approx(fd).epsilon(1e-4));
    }
  }
}
