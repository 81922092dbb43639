#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace fluid {

template <class S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using Mat = MatX<double>;
using Vec = VecX<double>;

#define FLUID_REQUIRE(cond, msg)                          \
  do {                                                    \
    if (!(cond)) throw std::invalid_argument(msg);        \
  } while (0)

#define FLUID_CHECK(cond, msg)                            \
  do {                                                    \
    if (!(cond)) throw std::runtime_error(msg);           \
  } while (0)

/// Deterministic random stream. Normal variates use Box-Muller on top of
/// mt19937_64 so that draws are identical across platforms and standard
/// library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) {
    std::seed_seq seq{seed, stream, std::uint64_t{0x9e3779b97f4a7c15ULL}};
    gen_.seed(seq);
  }

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1).
  double uniform() {
    return (gen_() >> 11) * (1.0 / 9007199254740992.0);  // 53-bit mantissa
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  /// Index in [0, n) with probability proportional to w[i]. w need not be
  /// normalized but must be nonnegative with a positive sum.
  template <class Derived>
  int categorical(const Eigen::MatrixBase<Derived>& w) {
    const double total = static_cast<double>(w.sum());
    FLUID_CHECK(total > 0.0, "categorical: weights sum to zero");
    double x = uniform() * total;
    const int n = static_cast<int>(w.size());
    for (int i = 0; i < n; ++i) {
      x -= static_cast<double>(w[i]);
      if (x <= 0.0) return i;
    }
    return n - 1;
  }

  template <class S>
  MatX<S> normal_matrix(Eigen::Index rows, Eigen::Index cols) {
    MatX<S> out(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i)
        out(i, j) = static_cast<S>(normal());
    return out;
  }

  template <class S>
  VecX<S> normal_vector(Eigen::Index n) {
    VecX<S> out(n);
    for (Eigen::Index i = 0; i < n; ++i) out[i] = static_cast<S>(normal());
    return out;
  }

 private:
  std::mt19937_64 gen_;
};

template <class S>
bool all_finite(const MatX<S>& m) {
  return m.allFinite();
}

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

}  // namespace fluid
