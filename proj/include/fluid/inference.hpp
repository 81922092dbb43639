#pragma once

#include "fluid/core.hpp"
#include "fluid/trainer.hpp"

#include <algorithm>
#include <fstream>
#include <string>
#include <vector>

namespace fluid {

/// Amortized filtering output for a single observation sequence: draws from
/// p(u_t | y_{1:t}) in physical units plus the summary they conditioned on.
template <class S = float>
struct FilterEnsemble {
  int t = 0;
  MatX<S> samples;  // N x d_u
  MatX<S> summary;  // 1 x d_s
};

/// Path samples from the backward smoothing factorization; steps[k-1] holds
/// the N x d_u slice at time k, in physical units. The terminal slice is the
/// filtering ensemble that seeded the recursion.
template <class S = float>
struct SmoothingPaths {
  std::vector<MatX<S>> steps;
  int horizon() const { return static_cast<int>(steps.size()); }
};

namespace detail {

template <class S>
std::vector<MatX<S>> split_rows(const MatX<S>& y) {
  std::vector<MatX<S>> out;
  out.reserve(static_cast<size_t>(y.rows()));
  for (Eigen::Index t = 0; t < y.rows(); ++t) out.push_back(y.row(t));
  return out;
}

}  // namespace detail

/// Generic backward path recursion: draw the terminal ensemble, then walk
/// k = T-1..1 sampling u_k given u_{k+1}. The samplers abstract over the
/// learned flows so exact conditional-Gaussian kernels can be substituted.
/// `terminal(rng)` returns N x d; `backward(k, u_next, rng)` returns N x d
/// with k being the 1-based target time.
template <class S, class TerminalFn, class BackwardFn>
SmoothingPaths<S> backward_path_recursion(int T, TerminalFn&& terminal,
                                          BackwardFn&& backward, Rng& rng) {
  FLUID_REQUIRE(T >= 2, "backward_path_recursion: need horizon T >= 2");
  SmoothingPaths<S> paths;
  paths.steps.assign(static_cast<size_t>(T), MatX<S>());
  paths.steps.back() = terminal(rng);
  for (int k = T - 1; k >= 1; --k) {
    const auto& next = paths.steps[static_cast<size_t>(k)];
    paths.steps[static_cast<size_t>(k - 1)] = backward(k, next, rng);
    FLUID_CHECK(all_finite(paths.steps[static_cast<size_t>(k - 1)]),
                "backward_path_recursion: non-finite samples at step " +
                    std::to_string(k));
  }
  return paths;
}

/// Algorithmic filtering: encode y_{1:t}, sample the forward flow at the
/// final summary, de-standardize.
template <class S>
FilterEnsemble<S> filter_samples(const FluidModel<S>& model, const MatX<S>& y,
                               int n_sample, Rng& rng) {
  FLUID_REQUIRE(y.rows() >= 1, "filter_samples: need at least one observation");
  FLUID_REQUIRE(n_sample >= 1, "filter_samples: n_sample must be positive");
  FLUID_REQUIRE(y.cols() == model.config().obs_dim,
                "filter_samples: observation dimension mismatch");
  MatX<S> ys = model.standardize_y(y);
  auto sums = model.encoder().encode_sequence(model.params,
                                              detail::split_rows(ys));
  FilterEnsemble<S> out;
  out.t = static_cast<int>(y.rows());
  out.summary = sums.back();
  MatX<S> cond = out.summary.replicate(n_sample, 1);
  MatX<S> z = model.forward_flow().sample(model.params, cond, rng);
  FLUID_CHECK(all_finite(z), "filter_samples: non-finite flow samples");
  out.samples = model.destandardize_u(z);
  return out;
}

/// Filtering ensembles for every prefix y_{1:k}, k = 1..T, sharing one
/// encoder pass. Entry k-1 holds N draws from p(u_k | y_{1:k}) in physical
/// units.
template <class S>
std::vector<MatX<S>> filter_series(const FluidModel<S>& model, const MatX<S>& y,
                                   int n_sample, Rng& rng) {
  FLUID_REQUIRE(y.rows() >= 1, "filter_series: need at least one observation");
  FLUID_REQUIRE(n_sample >= 1, "filter_series: n_sample must be positive");
  FLUID_REQUIRE(y.cols() == model.config().obs_dim,
                "filter_series: observation dimension mismatch");
  MatX<S> ys = model.standardize_y(y);
  auto sums = model.encoder().encode_sequence(model.params,
                                              detail::split_rows(ys));
  std::vector<MatX<S>> out;
  out.reserve(sums.size());
  for (const auto& s : sums) {
    MatX<S> cond = s.replicate(n_sample, 1);
    MatX<S> z = model.forward_flow().sample(model.params, cond, rng);
    FLUID_CHECK(all_finite(z), "filter_series: non-finite flow samples");
    out.push_back(model.destandardize_u(z));
  }
  return out;
}

/// Algorithmic smoothing: one encoder pass caches every prefix summary, the
/// terminal ensemble comes from the forward flow, and each earlier slice is
/// drawn from the backward flow conditioned on (u_{k+1}, s_k).
template <class S>
SmoothingPaths<S> smooth_paths(const FluidModel<S>& model, const MatX<S>& y,
                               int n_sample, Rng& rng) {
  FLUID_REQUIRE(y.rows() >= 2, "smooth_paths: need at least two observations");
  FLUID_REQUIRE(n_sample >= 1, "smooth_paths: n_sample must be positive");
  FLUID_REQUIRE(y.cols() == model.config().obs_dim,
                "smooth_paths: observation dimension mismatch");
  const int T = static_cast<int>(y.rows());
  const int du = model.config().state_dim;
  const int ds = model.summary_dim();
  MatX<S> ystd = model.standardize_y(y);
  auto fsums = model.encoder().encode_sequence(model.params,
                                               detail::split_rows(ystd));
  // the backward flow conditions on its own encoder's summaries when the
  // training run decoupled them
  auto bsums = model.config().shared_summary
                   ? fsums
                   : model.backward_encoder().encode_sequence(
                         model.params, detail::split_rows(ystd));

  auto terminal = [&](Rng& r) {
    MatX<S> cond = fsums.back().replicate(n_sample, 1);
    MatX<S> z = model.forward_flow().sample(model.params, cond, r);
    FLUID_CHECK(all_finite(z), "smooth_paths: non-finite terminal samples");
    return z;
  };
  auto backward = [&](int k, const MatX<S>& u_next, Rng& r) {
    MatX<S> cond(n_sample, du + ds);
    cond.leftCols(du) = u_next;
    cond.rightCols(ds) =
        bsums[static_cast<size_t>(k - 1)].replicate(n_sample, 1);
    return model.backward_flow().sample(model.params, cond, r);
  };
  SmoothingPaths<S> paths =
      backward_path_recursion<S>(T, terminal, backward, rng);
  for (auto& step : paths.steps) step = model.destandardize_u(step);
  return paths;
}

/// Marginal slice at 1-based time k; at k = T this is the terminal filtering
/// ensemble.
template <class S>
const MatX<S>& smoothing_marginal(const SmoothingPaths<S>& paths, int k) {
  FLUID_REQUIRE(k >= 1 && k <= paths.horizon(),
                "smoothing_marginal: time index out of range");
  return paths.steps[static_cast<size_t>(k - 1)];
}

namespace detail {

template <class S>
double sample_quantile(std::vector<S>& sorted_buf, double q) {
  std::sort(sorted_buf.begin(), sorted_buf.end());
  const double pos = q * static_cast<double>(sorted_buf.size() - 1);
  const auto lo = static_cast<size_t>(pos);
  const size_t hi = std::min(lo + 1, sorted_buf.size() - 1);
  const double w = pos - static_cast<double>(lo);
  return (1.0 - w) * static_cast<double>(sorted_buf[lo]) +
         w * static_cast<double>(sorted_buf[hi]);
}

template <class S>
void write_ensemble_row(std::ostream& os, int time, const MatX<S>& samples) {
  const auto n = static_cast<double>(samples.rows());
  os << time;
  for (Eigen::Index j = 0; j < samples.cols(); ++j) {
    const double mean = samples.col(j).template cast<double>().mean();
    const double var =
        (samples.col(j).template cast<double>().array() - mean)
            .square()
            .sum() /
        std::max(1.0, n - 1.0);
    std::vector<S> buf(samples.col(j).data(),
                       samples.col(j).data() + samples.rows());
    const double q05 = sample_quantile(buf, 0.05);
    const double q95 = sample_quantile(buf, 0.95);
    os << ',' << mean << ',' << std::sqrt(var) << ',' << q05 << ',' << q95;
  }
  os << '\n';
}

template <class S>
void write_summary_header(std::ostream& os, Eigen::Index dims) {
  os << "time";
  for (Eigen::Index j = 0; j < dims; ++j)
    os << ",mean" << j + 1 << ",std" << j + 1 << ",q05_" << j + 1 << ",q95_"
       << j + 1;
  os << '\n';
}

}  // namespace detail

/// Per-time ensemble summaries (mean, std, 5%/95% quantiles per dimension).
template <class S>
void write_smoothing_csv(const std::string& path,
                         const SmoothingPaths<S>& paths) {
  FLUID_REQUIRE(paths.horizon() >= 1, "write_smoothing_csv: empty paths");
  std::ofstream os(path);
  FLUID_CHECK(os.good(), "write_smoothing_csv: cannot open " + path);
  os << "# schema: fluid.smoothing.v1\n";
  os.precision(17);
  detail::write_summary_header<S>(os, paths.steps.front().cols());
  for (int k = 1; k <= paths.horizon(); ++k)
    detail::write_ensemble_row(os, k, paths.steps[static_cast<size_t>(k - 1)]);
  FLUID_CHECK(os.good(), "write_smoothing_csv: write failure on " + path);
}

template <class S>
void write_filter_csv(const std::string& path, const FilterEnsemble<S>& result) {
  std::ofstream os(path);
  FLUID_CHECK(os.good(), "write_filter_csv: cannot open " + path);
  os << "# schema: fluid.filter.v1\n";
  os.precision(17);
  detail::write_summary_header<S>(os, result.samples.cols());
  detail::write_ensemble_row(os, result.t, result.samples);
  FLUID_CHECK(os.good(), "write_filter_csv: write failure on " + path);
}

}  // namespace fluid
