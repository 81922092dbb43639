#pragma once

#include "fluid/core.hpp"

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

namespace fluid {

/// Sample-based evaluation metrics against true states. For each time step k
/// the caller provides an N x m matrix of samples (rows are draws) and the
/// true state as an m-vector.
struct MetricReport {
  double rmse = 0.0;
  double mmd = 0.0;
  double crps = 0.0;
  std::vector<double> rmse_series;  // per step, sqrt of per-step mean square
  std::vector<double> mmd_series;
  std::vector<double> crps_series;  // per step, averaged over components
};

namespace detail {

inline void check_metric_inputs(const std::vector<MatX<double>>& samples,
                                const std::vector<VecX<double>>& truth) {
  FLUID_REQUIRE(!samples.empty() && samples.size() == truth.size(),
                "metrics: need equally many non-empty sample and truth steps");
  for (size_t k = 0; k < samples.size(); ++k) {
    FLUID_REQUIRE(samples[k].rows() > 0,
                  "metrics: empty sample set at step " + std::to_string(k));
    FLUID_REQUIRE(samples[k].cols() == truth[k].size(),
                  "metrics: dimension mismatch at step " + std::to_string(k));
  }
}

inline double gauss_kernel(double sq_dist, double sigma) {
  return std::exp(-sq_dist / (2.0 * sigma * sigma));
}

}  // namespace detail

/// RMSE = sqrt( (1/(mK)) sum_k | u_k_true - mean_j u_k^(j) |^2 ).
/// The series entry for step k is sqrt( (1/m) |...|^2 ).
inline MetricReport rmse_metric(const std::vector<MatX<double>>& samples,
                                const std::vector<VecX<double>>& truth) {
  detail::check_metric_inputs(samples, truth);
  MetricReport rep;
  const auto K = samples.size();
  double total_sq = 0.0;
  for (size_t k = 0; k < K; ++k) {
    const double m = static_cast<double>(truth[k].size());
    VecX<double> mean = samples[k].colwise().mean().transpose();
    const double sq = (truth[k] - mean).squaredNorm() / m;
    rep.rmse_series.push_back(std::sqrt(sq));
    total_sq += sq;
  }
  rep.rmse = std::sqrt(total_sq / static_cast<double>(K));
  return rep;
}

/// Per-step MMD between the empirical sample distribution and the delta at
/// the true state, Gaussian kernel exp(-|x-y|^2 / (2 sigma^2)); the aggregate
/// is the average over steps.
inline MetricReport mmd_metric(const std::vector<MatX<double>>& samples,
                               const std::vector<VecX<double>>& truth,
                               double sigma = 2.0) {
  detail::check_metric_inputs(samples, truth);
  FLUID_REQUIRE(sigma > 0.0, "mmd_metric: sigma must be > 0");
  MetricReport rep;
  double total = 0.0;
  for (size_t k = 0; k < samples.size(); ++k) {
    const auto& x = samples[k];
    const Eigen::Index n = x.rows();
    VecX<double> sq_norms = x.rowwise().squaredNorm();
    // pairwise |x_i - x_j|^2 via the Gram matrix
    MatX<double> gram = x * x.transpose();
    double kxx = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j)
        kxx += detail::gauss_kernel(
            sq_norms(i) + sq_norms(j) - 2.0 * gram(i, j), sigma);
    double kxy = 0.0;
    VecX<double> d2 =
        (x.rowwise() - truth[k].transpose()).rowwise().squaredNorm();
    for (Eigen::Index i = 0; i < n; ++i)
      kxy += detail::gauss_kernel(d2(i), sigma);
    const double nn = static_cast<double>(n);
    const double mmd_k = kxx / (nn * nn) - 2.0 * kxy / nn + 1.0;
    rep.mmd_series.push_back(mmd_k);
    total += mmd_k;
  }
  rep.mmd = total / static_cast<double>(samples.size());
  return rep;
}

/// CRPS via the energy identity per component:
///   (1/N) sum_j |x_j - y| - (1/(2 N^2)) sum_{i,j} |x_i - x_j|,
/// averaged over components and time steps.
inline MetricReport crps_metric(const std::vector<MatX<double>>& samples,
                                const std::vector<VecX<double>>& truth) {
  detail::check_metric_inputs(samples, truth);
  MetricReport rep;
  double total = 0.0;
  for (size_t k = 0; k < samples.size(); ++k) {
    const auto& x = samples[k];
    const Eigen::Index n = x.rows();
    const Eigen::Index m = x.cols();
    const double nn = static_cast<double>(n);
    double step_sum = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) {
      double term1 = 0.0;
      for (Eigen::Index j = 0; j < n; ++j)
        term1 += std::abs(x(j, i) - truth[k](i));
      double term2 = 0.0;
      for (Eigen::Index a = 0; a < n; ++a)
        for (Eigen::Index b = 0; b < n; ++b)
          term2 += std::abs(x(a, i) - x(b, i));
      step_sum += term1 / nn - term2 / (2.0 * nn * nn);
    }
    const double crps_k = step_sum / static_cast<double>(m);
    rep.crps_series.push_back(crps_k);
    total += crps_k;
  }
  rep.crps = total / static_cast<double>(samples.size());
  return rep;
}

inline MetricReport evaluate_metrics(const std::vector<MatX<double>>& samples,
                                     const std::vector<VecX<double>>& truth,
                                     double mmd_sigma = 2.0) {
  MetricReport rep = rmse_metric(samples, truth);
  MetricReport m = mmd_metric(samples, truth, mmd_sigma);
  MetricReport c = crps_metric(samples, truth);
  rep.mmd = m.mmd;
  rep.mmd_series = std::move(m.mmd_series);
  rep.crps = c.crps;
  rep.crps_series = std::move(c.crps_series);
  return rep;
}

/// Per-step metric table plus an aggregate row. First line carries the
/// schema version so downstream ingestion can detect format drift.
inline void write_metrics_csv(const std::string& path,
                              const MetricReport& rep) {
  std::ofstream os(path);
  FLUID_CHECK(os.good(), "write_metrics_csv: cannot open " + path);
  os << "# schema: fluid.metrics.v1\n";
  os << "step,rmse,mmd,crps\n";
  os.precision(10);
  for (size_t k = 0; k < rep.rmse_series.size(); ++k)
    os << k + 1 << ',' << rep.rmse_series[k] << ',' << rep.mmd_series[k]
       << ',' << rep.crps_series[k] << '\n';
  os << "aggregate," << rep.rmse << ',' << rep.mmd << ',' << rep.crps << '\n';
  FLUID_CHECK(os.good(), "write_metrics_csv: write failure on " + path);
}

}  // namespace fluid
