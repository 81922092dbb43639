#pragma once

#include "fluid/core.hpp"
#include "fluid/model_io.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace fluid {

/// One realization: latent states u (T x d_u) and observations y (T x d_y),
/// stored in float32 so that persisted datasets round-trip bit-exactly.
struct Trajectory {
  MatX<float> u;
  MatX<float> y;
};

/// Per-dimension affine standardization statistics, estimated on the
/// training split only.
struct Standardization {
  VecX<double> u_mean, u_std;
  VecX<double> y_mean, y_std;
};

struct Dataset {
  std::vector<Trajectory> train;
  std::vector<Trajectory> test;
  Standardization stats;
  nlohmann::json config;
};

inline Standardization compute_standardization(
    const std::vector<Trajectory>& train) {
  FLUID_REQUIRE(!train.empty(), "compute_standardization: empty training set");
  const Eigen::Index du = train[0].u.cols();
  const Eigen::Index dy = train[0].y.cols();
  Standardization s;
  s.u_mean = VecX<double>::Zero(du);
  s.y_mean = VecX<double>::Zero(dy);
  VecX<double> u_sq = VecX<double>::Zero(du), y_sq = VecX<double>::Zero(dy);
  double count = 0.0;
  for (const auto& tr : train) {
    s.u_mean += tr.u.cast<double>().colwise().sum().transpose();
    s.y_mean += tr.y.cast<double>().colwise().sum().transpose();
    u_sq += tr.u.cast<double>().array().square().colwise().sum().matrix()
                .transpose();
    y_sq += tr.y.cast<double>().array().square().colwise().sum().matrix()
                .transpose();
    count += static_cast<double>(tr.u.rows());
  }
  s.u_mean /= count;
  s.y_mean /= count;
  s.u_std = (u_sq / count - s.u_mean.cwiseProduct(s.u_mean))
                .cwiseMax(1e-12)
                .cwiseSqrt();
  s.y_std = (y_sq / count - s.y_mean.cwiseProduct(s.y_mean))
                .cwiseMax(1e-12)
                .cwiseSqrt();
  return s;
}

/// Generates train and test splits with independent rng streams and computes
/// standardization from the training split. `sim` is called as
/// sim(n, rng) -> std::vector<Trajectory>.
template <class SimFn>
Dataset make_dataset(SimFn&& sim, int n_train, int n_test, std::uint64_t seed,
                     nlohmann::json config = nlohmann::json::object()) {
  FLUID_REQUIRE(n_train > 0, "make_dataset: need at least one training run");
  FLUID_REQUIRE(n_test >= 0, "make_dataset: negative test size");
  Dataset ds;
  Rng train_rng(seed, 1);
  ds.train = sim(n_train, train_rng);
  if (n_test > 0) {
    Rng test_rng(seed, 2);
    ds.test = sim(n_test, test_rng);
  }
  ds.stats = compute_standardization(ds.train);
  ds.config = std::move(config);
  ds.config["n_train"] = n_train;
  ds.config["n_test"] = n_test;
  ds.config["seed"] = seed;
  return ds;
}

// Dataset container, little-endian:
//   bytes 0..7  magic "FLUIDD1\n"
//   u32 + json  config
//   u32 d_u, u32 d_y
//   stats: d_u + d_u + d_y + d_y doubles (u mean, u std, y mean, y std)
//   u32 n_train, u32 n_test
//   per trajectory: u32 T, then T*d_u floats for u and T*d_y floats for y,
//   row-major (time-major), train split first.

namespace detail {

inline constexpr char kDatasetMagic[8] = {'F', 'L', 'U', 'I',
                                          'D', 'D', '1', '\n'};

inline void write_traj(std::ostream& os, const Trajectory& tr) {
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(tr.u.rows()));
  write_matrix<float>(os, tr.u);
  write_matrix<float>(os, tr.y);
}

inline Trajectory read_traj(std::istream& is, Eigen::Index du,
                            Eigen::Index dy) {
  const auto T = static_cast<Eigen::Index>(read_pod<std::uint32_t>(is));
  Trajectory tr;
  tr.u.resize(T, du);
  tr.y.resize(T, dy);
  read_matrix<float>(is, tr.u);
  read_matrix<float>(is, tr.y);
  return tr;
}

template <class S>
void write_vec(std::ostream& os, const VecX<S>& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) write_pod<S>(os, v(i));
}

template <class S>
VecX<S> read_vec(std::istream& is, Eigen::Index n) {
  VecX<S> v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = read_pod<S>(is);
  return v;
}

}  // namespace detail

inline void save_dataset(const std::string& path, const Dataset& ds) {
  FLUID_REQUIRE(!ds.train.empty(), "save_dataset: empty training split");
  std::ofstream os(path, std::ios::binary);
  FLUID_CHECK(os.good(), "save_dataset: cannot open " + path);
  os.write(detail::kDatasetMagic, 8);
  detail::write_string(os, ds.config.dump());
  const auto du = ds.train[0].u.cols();
  const auto dy = ds.train[0].y.cols();
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(du));
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(dy));
  detail::write_vec<double>(os, ds.stats.u_mean);
  detail::write_vec<double>(os, ds.stats.u_std);
  detail::write_vec<double>(os, ds.stats.y_mean);
  detail::write_vec<double>(os, ds.stats.y_std);
  detail::write_pod<std::uint32_t>(os,
                                   static_cast<std::uint32_t>(ds.train.size()));
  detail::write_pod<std::uint32_t>(os,
                                   static_cast<std::uint32_t>(ds.test.size()));
  for (const auto& tr : ds.train) detail::write_traj(os, tr);
  for (const auto& tr : ds.test) detail::write_traj(os, tr);
  FLUID_CHECK(os.good(), "save_dataset: write failure on " + path);
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  FLUID_CHECK(is.good(), "load_dataset: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  FLUID_CHECK(is.good() && std::memcmp(magic, detail::kDatasetMagic, 8) == 0,
              "load_dataset: bad magic in " + path);
  Dataset ds;
  ds.config = nlohmann::json::parse(detail::read_string(is));
  const auto du = static_cast<Eigen::Index>(detail::read_pod<std::uint32_t>(is));
  const auto dy = static_cast<Eigen::Index>(detail::read_pod<std::uint32_t>(is));
  ds.stats.u_mean = detail::read_vec<double>(is, du);
  ds.stats.u_std = detail::read_vec<double>(is, du);
  ds.stats.y_mean = detail::read_vec<double>(is, dy);
  ds.stats.y_std = detail::read_vec<double>(is, dy);
  const auto n_train = detail::read_pod<std::uint32_t>(is);
  const auto n_test = detail::read_pod<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < n_train; ++i)
    ds.train.push_back(detail::read_traj(is, du, dy));
  for (std::uint32_t i = 0; i < n_test; ++i)
    ds.test.push_back(detail::read_traj(is, du, dy));
  return ds;
}

/// Observation-series CSV: one row per time step, columns y1..y_dy. The
/// schema line lets the ingestion path detect format drift; lines starting
/// with '#' are comments.
inline void write_observations_csv(const std::string& path,
                                   const MatX<double>& y) {
  std::ofstream os(path);
  FLUID_CHECK(os.good(), "write_observations_csv: cannot open " + path);
  os << "# schema: fluid.observations.v1\n";
  os << "step";
  for (Eigen::Index j = 0; j < y.cols(); ++j) os << ",y" << j + 1;
  os << '\n';
  os.precision(17);
  for (Eigen::Index t = 0; t < y.rows(); ++t) {
    os << t + 1;
    for (Eigen::Index j = 0; j < y.cols(); ++j) os << ',' << y(t, j);
    os << '\n';
  }
  FLUID_CHECK(os.good(), "write_observations_csv: write failure on " + path);
}

inline MatX<double> read_observations_csv(const std::string& path) {
  std::ifstream is(path);
  FLUID_CHECK(is.good(), "read_observations_csv: cannot open " + path);
  std::string line;
  std::vector<std::vector<double>> rows;
  bool header_seen = false;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      FLUID_CHECK(line.rfind("step,", 0) == 0,
                  "read_observations_csv: missing column header in " + path);
      header_seen = true;
      continue;
    }
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> row;
    bool first = true;
    while (std::getline(ss, cell, ',')) {
      if (first) {  // step index column
        first = false;
        continue;
      }
      row.push_back(std::stod(cell));
    }
    FLUID_CHECK(rows.empty() || row.size() == rows.back().size(),
                "read_observations_csv: ragged rows in " + path);
    rows.push_back(std::move(row));
  }
  FLUID_CHECK(!rows.empty(), "read_observations_csv: no data rows in " + path);
  MatX<double> y(static_cast<Eigen::Index>(rows.size()),
                 static_cast<Eigen::Index>(rows[0].size()));
  for (size_t t = 0; t < rows.size(); ++t)
    for (size_t j = 0; j < rows[t].size(); ++j)
      y(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j)) =
          rows[t][j];
  return y;
}

}  // namespace fluid
