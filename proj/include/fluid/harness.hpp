#pragma once

#include "fluid/core.hpp"
#include "fluid/dataset.hpp"
#include "fluid/gaussian.hpp"
#include "fluid/inference.hpp"
#include "fluid/metrics.hpp"
#include "fluid/ssm_models.hpp"
#include "fluid/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace fluid {

/// Flat key = value run configuration. Files may pull in other files with
/// `include <path>` lines (resolved relative to the including file); later
/// assignments override earlier ones, so a run config typically includes a
/// preset and then overrides a few keys.
class KvConfig {
 public:
  static KvConfig load(const std::string& path) {
    KvConfig cfg;
    cfg.load_into(path);
    return cfg;
  }

  void set(const std::string& key, const std::string& value) {
    values_[key] = value;
  }

  /// Applies a "key=value" command-line override.
  void apply_override(const std::string& kv) {
    const auto pos = kv.find('=');
    FLUID_REQUIRE(pos != std::string::npos && pos > 0,
                  "config override must look like key=value: " + kv);
    set(trim(kv.substr(0, pos)), trim(kv.substr(pos + 1)));
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  std::string require(const std::string& key) const {
    auto it = values_.find(key);
    FLUID_REQUIRE(it != values_.end(), "config: missing key '" + key + "'");
    return it->second;
  }

  int get_int(const std::string& key, int fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : std::stoi(it->second);
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : std::stod(it->second);
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw std::invalid_argument("config: '" + key + "' is not a boolean: " + v);
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : std::stoull(it->second);
  }

  /// Sorted key = value dump, the canonical form echoed into manifests.
  std::string dump() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << " = " << v << '\n';
    return os.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : values_) j[k] = v;
    return j;
  }

  static KvConfig from_json(const nlohmann::json& j) {
    KvConfig cfg;
    for (auto it = j.begin(); it != j.end(); ++it)
      if (it.value().is_string()) cfg.set(it.key(), it.value().get<std::string>());
    return cfg;
  }

  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }

  static std::string dir_of(const std::string& path) {
    const auto pos = path.find_last_of('/');
    return pos == std::string::npos ? std::string(".") : path.substr(0, pos);
  }

  void load_into(const std::string& path) {
    std::ifstream is(path);
    FLUID_CHECK(is.good(), "config: cannot open " + path);
    std::string line;
    while (std::getline(is, line)) {
      const std::string t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      if (t.rfind("include ", 0) == 0) {
        std::string inc = trim(t.substr(8));
        if (!inc.empty() && inc[0] != '/') inc = dir_of(path) + "/" + inc;
        load_into(inc);
        continue;
      }
      const auto pos = t.find('=');
      FLUID_CHECK(pos != std::string::npos && pos > 0,
                  "config: malformed line in " + path + ": " + line);
      values_[trim(t.substr(0, pos))] = trim(t.substr(pos + 1));
    }
  }

  std::map<std::string, std::string> values_;
};

// ----------------------------------------------------------- benchmarks

/// A named simulator plus, for the linear cases, the exact model that
/// gaussian_reference can score against.
struct Benchmark {
  std::string name;
  int horizon = 100;
  std::function<std::vector<Trajectory>(int, Rng&)> sim;
  bool linear = false;
  LinearSSM<double> ssm;
  nlohmann::json meta;  // echoed into the dataset container
};

/// Keys: benchmark (advdiff1 | advdiff2 | sv | burgers | lorenz | lorenz2),
/// T, and per-family overrides n / n_space / K / F.
inline Benchmark make_benchmark(const KvConfig& cfg) {
  Benchmark b;
  b.name = cfg.require("benchmark");
  b.horizon = cfg.get_int("T", 100);
  FLUID_REQUIRE(b.horizon >= 1, "benchmark: T must be positive");
  b.meta["benchmark"] = b.name;
  b.meta["T"] = b.horizon;
  const int T = b.horizon;

  if (b.name == "advdiff1" || b.name == "advdiff2") {
    const int n = cfg.get_int("n", b.name == "advdiff1" ? 10 : 16);
    AdvDiffSpec spec = b.name == "advdiff1" ? advdiff_case1(n)
                                            : advdiff_case2(n);
    b.linear = true;
    b.ssm = build_advdiff(spec);
    b.meta["n"] = n;
    LinearSSM<double> ssm = b.ssm;
    b.sim = [ssm, T](int count, Rng& rng) {
      return simulate_linear(ssm, T, count, rng);
    };
  } else if (b.name == "sv") {
    SVSpec spec;
    b.sim = [spec, T](int count, Rng& rng) {
      return simulate_sv(spec, T, count, rng);
    };
  } else if (b.name == "burgers") {
    BurgersSpec spec;
    spec.n_space = cfg.get_int("n_space", spec.n_space);
    b.meta["n_space"] = spec.n_space;
    b.sim = [spec, T](int count, Rng& rng) {
      return simulate_burgers(spec, T, count, rng);
    };
  } else if (b.name == "lorenz" || b.name == "lorenz2") {
    LorenzSpec spec;
    if (b.name == "lorenz")
      spec = lorenz_single_scale(cfg.get_int("K", 10),
                                 cfg.get_double("F", 8.0));
    else {
      spec.K = cfg.get_int("K", spec.K);
      spec.F = cfg.get_double("F", spec.F);
    }
    b.meta["K"] = spec.K;
    b.meta["F"] = spec.F;
    b.sim = [spec, T](int count, Rng& rng) {
      return simulate_lorenz(spec, T, count, rng);
    };
  } else {
    throw std::invalid_argument("benchmark: unknown name '" + b.name + "'");
  }
  return b;
}

/// Reconstructs the benchmark a dataset was generated from, using the
/// key-value echo stored in its container config.
inline Benchmark benchmark_from_dataset(const nlohmann::json& ds_config) {
  FLUID_REQUIRE(ds_config.contains("benchmark"),
                "dataset carries no benchmark record");
  KvConfig cfg;
  for (auto it = ds_config.begin(); it != ds_config.end(); ++it) {
    if (it.value().is_string())
      cfg.set(it.key(), it.value().get<std::string>());
    else if (it.value().is_number_integer())
      cfg.set(it.key(), std::to_string(it.value().get<long long>()));
    else if (it.value().is_number())
      cfg.set(it.key(), std::to_string(it.value().get<double>()));
  }
  return make_benchmark(cfg);
}

// ----------------------------------------------------------- evaluation

struct EvalOptions {
  int n_sample = 1000;
  int n_traj = 0;   // 0 = every test trajectory
  int horizon = 0;  // 0 = full trajectory length
  bool smoothing = false;
  std::uint64_t seed = 0;
};

namespace detail {

inline void accumulate_report(MetricReport& acc, const MetricReport& r) {
  if (acc.rmse_series.empty()) {
    acc = r;
    return;
  }
  FLUID_REQUIRE(acc.rmse_series.size() == r.rmse_series.size(),
                "evaluate: inconsistent horizon across trajectories");
  acc.rmse += r.rmse;
  acc.mmd += r.mmd;
  acc.crps += r.crps;
  for (size_t k = 0; k < r.rmse_series.size(); ++k) {
    acc.rmse_series[k] += r.rmse_series[k];
    acc.mmd_series[k] += r.mmd_series[k];
    acc.crps_series[k] += r.crps_series[k];
  }
}

inline void finalize_report(MetricReport& acc, int count) {
  const double c = static_cast<double>(count);
  acc.rmse /= c;
  acc.mmd /= c;
  acc.crps /= c;
  for (auto& v : acc.rmse_series) v /= c;
  for (auto& v : acc.mmd_series) v /= c;
  for (auto& v : acc.crps_series) v /= c;
}

}  // namespace detail

/// Sample-based metrics of the amortized filter (or smoother) against the
/// true states, averaged over test trajectories.
template <class S>
MetricReport evaluate_model(const FluidModel<S>& model,
                            const std::vector<Trajectory>& test,
                            const EvalOptions& opt) {
  FLUID_REQUIRE(!test.empty(), "evaluate_model: empty test set");
  const int n_traj = opt.n_traj > 0
                         ? std::min<int>(opt.n_traj,
                                         static_cast<int>(test.size()))
                         : static_cast<int>(test.size());
  MetricReport acc;
  Rng rng(opt.seed, 30);
  for (int i = 0; i < n_traj; ++i) {
    const Trajectory& tr = test[static_cast<size_t>(i)];
    const int T = opt.horizon > 0
                      ? std::min<int>(opt.horizon,
                                      static_cast<int>(tr.u.rows()))
                      : static_cast<int>(tr.u.rows());
    MatX<S> y = tr.y.topRows(T).template cast<S>();
    std::vector<MatX<S>> ensembles;
    if (opt.smoothing) {
      FLUID_REQUIRE(T >= 2, "evaluate_model: smoothing needs horizon >= 2");
      ensembles = smooth_paths(model, y, opt.n_sample, rng).steps;
    } else {
      ensembles = filter_series(model, y, opt.n_sample, rng);
    }
    std::vector<MatX<double>> samples;
    std::vector<VecX<double>> truth;
    for (int t = 0; t < T; ++t) {
      samples.push_back(
          ensembles[static_cast<size_t>(t)].template cast<double>());
      truth.push_back(tr.u.row(t).cast<double>().transpose());
    }
    detail::accumulate_report(acc, evaluate_metrics(samples, truth));
  }
  detail::finalize_report(acc, n_traj);
  return acc;
}

struct KlSeries {
  std::vector<double> values;      // per step, averaged over trajectories
  std::vector<double> std_errors;  // Monte Carlo, combined per step
  double mean = 0.0;
};

/// Per-step Monte Carlo KL(Kalman filtering posterior || forward flow) on a
/// linear benchmark. The Kalman belief is standardized so both densities live
/// in the flow's input space; the KL is invariant to that affine map.
template <class S>
KlSeries evaluate_filtering_kl(const FluidModel<S>& model,
                               const LinearSSM<double>& ssm,
                               const std::vector<Trajectory>& test,
                               const EvalOptions& opt, int n_mc = 10000) {
  FLUID_REQUIRE(!test.empty(), "evaluate_filtering_kl: empty test set");
  const int n_traj = opt.n_traj > 0
                         ? std::min<int>(opt.n_traj,
                                         static_cast<int>(test.size()))
                         : static_cast<int>(test.size());
  Rng rng(opt.seed, 31);
  const VecX<double>& um = model.stats().u_mean;
  const VecX<double>& us = model.stats().u_std;
  KlSeries out;
  for (int i = 0; i < n_traj; ++i) {
    const Trajectory& tr = test[static_cast<size_t>(i)];
    const int T = opt.horizon > 0
                      ? std::min<int>(opt.horizon,
                                      static_cast<int>(tr.u.rows()))
                      : static_cast<int>(tr.u.rows());
    std::vector<VecX<double>> ys;
    for (int t = 0; t < T; ++t)
      ys.push_back(tr.y.row(t).cast<double>().transpose());
    auto kf = kalman_filter(ys, ssm);
    MatX<S> ystd = model.standardize_y(tr.y.topRows(T).template cast<S>());
    std::vector<MatX<S>> rows;
    for (int t = 0; t < T; ++t) rows.push_back(ystd.row(t));
    auto sums = model.encoder().encode_sequence(model.params, rows);
    if (out.values.empty()) {
      out.values.assign(static_cast<size_t>(T), 0.0);
      out.std_errors.assign(static_cast<size_t>(T), 0.0);
    }
    FLUID_REQUIRE(static_cast<int>(out.values.size()) == T,
                  "evaluate_filtering_kl: inconsistent horizon");
    for (int t = 0; t < T; ++t) {
      GaussianBelief<double> b = kf.filtered[static_cast<size_t>(t)];
      b.mean = (b.mean - um).cwiseQuotient(us);
      b.cov = us.cwiseInverse().asDiagonal() * b.cov *
              us.cwiseInverse().asDiagonal();
      Eigen::RowVectorXd cond =
          sums[static_cast<size_t>(t)].row(0).template cast<double>();
      KlEstimate est = kl_gaussian_vs_flow(b, model.forward_flow(),
                                           model.params, cond, n_mc, rng);
      out.values[static_cast<size_t>(t)] += est.value;
      out.std_errors[static_cast<size_t>(t)] +=
          est.std_error * est.std_error;
    }
  }
  double total = 0.0;
  for (size_t t = 0; t < out.values.size(); ++t) {
    out.values[t] /= n_traj;
    out.std_errors[t] = std::sqrt(out.std_errors[t]) / n_traj;
    total += out.values[t];
  }
  out.mean = total / static_cast<double>(out.values.size());
  return out;
}

inline void write_kl_csv(const std::string& path, const KlSeries& kl) {
  std::ofstream os(path);
  FLUID_CHECK(os.good(), "write_kl_csv: cannot open " + path);
  os << "# schema: fluid.kl.v1\n";
  os << "step,kl,std_error\n";
  os.precision(10);
  for (size_t t = 0; t < kl.values.size(); ++t)
    os << t + 1 << ',' << kl.values[t] << ',' << kl.std_errors[t] << '\n';
  os << "aggregate," << kl.mean << ",\n";
  FLUID_CHECK(os.good(), "write_kl_csv: write failure on " + path);
}

// ------------------------------------------------------------- manifest

/// Hash of the canonical config dump, stable across runs of the same config.
inline std::string config_hash(const std::string& canonical) {
  // FNV-1a, 64-bit
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : canonical) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

inline void write_manifest(const std::string& path, const std::string& verb,
                           const nlohmann::json& config, std::uint64_t seed,
                           const std::vector<std::string>& artifacts,
                           double wall_seconds) {
  nlohmann::json j;
  j["schema"] = "fluid.manifest.v1";
  j["verb"] = verb;
  j["config"] = config;
  j["config_hash"] = config_hash(config.dump());
  j["seed"] = seed;
  j["artifacts"] = artifacts;
  j["wall_seconds"] = wall_seconds;
  j["versions"] = {{"fluid", "0.1.0"},
                   {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                                 std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                 std::to_string(EIGEN_MINOR_VERSION)}};
  std::ofstream os(path);
  FLUID_CHECK(os.good(), "write_manifest: cannot open " + path);
  os << j.dump(2) << '\n';
  FLUID_CHECK(os.good(), "write_manifest: write failure on " + path);
}

}  // namespace fluid
