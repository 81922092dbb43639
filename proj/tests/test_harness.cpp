#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fluid/harness.hpp"
#include "fluid/inference.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace fluid;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("fluid_harness_" + std::to_string(std::rand()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string file(const std::string& name) const {
    return (path / name).string();
  }
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path);
  os << text;
}

std::string read_text(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

LinearSSM<double> scalar_ssm() {
  LinearSSM<double> ssm;
  ssm.M = MatX<double>::Constant(1, 1, 0.9);
  ssm.H = MatX<double>::Constant(1, 1, 1.0);
  ssm.Q = MatX<double>::Constant(1, 1, 0.5);
  ssm.R = MatX<double>::Constant(1, 1, 0.05);
  ssm.mu0 = VecX<double>::Zero(1);
  ssm.Sigma0 = MatX<double>::Identity(1, 1);
  return ssm;
}

// all flows are identity at init, so the forward flow is exactly standard
// normal in standardized units no matter what the encoder emits
FluidModel<float> standard_normal_model(int d_u, int d_y,
                                        const Standardization& stats,
                                        std::uint64_t seed = 0) {
  FluidModelConfig cfg;
  cfg.state_dim = d_u;
  cfg.obs_dim = d_y;
  cfg.summary_dim = 3;
  cfg.encoder_hidden = 6;
  cfg.encoder_layers = 2;
  cfg.flow_couplings = d_u > 1 ? 1 : 0;
  cfg.flow_depth = 1;
  cfg.flow_width = 4;
  cfg.rff_features = 3;
  Rng rng(seed, 90);
  return FluidModel<float>(cfg, stats, rng);
}

}  // namespace

TEST_CASE("key-value config: parsing, includes, overrides") {
  TempDir tmp;
  write_text(tmp.file("base.cfg"),
             "# preset\nalpha = 1\nname = base\nratio = 0.5\n");
  write_text(tmp.file("main.cfg"),
             "include base.cfg\nalpha = 2\nflag = true\n");
  KvConfig cfg = KvConfig::load(tmp.file("main.cfg"));

  CHECK(cfg.get_int("alpha", -1) == 2);  // later assignment wins
  CHECK(cfg.get("name", "") == "base");
  CHECK(cfg.get_double("ratio", 0.0) == doctest::Approx(0.5));
  CHECK(cfg.get_bool("flag", false));
  CHECK(cfg.get_bool("absent", true));
  CHECK(cfg.get("missing", "fallback") == "fallback");
  CHECK(cfg.has("alpha"));
  CHECK_FALSE(cfg.has("missing"));
  CHECK_THROWS_AS((void)cfg.require("missing"), std::invalid_argument);
  CHECK_THROWS_AS((void)cfg.get_bool("name", false), std::invalid_argument);

  cfg.apply_override("alpha=7");
  CHECK(cfg.get_int("alpha", -1) == 7);
  CHECK_THROWS_AS(cfg.apply_override("no_equals"), std::invalid_argument);

  // dump is sorted and survives a json round trip
  const std::string dump = cfg.dump();
  CHECK(dump.find("alpha = 7") < dump.find("flag = true"));
  KvConfig back = KvConfig::from_json(cfg.to_json());
  CHECK(back.dump() == dump);
}

TEST_CASE("key-value config: malformed input is rejected") {
  TempDir tmp;
  write_text(tmp.file("bad.cfg"), "alpha = 1\nnot a key value line\n");
  CHECK_THROWS_AS((void)KvConfig::load(tmp.file("bad.cfg")),
                  std::runtime_error);
  CHECK_THROWS_AS((void)KvConfig::load(tmp.file("nonexistent.cfg")),
                  std::runtime_error);
}

TEST_CASE("benchmark registry: linear cases expose the exact model") {
  KvConfig cfg;
  cfg.set("benchmark", "advdiff1");
  cfg.set("T", "30");
  Benchmark b = make_benchmark(cfg);
  CHECK(b.linear);
  CHECK(b.horizon == 30);
  CHECK(b.ssm.state_dim() == 10);
  Rng rng(1);
  auto trajs = b.sim(3, rng);
  REQUIRE(trajs.size() == 3);
  CHECK(trajs[0].u.rows() == 30);
  CHECK(trajs[0].u.cols() == 10);
  CHECK(trajs[0].y.cols() == b.ssm.H.rows());

  cfg.set("benchmark", "advdiff2");
  Benchmark b2 = make_benchmark(cfg);
  CHECK(b2.linear);
  CHECK(b2.ssm.state_dim() == 16);

  cfg.set("benchmark", "no_such_thing");
  CHECK_THROWS_AS((void)make_benchmark(cfg), std::invalid_argument);
  cfg.set("benchmark", "advdiff1");
  cfg.set("T", "0");
  CHECK_THROWS_AS((void)make_benchmark(cfg), std::invalid_argument);
}

TEST_CASE("benchmark registry: nonlinear families simulate") {
  for (const char* name : {"sv", "burgers", "lorenz", "lorenz2"}) {
    KvConfig cfg;
    cfg.set("benchmark", name);
    cfg.set("T", "4");
    if (std::string(name) == "lorenz") cfg.set("K", "6");
    if (std::string(name) == "lorenz2") {
      cfg.set("K", "4");
    }
    Benchmark b = make_benchmark(cfg);
    CHECK_FALSE(b.linear);
    Rng rng(2);
    auto trajs = b.sim(2, rng);
    REQUIRE(trajs.size() == 2);
    CHECK(trajs[0].u.rows() == 4);
    CHECK(trajs[0].y.rows() == 4);
    CHECK(trajs[0].u.cols() >= 1);
    if (std::string(name) == "lorenz") CHECK(trajs[0].u.cols() == 6);
  }
}

TEST_CASE("benchmark record survives the dataset container") {
  KvConfig cfg;
  cfg.set("benchmark", "advdiff1");
  cfg.set("n", "6");
  cfg.set("T", "15");
  Benchmark b = make_benchmark(cfg);
  nlohmann::json meta = b.meta;
  for (const auto& [k, v] : cfg.entries()) meta[k] = v;

  TempDir tmp;
  Dataset ds = make_dataset(b.sim, 4, 2, 7, meta);
  save_dataset(tmp.file("ds.fluid"), ds);
  Dataset loaded = load_dataset(tmp.file("ds.fluid"));
  Benchmark b2 = benchmark_from_dataset(loaded.config);
  CHECK(b2.linear);
  CHECK(b2.horizon == 15);
  CHECK(b2.ssm.state_dim() == 6);
  CHECK((b2.ssm.M - b.ssm.M).cwiseAbs().maxCoeff() == 0.0);

  nlohmann::json no_record = {{"note", "hand made"}};
  CHECK_THROWS_AS((void)benchmark_from_dataset(no_record),
                  std::invalid_argument);
}

TEST_CASE("metric evaluation matches the known sampling distribution") {
  // the identity-flow model emits N(u_mean, diag(u_std^2)) regardless of the
  // observations, so every expected metric is known in closed form
  Standardization stats;
  stats.u_mean = VecX<double>::Zero(2);
  stats.u_mean << 1.0, -1.0;
  stats.u_std = VecX<double>::Zero(2);
  stats.u_std << 0.5, 0.25;
  stats.y_mean = VecX<double>::Zero(1);
  stats.y_std = VecX<double>::Ones(1);
  auto model = standard_normal_model(2, 1, stats);

  const int T = 6;
  std::vector<Trajectory> test(3);
  Rng data_rng(3);
  for (auto& tr : test) {
    tr.u = data_rng.normal_matrix<float>(T, 2);
    tr.y = data_rng.normal_matrix<float>(T, 1);
  }

  EvalOptions opt;
  opt.n_sample = 2000;
  opt.horizon = 4;
  opt.seed = 9;
  MetricReport rep = evaluate_model(model, test, opt);
  REQUIRE(rep.rmse_series.size() == 4);
  REQUIRE(rep.mmd_series.size() == 4);
  REQUIRE(rep.crps_series.size() == 4);

  // per-step rmse averages sqrt(mean_j (u_mean_j - truth_j)^2) over the
  // trajectories, up to ensemble-mean noise of order u_std / sqrt(N)
  for (int t = 0; t < 4; ++t) {
    double expect = 0.0;
    for (const auto& tr : test) {
      VecX<double> diff =
          stats.u_mean - tr.u.row(t).cast<double>().transpose();
      expect += std::sqrt(diff.squaredNorm() / 2.0);
    }
    expect /= static_cast<double>(test.size());
    CHECK(rep.rmse_series[static_cast<size_t>(t)] ==
          doctest::Approx(expect).epsilon(0.05));
  }
  CHECK(rep.rmse > 0.0);
  CHECK(rep.mmd > 0.0);
  CHECK(rep.crps > 0.0);

  // n_traj = 1 must reproduce a single-trajectory evaluation exactly
  EvalOptions one = opt;
  one.n_traj = 1;
  MetricReport rep1 = evaluate_model(model, test, one);
  std::vector<Trajectory> only_first{test[0]};
  MetricReport rep1b = evaluate_model(model, only_first, opt);
  CHECK(rep1.rmse == doctest::Approx(rep1b.rmse).epsilon(1e-12));
  CHECK(rep1.crps == doctest::Approx(rep1b.crps).epsilon(1e-12));

  CHECK_THROWS_AS((void)evaluate_model(model, std::vector<Trajectory>{}, opt),
                  std::invalid_argument);
}

TEST_CASE("filtering KL against the exact filter: standard-normal flow") {
  auto ssm = scalar_ssm();
  Rng sim_rng(4);
  auto test = simulate_linear(ssm, 5, 2, sim_rng);

  Standardization stats = compute_standardization(test);
  auto model = standard_normal_model(1, 1, stats);

  EvalOptions opt;
  opt.seed = 11;
  KlSeries kl = evaluate_filtering_kl(model, ssm, test, opt, 40000);
  REQUIRE(kl.values.size() == 5);

  // oracle: the flow is N(0, 1) in standardized units, so each step's KL is
  // the closed-form Gaussian KL of the standardized Kalman belief against it
  std::vector<double> expect(5, 0.0);
  for (const auto& tr : test) {
    std::vector<VecX<double>> ys;
    for (int t = 0; t < 5; ++t)
      ys.push_back(tr.y.row(t).cast<double>().transpose());
    auto kf = kalman_filter(ys, ssm);
    for (int t = 0; t < 5; ++t) {
      GaussianBelief<double> b = kf.filtered[static_cast<size_t>(t)];
      b.mean = (b.mean - stats.u_mean).cwiseQuotient(stats.u_std);
      b.cov = stats.u_std.cwiseInverse().asDiagonal() * b.cov *
              stats.u_std.cwiseInverse().asDiagonal();
      GaussianBelief<double> unit{VecX<double>::Zero(1),
                                  MatX<double>::Identity(1, 1)};
      expect[static_cast<size_t>(t)] += kl_gaussian_gaussian(b, unit);
    }
  }
  double expect_mean = 0.0;
  for (size_t t = 0; t < 5; ++t) {
    expect[t] /= static_cast<double>(test.size());
    expect_mean += expect[t] / 5.0;
    CHECK(std::abs(kl.values[t] - expect[t]) <
          6.0 * kl.std_errors[t] + 5e-3);
  }
  CHECK(kl.mean == doctest::Approx(expect_mean).epsilon(0.05));

  TempDir tmp;
  write_kl_csv(tmp.file("kl.csv"), kl);
  std::ifstream is(tmp.file("kl.csv"));
  std::string line;
  std::getline(is, line);
  CHECK(line == "# schema: fluid.kl.v1");
  std::getline(is, line);
  CHECK(line == "step,kl,std_error");
}

TEST_CASE("manifest carries a stable config hash") {
  CHECK(config_hash("abc") == config_hash("abc"));
  CHECK(config_hash("abc") != config_hash("abd"));

  TempDir tmp;
  nlohmann::json cfg = {{"benchmark", "advdiff1"}, {"T", "30"}};
  write_manifest(tmp.file("m.json"), "generate", cfg, 42,
                 {"ds.fluid", "obs.csv"}, 1.5);
  std::ifstream is(tmp.file("m.json"));
  nlohmann::json j = nlohmann::json::parse(is);
  CHECK(j.at("schema") == "fluid.manifest.v1");
  CHECK(j.at("verb") == "generate");
  CHECK(j.at("seed") == 42);
  CHECK(j.at("artifacts").size() == 2);
  CHECK(j.at("config_hash") == config_hash(cfg.dump()));
  CHECK(j.at("wall_seconds").get<double>() == doctest::Approx(1.5));
}

TEST_CASE("command line: same seed gives byte-identical artifacts") {
  TempDir tmp;
  const std::string cli = FLUID_CLI_PATH;
  auto run = [&](const std::string& args) {
    const std::string cmd = cli + " " + args + " > /dev/null 2>&1";
    return std::system(cmd.c_str());
  };

  REQUIRE(run("generate --set benchmark=advdiff1 n=6 T=12 n_train=20 n_test=3 "
              "seed=3 --out " + tmp.file("ds.fluid")) == 0);
  REQUIRE(run("train --set epochs=1 batch_size=4 encoder_hidden=8 "
              "encoder_layers=2 flow_couplings=1 flow_depth=1 flow_width=8 "
              "rff_features=4 --dataset " + tmp.file("ds.fluid") +
              " --out " + tmp.file("run")) == 0);

  const std::string model = tmp.file("run") + "/model_final.fluid";
  REQUIRE(run("infer --model " + model + " --mode filter --dataset " +
              tmp.file("ds.fluid") + " --traj 0 --t 6 --n-sample 64 --seed 5 "
              "--out " + tmp.file("a.csv")) == 0);
  REQUIRE(run("infer --model " + model + " --mode filter --dataset " +
              tmp.file("ds.fluid") + " --traj 0 --t 6 --n-sample 64 --seed 5 "
              "--out " + tmp.file("b.csv")) == 0);
  REQUIRE(run("infer --model " + model + " --mode filter --dataset " +
              tmp.file("ds.fluid") + " --traj 0 --t 6 --n-sample 64 --seed 6 "
              "--out " + tmp.file("c.csv")) == 0);
  const std::string a = read_text(tmp.file("a.csv"));
  CHECK(a == read_text(tmp.file("b.csv")));
  CHECK(a != read_text(tmp.file("c.csv")));

  REQUIRE(run("pf --exact --dataset " + tmp.file("ds.fluid") +
              " --traj 0 --n 128 --seed 2 --out " + tmp.file("p1.csv")) == 0);
  REQUIRE(run("pf --exact --dataset " + tmp.file("ds.fluid") +
              " --traj 0 --n 128 --seed 2 --out " + tmp.file("p2.csv")) == 0);
  CHECK(read_text(tmp.file("p1.csv")) == read_text(tmp.file("p2.csv")));

  REQUIRE(run("evaluate --model " + model + " --dataset " +
              tmp.file("ds.fluid") + " --n-sample 32 --n-traj 1 --t 5 "
              "--reference kalman --seed 1 --out " + tmp.file("eval")) == 0);
  const std::string metrics = read_text(tmp.file("eval") + "/metrics.csv");
  CHECK(metrics.rfind("# schema: fluid.metrics.v1", 0) == 0);
  CHECK(read_text(tmp.file("eval") + "/kl.csv")
            .rfind("# schema: fluid.kl.v1", 0) == 0);

  // smoothing mode and the failure path both behave
  REQUIRE(run("infer --model " + model + " --mode smooth --dataset " +
              tmp.file("ds.fluid") + " --traj 0 --t 6 --n-sample 32 --seed 5 "
              "--out " + tmp.file("s.csv")) == 0);
  CHECK(read_text(tmp.file("s.csv")).rfind("# schema: fluid.smoothing.v1", 0) ==
        0);
  CHECK(run("infer --model " + model + " --mode bogus --dataset " +
            tmp.file("ds.fluid") + " --out " + tmp.file("x.csv")) != 0);
}
