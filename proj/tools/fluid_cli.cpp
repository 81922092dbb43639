// Command-line front end: generate benchmark datasets, train the amortized
// filter/smoother or the particle-filter flows, run inference, run particle
// filters, and evaluate against exact references.

#include "fluid/dataset.hpp"
#include "fluid/harness.hpp"
#include "fluid/inference.hpp"
#include "fluid/particle_filter.hpp"
#include "fluid/trainer.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

namespace {

using namespace fluid;

double now_seconds() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

KvConfig resolve_config(const std::string& config_path,
                        const std::vector<std::string>& overrides) {
  KvConfig cfg;
  if (!config_path.empty()) cfg = KvConfig::load(config_path);
  for (const auto& kv : overrides) cfg.apply_override(kv);
  return cfg;
}

FluidModelConfig model_config_from(const KvConfig& cfg, int d_u, int d_y) {
  FluidModelConfig mc;
  mc.state_dim = d_u;
  mc.obs_dim = d_y;
  mc.summary_dim = cfg.get_int("summary_dim", mc.summary_dim);
  mc.encoder_hidden = cfg.get_int("encoder_hidden", mc.encoder_hidden);
  mc.encoder_layers = cfg.get_int("encoder_layers", mc.encoder_layers);
  mc.flow_couplings = cfg.get_int("flow_couplings", mc.flow_couplings);
  mc.flow_depth = cfg.get_int("flow_depth", mc.flow_depth);
  mc.flow_width = cfg.get_int("flow_width", mc.flow_width);
  mc.rff_features = cfg.get_int("rff_features", mc.rff_features);
  mc.shared_summary = cfg.get_bool("shared_summary", mc.shared_summary);
  return mc;
}

TrainConfig train_config_from(const KvConfig& cfg) {
  TrainConfig tc;
  tc.epochs = cfg.get_int("epochs", tc.epochs);
  tc.batch_size = cfg.get_int("batch_size", tc.batch_size);
  tc.lambda = cfg.get_double("lambda", tc.lambda);
  tc.lr = cfg.get_double("lr", tc.lr);
  tc.lr_min = cfg.get_double("lr_min", tc.lr_min);
  tc.grad_clip = cfg.get_double("grad_clip", tc.grad_clip);
  tc.seed = cfg.get_u64("seed", tc.seed);
  tc.checkpoint_every = cfg.get_int("checkpoint_every", tc.checkpoint_every);
  tc.bptt_truncation = cfg.get_int("bptt_truncation", tc.bptt_truncation);
  tc.val_fraction = cfg.get_double("val_fraction", tc.val_fraction);
  return tc;
}

MatX<float> load_observation_rows(const std::string& obs_csv,
                                  const std::string& dataset_path, int traj,
                                  int t_prefix) {
  MatX<double> y;
  if (!obs_csv.empty()) {
    y = read_observations_csv(obs_csv);
  } else {
    FLUID_REQUIRE(!dataset_path.empty(),
                  "need either --obs or --dataset to supply observations");
    Dataset ds = load_dataset(dataset_path);
    const auto& pool = ds.test.empty() ? ds.train : ds.test;
    FLUID_REQUIRE(traj >= 0 && traj < static_cast<int>(pool.size()),
                  "--traj out of range");
    y = pool[static_cast<size_t>(traj)].y.cast<double>();
  }
  if (t_prefix > 0) {
    FLUID_REQUIRE(t_prefix <= static_cast<int>(y.rows()),
                  "--t exceeds the observation horizon");
    y = y.topRows(t_prefix).eval();
  }
  return y.cast<float>();
}

int cmd_generate(const std::string& config_path,
                 const std::vector<std::string>& overrides,
                 const std::string& out_path, const std::string& obs_csv) {
  const double t0 = now_seconds();
  KvConfig cfg = resolve_config(config_path, overrides);
  Benchmark bench = make_benchmark(cfg);
  const int n_train = cfg.get_int("n_train", 500);
  const int n_test = cfg.get_int("n_test", 50);
  const std::uint64_t seed = cfg.get_u64("seed", 0);

  nlohmann::json meta = bench.meta;
  for (const auto& [k, v] : cfg.entries()) meta[k] = v;
  Dataset ds = make_dataset(bench.sim, n_train, n_test, seed, meta);
  save_dataset(out_path, ds);

  std::vector<std::string> artifacts{out_path};
  if (!obs_csv.empty()) {
    const auto& pool = ds.test.empty() ? ds.train : ds.test;
    write_observations_csv(obs_csv, pool[0].y.cast<double>());
    artifacts.push_back(obs_csv);
  }
  write_manifest(out_path + ".manifest.json", "generate", cfg.to_json(), seed,
                 artifacts, now_seconds() - t0);
  std::cout << "wrote " << out_path << " (" << ds.train.size() << " train, "
            << ds.test.size() << " test, T=" << bench.horizon << ")\n";
  return 0;
}

int cmd_train(const std::string& config_path,
              const std::vector<std::string>& overrides,
              const std::string& dataset_path, const std::string& out_dir,
              const std::string& resume_from, bool pf) {
  const double t0 = now_seconds();
  KvConfig cfg = resolve_config(config_path, overrides);
  Dataset ds = load_dataset(dataset_path);
  FLUID_REQUIRE(!ds.train.empty(), "train: dataset has no training split");
  std::filesystem::create_directories(out_dir);
  const int d_u = static_cast<int>(ds.train[0].u.cols());
  const int d_y = static_cast<int>(ds.train[0].y.cols());

  std::vector<std::string> artifacts;
  if (pf) {
    PFModelConfig mc;
    mc.state_dim = d_u;
    mc.obs_dim = d_y;
    mc.flow_couplings = cfg.get_int("flow_couplings", mc.flow_couplings);
    mc.flow_depth = cfg.get_int("flow_depth", mc.flow_depth);
    mc.flow_width = cfg.get_int("flow_width", mc.flow_width);
    mc.rff_features = cfg.get_int("rff_features", mc.rff_features);
    mc.bootstrap = cfg.get_bool("bootstrap", mc.bootstrap);
    PFTrainConfig tc;
    tc.epochs = cfg.get_int("epochs", tc.epochs);
    tc.batch_size = cfg.get_int("batch_size", tc.batch_size);
    tc.lr = cfg.get_double("lr", tc.lr);
    tc.grad_clip = cfg.get_double("grad_clip", tc.grad_clip);
    tc.seed = cfg.get_u64("seed", tc.seed);
    auto triples = collect_transition_triples(ds.train);
    PFModel<float> model = train_pf_flows(triples, mc, tc);
    const std::string model_path = out_dir + "/pf_model.fluid";
    model.save(model_path);
    artifacts.push_back(model_path);
    std::cout << "trained pf flows on " << triples.size()
              << " transitions -> " << model_path << "\n";
    write_manifest(out_dir + "/manifest.json", "train", cfg.to_json(), tc.seed,
                   artifacts, now_seconds() - t0);
    return 0;
  }

  FluidModelConfig mc = model_config_from(cfg, d_u, d_y);
  TrainConfig tc = train_config_from(cfg);
  TrainResult<float> res = train(ds.train, mc, tc, out_dir, resume_from);
  artifacts.push_back(out_dir + "/model_final.fluid");
  artifacts.push_back(out_dir + "/training_log.csv");
  write_manifest(out_dir + "/manifest.json", "train", cfg.to_json(), tc.seed,
                 artifacts, now_seconds() - t0);
  const EpochStats& last = res.curve.back();
  std::cout << "epoch " << last.epoch << " train_nll " << last.train_nll
            << " val_nll " << last.val_nll << " -> " << out_dir << "\n";
  return 0;
}

int cmd_infer(const std::string& model_path, const std::string& mode,
              const std::string& obs_csv, const std::string& dataset_path,
              int traj, int t_prefix, int n_sample, std::uint64_t seed,
              const std::string& out_csv) {
  auto model = FluidModel<float>::load(model_path);
  MatX<float> y = load_observation_rows(obs_csv, dataset_path, traj, t_prefix);
  Rng rng(seed, 40);
  if (mode == "filter") {
    auto result = filter_samples(model, y, n_sample, rng);
    write_filter_csv(out_csv, result);
  } else if (mode == "smooth") {
    auto paths = smooth_paths(model, y, n_sample, rng);
    write_smoothing_csv(out_csv, paths);
  } else {
    throw CLI::ValidationError("--mode must be filter or smooth");
  }
  std::cout << "wrote " << out_csv << "\n";
  return 0;
}

void write_pf_csv(const std::string& path,
                  const std::vector<ParticleEnsemble<float>>& steps) {
  std::ofstream os(path);
  FLUID_CHECK(os.good(), "write_pf_csv: cannot open " + path);
  os << "# schema: fluid.pf.v1\n";
  os << "step,ress";
  for (Eigen::Index j = 0; j < steps.front().particles.cols(); ++j)
    os << ",mean" << j + 1;
  os << '\n';
  os.precision(17);
  for (size_t t = 0; t < steps.size(); ++t) {
    const auto& ens = steps[t];
    VecX<double> mean =
        ens.particles.cast<double>().transpose() * ens.weights;
    os << t + 1 << ',' << ens.ress;
    for (Eigen::Index j = 0; j < mean.size(); ++j) os << ',' << mean(j);
    os << '\n';
  }
  FLUID_CHECK(os.good(), "write_pf_csv: write failure on " + path);
}

int cmd_pf(const std::string& model_path, bool exact,
           const std::string& dataset_path, int traj, int t_prefix, int n,
           std::uint64_t seed, const std::string& resampler_name,
           const std::string& out_csv) {
  Resampler resampler = resampler_name == "systematic" ? Resampler::kSystematic
                                                       : Resampler::kMultinomial;
  MatX<float> y = load_observation_rows("", dataset_path, traj, t_prefix);
  Rng rng(seed, 41);
  std::vector<ParticleEnsemble<float>> steps;
  if (exact) {
    Dataset ds = load_dataset(dataset_path);
    Benchmark bench = benchmark_from_dataset(ds.config);
    FLUID_REQUIRE(bench.linear,
                  "--exact needs a linear benchmark in the dataset record");
    steps = exact_linear_pf(bench.ssm, y, n, rng, resampler);
  } else {
    FLUID_REQUIRE(!model_path.empty(), "pf: need --model or --exact");
    auto model = PFModel<float>::load(model_path);
    const auto d = model.config().state_dim;
    // particles start from the dataset-wide state distribution
    MatX<float> init(n, d);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j)
        init(i, j) = static_cast<float>(model.stats().u_mean(j) +
                                        model.stats().u_std(j) * rng.normal());
    steps = run_pf(model, y, std::move(init), rng, resampler);
  }
  write_pf_csv(out_csv, steps);
  std::vector<double> ress;
  for (const auto& s : steps) ress.push_back(s.ress);
  const double min_ress = *std::min_element(ress.begin(), ress.end());
  std::cout << "ran " << steps.size() << " steps, min ress " << min_ress
            << ", wrote " << out_csv << "\n";
  return 0;
}

int cmd_evaluate(const std::string& model_path, const std::string& dataset_path,
                 bool smoothing, int n_sample, int n_traj, int t_prefix,
                 const std::string& reference, std::uint64_t seed,
                 const std::string& out_dir) {
  const double t0 = now_seconds();
  auto model = FluidModel<float>::load(model_path);
  Dataset ds = load_dataset(dataset_path);
  const auto& pool = ds.test.empty() ? ds.train : ds.test;
  std::filesystem::create_directories(out_dir);

  EvalOptions opt;
  opt.n_sample = n_sample;
  opt.n_traj = n_traj;
  opt.horizon = t_prefix;
  opt.smoothing = smoothing;
  opt.seed = seed;
  MetricReport rep = evaluate_model(model, pool, opt);
  const std::string metrics_path = out_dir + "/metrics.csv";
  write_metrics_csv(metrics_path, rep);
  std::vector<std::string> artifacts{metrics_path};
  std::cout << (smoothing ? "smoothing" : "filtering") << " rmse " << rep.rmse
            << " mmd " << rep.mmd << " crps " << rep.crps << "\n";

  if (reference == "kalman") {
    Benchmark bench = benchmark_from_dataset(ds.config);
    FLUID_REQUIRE(bench.linear,
                  "--reference kalman needs a linear benchmark dataset");
    KlSeries kl = evaluate_filtering_kl(model, bench.ssm, pool, opt);
    const std::string kl_path = out_dir + "/kl.csv";
    write_kl_csv(kl_path, kl);
    artifacts.push_back(kl_path);
    std::cout << "mean filtering kl vs kalman " << kl.mean << "\n";
  } else {
    FLUID_REQUIRE(reference == "none", "--reference must be none or kalman");
  }
  nlohmann::json cfg;
  cfg["model"] = model_path;
  cfg["dataset"] = dataset_path;
  cfg["smoothing"] = smoothing ? "true" : "false";
  cfg["reference"] = reference;
  write_manifest(out_dir + "/manifest.json", "evaluate", cfg, seed, artifacts,
                 now_seconds() - t0);
  return 0;
}

int cmd_ess(const std::string& model_path, const std::string& dataset_path,
            std::vector<int> counts, int burn, std::uint64_t seed,
            const std::string& out_csv) {
  auto model = PFModel<float>::load(model_path);
  Dataset ds = load_dataset(dataset_path);
  Benchmark bench = benchmark_from_dataset(ds.config);
  FLUID_REQUIRE(bench.linear, "ess: needs a linear benchmark dataset");
  const LinearSSM<double>& ssm = bench.ssm;
  const auto d = ssm.state_dim();
  if (counts.empty()) counts = {1000};

  std::ofstream os(out_csv);
  FLUID_CHECK(os.good(), "ess: cannot open " + out_csv);
  os << "# schema: fluid.ess.v1\n";
  os << "n,ess,ress,chi2\n";
  os.precision(10);
  Rng rng(seed, 42);
  auto llt0 = Eigen::LLT<MatX<double>>(ssm.Sigma0);
  auto lltq = Eigen::LLT<MatX<double>>(ssm.Q);
  auto lltr = Eigen::LLT<MatX<double>>(ssm.R);
  for (int n : counts) {
    FLUID_REQUIRE(n > 0, "ess: sample count must be positive");
    MatX<float> u_prev(n, d), u(n, d);
    MatX<float> y(n, ssm.obs_dim());
    VecX<double> log_trans(n), log_lik(n);
    for (int i = 0; i < n; ++i) {
      // u_prev from the model prior pushed through a few transitions, then
      // one exact transition and its observation: the order the importance
      // identity assumes
      VecX<double> up = ssm.mu0 + llt0.matrixL() * rng.normal_vector<double>(d);
      for (int b = 0; b < burn; ++b)
        up = ssm.M * up + lltq.matrixL() * rng.normal_vector<double>(d);
      VecX<double> uc =
          ssm.M * up + lltq.matrixL() * rng.normal_vector<double>(d);
      VecX<double> yc = ssm.H * uc + lltr.matrixL() *
                                         rng.normal_vector<double>(ssm.obs_dim());
      u_prev.row(i) = up.cast<float>().transpose();
      u.row(i) = uc.cast<float>().transpose();
      y.row(i) = yc.cast<float>().transpose();
      log_trans(i) = gaussian_log_density<double>(uc, ssm.M * up, ssm.Q);
      log_lik(i) = gaussian_log_density<double>(yc, ssm.H * uc, ssm.R);
    }
    EssReport rep = ess_diagnostic(model, u_prev, u, y, log_trans, log_lik);
    os << n << ',' << rep.ess << ',' << rep.ress << ',' << rep.chi2 << '\n';
    std::cout << "n " << n << " ess " << rep.ess << " ress " << rep.ress
              << " chi2 " << rep.chi2 << "\n";
  }
  FLUID_CHECK(os.good(), "ess: write failure on " + out_csv);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"amortized filtering and smoothing for state-space models"};
  app.require_subcommand(1);

  std::string config_path, dataset_path, model_path, out_path, out_dir;
  std::string obs_csv, mode = "filter", resampler = "multinomial";
  std::string reference = "none", resume_from;
  std::vector<std::string> overrides;
  std::vector<int> counts;
  int traj = 0, t_prefix = 0, n_sample = 1000, n_particles = 1024, burn = 5;
  std::uint64_t seed = 0;
  bool pf_flows = false, exact = false, smoothing = false;

  auto* gen = app.add_subcommand("generate", "simulate a benchmark dataset");
  gen->add_option("--config", config_path, "key=value config file");
  gen->add_option("--set", overrides, "config override key=value")
      ->take_all();
  gen->add_option("--out", out_path, "dataset output path")->required();
  gen->add_option("--obs-csv", obs_csv,
                  "also dump the first test trajectory's observations");

  auto* tr = app.add_subcommand("train", "train models on a dataset");
  tr->add_option("--config", config_path, "key=value config file");
  tr->add_option("--set", overrides, "config override key=value")->take_all();
  tr->add_option("--dataset", dataset_path, "dataset path")->required();
  tr->add_option("--out", out_dir, "output directory")->required();
  tr->add_option("--resume", resume_from, "checkpoint to resume from");
  tr->add_flag("--pf", pf_flows, "train particle-filter flows instead");

  auto* inf = app.add_subcommand("infer", "filter or smooth one sequence");
  inf->add_option("--model", model_path, "trained model")->required();
  inf->add_option("--mode", mode, "filter | smooth");
  inf->add_option("--obs", obs_csv, "observations csv");
  inf->add_option("--dataset", dataset_path, "dataset to take a test sequence from");
  inf->add_option("--traj", traj, "test trajectory index");
  inf->add_option("--t", t_prefix, "observation prefix length (0 = all)");
  inf->add_option("--n-sample", n_sample, "posterior draws");
  inf->add_option("--seed", seed, "rng seed");
  inf->add_option("--out", out_path, "output csv")->required();

  auto* pf = app.add_subcommand("pf", "run a particle filter");
  pf->add_option("--model", model_path, "trained particle-filter flows");
  pf->add_flag("--exact", exact, "use exact linear-Gaussian factors");
  pf->add_option("--dataset", dataset_path, "dataset path")->required();
  pf->add_option("--traj", traj, "test trajectory index");
  pf->add_option("--t", t_prefix, "observation prefix length (0 = all)");
  pf->add_option("--n", n_particles, "particle count");
  pf->add_option("--seed", seed, "rng seed");
  pf->add_option("--resampler", resampler, "multinomial | systematic");
  pf->add_option("--out", out_path, "output csv")->required();

  auto* ev = app.add_subcommand("evaluate", "metrics over the test split");
  ev->add_option("--model", model_path, "trained model")->required();
  ev->add_option("--dataset", dataset_path, "dataset path")->required();
  ev->add_flag("--smoothing", smoothing, "evaluate smoothing marginals");
  ev->add_option("--n-sample", n_sample, "posterior draws per step");
  ev->add_option("--n-traj", traj, "trajectories to use (0 = all)")
      ->default_val(0);
  ev->add_option("--t", t_prefix, "horizon cutoff (0 = full)");
  ev->add_option("--reference", reference, "none | kalman");
  ev->add_option("--seed", seed, "rng seed");
  ev->add_option("--out", out_dir, "output directory")->required();

  auto* es = app.add_subcommand(
      "ess", "importance-weight effective sample size diagnostic");
  es->add_option("--model", model_path, "trained particle-filter flows")
      ->required();
  es->add_option("--dataset", dataset_path, "linear benchmark dataset")
      ->required();
  es->add_option("--n", counts, "sample counts, repeatable")->take_all();
  es->add_option("--burn", burn, "transitions before the scored one");
  es->add_option("--seed", seed, "rng seed");
  es->add_option("--out", out_path, "output csv")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed())
      return cmd_generate(config_path, overrides, out_path, obs_csv);
    if (tr->parsed())
      return cmd_train(config_path, overrides, dataset_path, out_dir,
                       resume_from, pf_flows);
    if (inf->parsed())
      return cmd_infer(model_path, mode, obs_csv, dataset_path, traj, t_prefix,
                       n_sample, seed, out_path);
    if (pf->parsed())
      return cmd_pf(model_path, exact, dataset_path, traj, t_prefix,
                    n_particles, seed, resampler, out_path);
    if (ev->parsed())
      return cmd_evaluate(model_path, dataset_path, smoothing, n_sample, traj,
                          t_prefix, reference, seed, out_dir);
    if (es->parsed())
      return cmd_ess(model_path, dataset_path, counts, burn, seed, out_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
