#pragma once

#include "fluid/core.hpp"
#include "fluid/dataset.hpp"
#include "fluid/encoder.hpp"
#include "fluid/flow.hpp"
#include "fluid/model_io.hpp"
#include "fluid/param_store.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <fstream>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

namespace fluid {

struct FluidModelConfig {
  int state_dim = 1;   // d_u
  int obs_dim = 1;     // d_y
  int summary_dim = 0;  // d_s, 0 picks 3 * obs_dim
  int encoder_hidden = 128;
  int encoder_layers = 4;
  int flow_couplings = 6;
  int flow_depth = 6;
  int flow_width = 64;
  int rff_features = 64;
  bool shared_summary = true;

  int resolved_summary_dim() const {
    return summary_dim > 0 ? summary_dim : 3 * obs_dim;
  }

  void validate() const {
    FLUID_REQUIRE(state_dim > 0 && obs_dim > 0,
                  "FluidModelConfig: dimensions must be positive");
    FLUID_REQUIRE(summary_dim >= 0, "FluidModelConfig: negative summary_dim");
    FLUID_REQUIRE(encoder_hidden > 0 && encoder_layers > 0,
                  "FluidModelConfig: encoder sizes must be positive");
    FLUID_REQUIRE(flow_couplings >= 0 && flow_depth > 0 && flow_width > 0 &&
                      rff_features > 0,
                  "FluidModelConfig: flow sizes must be positive");
  }
};

/// Encoder plus the two state flows: a filtering flow over u conditioned on
/// the running summary s, and a backward flow over u conditioned on
/// [u_next; s]. When shared_summary is off the backward flow gets its own
/// encoder and the two terms of the joint loss decouple completely.
template <class S = float>
class FluidModel {
 public:
  FluidModel() = default;

  FluidModel(FluidModelConfig config, Standardization stats, Rng& init_rng)
      : cfg_(config), stats_(std::move(stats)) {
    cfg_.validate();
    const int ds = cfg_.resolved_summary_dim();
    FLUID_REQUIRE(stats_.u_mean.size() == cfg_.state_dim &&
                      stats_.y_mean.size() == cfg_.obs_dim,
                  "FluidModel: standardization dims do not match config");
    EncoderConfig ec;
    ec.obs_dim = cfg_.obs_dim;
    ec.hidden_dim = cfg_.encoder_hidden;
    ec.layers = cfg_.encoder_layers;
    ec.summary_dim = ds;
    encoder_ = EncoderModel<S>(ec, params, "enc", init_rng);
    if (!cfg_.shared_summary)
      encoder2_ = EncoderModel<S>(ec, params, "enc2", init_rng);

    FlowConfig fwd;
    fwd.data_dim = cfg_.state_dim;
    fwd.cond_dim = ds;
    fwd.num_coupling = cfg_.flow_couplings;
    fwd.mlp_depth = cfg_.flow_depth;
    fwd.mlp_width = cfg_.flow_width;
    fwd.rff_features = cfg_.rff_features;
    FlowConfig bwd = fwd;
    bwd.cond_dim = cfg_.state_dim + ds;
    fwd_flow_ = FlowModel<S>(fwd, params, "flow_fwd", init_rng);
    bwd_flow_ = FlowModel<S>(bwd, params, "flow_bwd", init_rng);
  }

  ParamStore<S> params;

  const FluidModelConfig& config() const { return cfg_; }
  const Standardization& stats() const { return stats_; }
  int summary_dim() const { return cfg_.resolved_summary_dim(); }
  const EncoderModel<S>& encoder() const { return encoder_; }
  /// Encoder feeding the backward flow (the shared one unless decoupled).
  const EncoderModel<S>& backward_encoder() const {
    return cfg_.shared_summary ? encoder_ : encoder2_;
  }
  const FlowModel<S>& forward_flow() const { return fwd_flow_; }
  const FlowModel<S>& backward_flow() const { return bwd_flow_; }

  MatX<S> standardize_u(const MatX<S>& u) const {
    return affine(u, stats_.u_mean, stats_.u_std, /*forward=*/true);
  }
  MatX<S> standardize_y(const MatX<S>& y) const {
    return affine(y, stats_.y_mean, stats_.y_std, /*forward=*/true);
  }
  MatX<S> destandardize_u(const MatX<S>& u) const {
    return affine(u, stats_.u_mean, stats_.u_std, /*forward=*/false);
  }

  void save(const std::string& path, bool with_optimizer = false,
            nlohmann::json extra = nlohmann::json::object()) const {
    nlohmann::json cfg = extra;
    cfg["kind"] = "fluid.model.v1";
    cfg["state_dim"] = cfg_.state_dim;
    cfg["obs_dim"] = cfg_.obs_dim;
    cfg["summary_dim"] = cfg_.summary_dim;
    cfg["encoder_hidden"] = cfg_.encoder_hidden;
    cfg["encoder_layers"] = cfg_.encoder_layers;
    cfg["flow_couplings"] = cfg_.flow_couplings;
    cfg["flow_depth"] = cfg_.flow_depth;
    cfg["flow_width"] = cfg_.flow_width;
    cfg["rff_features"] = cfg_.rff_features;
    cfg["shared_summary"] = cfg_.shared_summary;
    cfg["stats"] = {{"u_mean", to_std(stats_.u_mean)},
                    {"u_std", to_std(stats_.u_std)},
                    {"y_mean", to_std(stats_.y_mean)},
                    {"y_std", to_std(stats_.y_std)}};
    save_container<S>(path, cfg, params, with_optimizer);
  }

  static FluidModel load(const std::string& path,
                         nlohmann::json* config_out = nullptr) {
    nlohmann::json cfg = peek_container_config(path);
    FLUID_CHECK(cfg.value("kind", "") == "fluid.model.v1",
                "FluidModel::load: not a model container: " + path);
    FluidModelConfig mc;
    mc.state_dim = cfg.at("state_dim").get<int>();
    mc.obs_dim = cfg.at("obs_dim").get<int>();
    mc.summary_dim = cfg.at("summary_dim").get<int>();
    mc.encoder_hidden = cfg.at("encoder_hidden").get<int>();
    mc.encoder_layers = cfg.at("encoder_layers").get<int>();
    mc.flow_couplings = cfg.at("flow_couplings").get<int>();
    mc.flow_depth = cfg.at("flow_depth").get<int>();
    mc.flow_width = cfg.at("flow_width").get<int>();
    mc.rff_features = cfg.at("rff_features").get<int>();
    mc.shared_summary = cfg.at("shared_summary").get<bool>();
    Standardization st;
    st.u_mean = from_std(cfg.at("stats").at("u_mean"));
    st.u_std = from_std(cfg.at("stats").at("u_std"));
    st.y_mean = from_std(cfg.at("stats").at("y_mean"));
    st.y_std = from_std(cfg.at("stats").at("y_std"));
    Rng scratch(0);
    FluidModel model(mc, std::move(st), scratch);
    load_container<S>(path, model.params);
    if (config_out != nullptr) *config_out = std::move(cfg);
    return model;
  }

 private:
  static std::vector<double> to_std(const VecX<double>& v) {
    return std::vector<double>(v.data(), v.data() + v.size());
  }
  static VecX<double> from_std(const nlohmann::json& j) {
    auto v = j.get<std::vector<double>>();
    return Eigen::Map<const VecX<double>>(v.data(),
                                          static_cast<Eigen::Index>(v.size()));
  }

  MatX<S> affine(const MatX<S>& x, const VecX<double>& mean,
                 const VecX<double>& std, bool forward) const {
    FLUID_REQUIRE(x.cols() == mean.size(),
                  "FluidModel: dimension mismatch in standardization");
    MatX<S> out = x;
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const S m = static_cast<S>(mean(j)), s = static_cast<S>(std(j));
      if (forward)
        out.col(j) = (x.col(j).array() - m) / s;
      else
        out.col(j) = x.col(j).array() * s + m;
    }
    return out;
  }

  FluidModelConfig cfg_;
  Standardization stats_;
  EncoderModel<S> encoder_, encoder2_;
  FlowModel<S> fwd_flow_, bwd_flow_;
};

struct JointLoss {
  double total = 0.0;       // filter_nll + lambda * path_nll
  double filter_nll = 0.0;  // -(1/(B T)) sum_t log p(u_t | s_t)
  double path_nll = 0.0;    // -(1/(B (T-1))) sum_{t<T} log p(u_t | u_{t+1}, s_t)
};

/// Joint weighted NLL over a mini-batch in standardized units. `us` and `ys`
/// are time-major: T matrices of shape B x d. With with_grad set the analytic
/// gradient of `total` is accumulated into model.params.
template <class S>
JointLoss joint_loss_standardized(FluidModel<S>& model,
                                  const std::vector<MatX<S>>& us,
                                  const std::vector<MatX<S>>& ys,
                                  double lambda, bool with_grad = false,
                                  int truncation = 0) {
  const int T = static_cast<int>(us.size());
  FLUID_REQUIRE(T >= 2, "joint_loss: need trajectory length T >= 2");
  FLUID_REQUIRE(ys.size() == us.size(), "joint_loss: u/y length mismatch");
  FLUID_REQUIRE(lambda >= 0.0, "joint_loss: negative lambda");
  const Eigen::Index B = us.front().rows();
  const int du = model.config().state_dim;
  const int ds = model.summary_dim();
  for (int t = 0; t < T; ++t) {
    FLUID_REQUIRE(us[static_cast<size_t>(t)].rows() == B &&
                      ys[static_cast<size_t>(t)].rows() == B,
                  "joint_loss: ragged batch");
    FLUID_REQUIRE(us[static_cast<size_t>(t)].cols() == du &&
                      ys[static_cast<size_t>(t)].cols() ==
                          model.config().obs_dim,
                  "joint_loss: dimension mismatch");
  }

  const bool shared = model.config().shared_summary;
  typename EncoderModel<S>::SeqCache ecache, ecache2;
  std::vector<MatX<S>> sums = model.encoder().encode_sequence(
      model.params, ys, with_grad ? &ecache : nullptr);
  std::vector<MatX<S>> sums2;
  if (!shared)
    sums2 = model.backward_encoder().encode_sequence(
        model.params, ys, with_grad ? &ecache2 : nullptr);
  const std::vector<MatX<S>>& bsums = shared ? sums : sums2;

  const double wf = -1.0 / (static_cast<double>(B) * T);
  const double wp = -1.0 / (static_cast<double>(B) * (T - 1));

  JointLoss out;
  std::vector<MatX<S>> dsum(static_cast<size_t>(T), MatX<S>::Zero(B, ds));
  std::vector<MatX<S>> dsum2;
  if (with_grad && !shared)
    dsum2.assign(static_cast<size_t>(T), MatX<S>::Zero(B, ds));

  for (int t = 0; t < T; ++t) {
    const size_t ti = static_cast<size_t>(t);
    typename FlowModel<S>::Cache fc;
    VecX<S> lp = model.forward_flow().log_prob(model.params, us[ti], sums[ti],
                                               with_grad ? &fc : nullptr);
    out.filter_nll += wf * static_cast<double>(lp.template cast<double>().sum());
    if (with_grad) {
      VecX<S> w = VecX<S>::Constant(B, static_cast<S>(wf));
      MatX<S> dc;
      model.forward_flow().log_prob_backward(model.params, fc, w, &dc);
      dsum[ti] += dc;
    }
  }

  for (int t = 0; t + 1 < T; ++t) {
    const size_t ti = static_cast<size_t>(t);
    MatX<S> cond(B, du + ds);
    cond.leftCols(du) = us[ti + 1];
    cond.rightCols(ds) = bsums[ti];
    typename FlowModel<S>::Cache fc;
    const bool grad_here = with_grad && lambda > 0.0;
    VecX<S> lp = model.backward_flow().log_prob(model.params, us[ti], cond,
                                                grad_here ? &fc : nullptr);
    out.path_nll += wp * static_cast<double>(lp.template cast<double>().sum());
    if (grad_here) {
      VecX<S> w = VecX<S>::Constant(B, static_cast<S>(lambda * wp));
      MatX<S> dc;
      model.backward_flow().log_prob_backward(model.params, fc, w, &dc);
      // the u_{t+1} slice conditions on data, so only the summary part
      // propagates further
      if (shared)
        dsum[ti] += dc.rightCols(ds);
      else
        dsum2[ti] += dc.rightCols(ds);
    }
  }

  if (with_grad) {
    model.encoder().backward(model.params, ecache, dsum, truncation);
    if (!shared)
      model.backward_encoder().backward(model.params, ecache2, dsum2,
                                        truncation);
  }

  out.total = out.filter_nll + lambda * out.path_nll;
  FLUID_CHECK(std::isfinite(out.total), "joint_loss: non-finite loss");
  return out;
}

/// Standardizes a batch of raw trajectories (all of equal length) into the
/// time-major layout expected by joint_loss_standardized.
template <class S>
void batch_to_time_major(const FluidModel<S>& model,
                         const std::vector<const Trajectory*>& batch,
                         std::vector<MatX<S>>& us, std::vector<MatX<S>>& ys) {
  FLUID_REQUIRE(!batch.empty(), "joint_loss: empty batch");
  const Eigen::Index T = batch.front()->u.rows();
  const Eigen::Index B = static_cast<Eigen::Index>(batch.size());
  for (const Trajectory* tr : batch)
    FLUID_REQUIRE(tr->u.rows() == T && tr->y.rows() == T,
                  "joint_loss: trajectories must share a common length");
  us.assign(static_cast<size_t>(T),
            MatX<S>(B, batch.front()->u.cols()));
  ys.assign(static_cast<size_t>(T),
            MatX<S>(B, batch.front()->y.cols()));
  for (Eigen::Index i = 0; i < B; ++i) {
    MatX<S> su = model.standardize_u(
        batch[static_cast<size_t>(i)]->u.template cast<S>());
    MatX<S> sy = model.standardize_y(
        batch[static_cast<size_t>(i)]->y.template cast<S>());
    for (Eigen::Index t = 0; t < T; ++t) {
      us[static_cast<size_t>(t)].row(i) = su.row(t);
      ys[static_cast<size_t>(t)].row(i) = sy.row(t);
    }
  }
}

template <class S>
JointLoss joint_loss(FluidModel<S>& model,
                     const std::vector<const Trajectory*>& batch,
                     double lambda, bool with_grad = false,
                     int truncation = 0) {
  std::vector<MatX<S>> us, ys;
  batch_to_time_major(model, batch, us, ys);
  return joint_loss_standardized(model, us, ys, lambda, with_grad, truncation);
}

struct TrainConfig {
  int epochs = 200;
  int batch_size = 64;
  double lambda = -1.0;  // < 0 resolves to (T-1)/T at train time
  double lr = 1e-3;
  double lr_min = -1.0;  // >= 0 enables cosine decay from lr down to lr_min
  double grad_clip = 10.0;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // epochs between checkpoints, 0 = final only
  int bptt_truncation = 0;   // 0 = full-sequence backprop
  double val_fraction = 0.1;

  void validate() const {
    FLUID_REQUIRE(epochs > 0 && batch_size > 0, "TrainConfig: bad sizes");
    FLUID_REQUIRE(lr > 0.0, "TrainConfig: lr must be positive");
    FLUID_REQUIRE(lr_min <= lr, "TrainConfig: lr_min exceeds lr");
    FLUID_REQUIRE(grad_clip > 0.0, "TrainConfig: grad_clip must be positive");
    FLUID_REQUIRE(val_fraction >= 0.0 && val_fraction < 1.0,
                  "TrainConfig: val_fraction out of range");
    FLUID_REQUIRE(checkpoint_every >= 0 && bptt_truncation >= 0,
                  "TrainConfig: negative cadence");
  }
};

struct EpochStats {
  int epoch = 0;
  double train_nll = 0.0;
  double val_nll = 0.0;
  double val_filter_nll = 0.0;
  double wall_seconds = 0.0;
};

inline void write_training_log_csv(const std::string& path,
                                   const std::vector<EpochStats>& curve) {
  std::ofstream os(path);
  FLUID_CHECK(os.good(), "write_training_log_csv: cannot open " + path);
  os << "# schema: fluid.trainlog.v1\n";
  os << "epoch,train_nll,val_nll,val_filter_nll,wall_seconds\n";
  os.precision(17);
  for (const auto& e : curve)
    os << e.epoch << ',' << e.train_nll << ',' << e.val_nll << ','
       << e.val_filter_nll << ',' << e.wall_seconds << '\n';
  FLUID_CHECK(os.good(), "write_training_log_csv: write failure on " + path);
}

namespace detail {

template <class S>
JointLoss eval_split(FluidModel<S>& model,
                     const std::vector<const Trajectory*>& split,
                     double lambda, int batch_size) {
  JointLoss acc;
  double n = 0.0;
  for (size_t start = 0; start < split.size();
       start += static_cast<size_t>(batch_size)) {
    const size_t stop =
        std::min(split.size(), start + static_cast<size_t>(batch_size));
    std::vector<const Trajectory*> batch(split.begin() + start,
                                         split.begin() + stop);
    JointLoss l = joint_loss(model, batch, lambda);
    const double w = static_cast<double>(batch.size());
    acc.total += w * l.total;
    acc.filter_nll += w * l.filter_nll;
    acc.path_nll += w * l.path_nll;
    n += w;
  }
  acc.total /= n;
  acc.filter_nll /= n;
  acc.path_nll /= n;
  return acc;
}

}  // namespace detail

template <class S = float>
struct TrainResult {
  FluidModel<S> model;
  std::vector<EpochStats> curve;
  double lambda = 0.0;  // resolved value actually used
};

/// Mini-batch Adam over the joint loss with a 90/10 trajectory split for
/// validation. Deterministic for a fixed seed in single-threaded mode. If
/// out_dir is nonempty, checkpoints and a training-log CSV are written there;
/// a non-finite loss aborts after persisting the last finite state. Passing a
/// checkpoint path as resume_from continues that run (same data and seed)
/// from its stored epoch.
template <class S = float>
TrainResult<S> train(const std::vector<Trajectory>& trajs,
                     FluidModelConfig mcfg, TrainConfig tcfg,
                     const std::string& out_dir = "",
                     const std::string& resume_from = "") {
  tcfg.validate();
  mcfg.validate();
  FLUID_REQUIRE(!trajs.empty(), "train: empty dataset");
  const Eigen::Index T = trajs.front().u.rows();
  FLUID_REQUIRE(T >= 2, "train: need T >= 2");
  const double lambda = tcfg.lambda >= 0.0
                            ? tcfg.lambda
                            : static_cast<double>(T - 1) / static_cast<double>(T);

  TrainResult<S> result;
  result.lambda = lambda;
  int start_epoch = 0;
  if (!resume_from.empty()) {
    nlohmann::json cfg;
    result.model = FluidModel<S>::load(resume_from, &cfg);
    start_epoch = cfg.value("epoch", 0);
    FLUID_REQUIRE(start_epoch < tcfg.epochs,
                  "train: checkpoint already at or past the epoch budget");
  } else {
    Standardization stats = compute_standardization(trajs);
    Rng init_rng(tcfg.seed, 10);
    result.model = FluidModel<S>(mcfg, stats, init_rng);
  }
  FluidModel<S>& model = result.model;

  // split by trajectory, validation taken from a seeded shuffle
  std::vector<size_t> order(trajs.size());
  std::iota(order.begin(), order.end(), size_t{0});
  Rng split_rng(tcfg.seed, 11);
  for (size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[split_rng.next_u64() % i]);
  size_t n_val = static_cast<size_t>(
      static_cast<double>(trajs.size()) * tcfg.val_fraction);
  if (tcfg.val_fraction > 0.0 && n_val == 0 && trajs.size() > 1) n_val = 1;
  std::vector<const Trajectory*> train_split, val_split;
  for (size_t i = 0; i < order.size(); ++i)
    (i < n_val ? val_split : train_split).push_back(&trajs[order[i]]);
  FLUID_REQUIRE(!train_split.empty(), "train: no training trajectories left");
  FLUID_REQUIRE(static_cast<size_t>(tcfg.batch_size) <= train_split.size(),
                "train: batch_size exceeds training-split size");

  const std::string ckpt_last =
      out_dir.empty() ? "" : out_dir + "/checkpoint_last.fluid";
  auto save_ckpt = [&](const std::string& path, int epoch) {
    model.save(path, /*with_optimizer=*/true,
               nlohmann::json{{"epoch", epoch}, {"lambda", lambda}});
  };

  std::vector<size_t> idx(train_split.size());
  for (int epoch = start_epoch + 1; epoch <= tcfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    // one rng stream per epoch so a resumed run shuffles identically
    // epoch-indexed cosine schedule, so a resumed run sees the same rates
    double lr_epoch = tcfg.lr;
    if (tcfg.lr_min >= 0.0 && tcfg.epochs > 1) {
      const double frac =
          static_cast<double>(epoch - 1) / static_cast<double>(tcfg.epochs - 1);
      lr_epoch = tcfg.lr_min + 0.5 * (tcfg.lr - tcfg.lr_min) *
                                   (1.0 + std::cos(std::numbers::pi * frac));
    }
    Rng batch_rng(tcfg.seed + static_cast<std::uint64_t>(epoch), 12);
    std::iota(idx.begin(), idx.end(), size_t{0});
    for (size_t i = idx.size(); i > 1; --i)
      std::swap(idx[i - 1], idx[batch_rng.next_u64() % i]);
    double train_acc = 0.0, train_n = 0.0;
    for (size_t start = 0; start < idx.size();
         start += static_cast<size_t>(tcfg.batch_size)) {
      const size_t stop =
          std::min(idx.size(), start + static_cast<size_t>(tcfg.batch_size));
      std::vector<const Trajectory*> batch;
      for (size_t i = start; i < stop; ++i) batch.push_back(train_split[idx[i]]);
      model.params.zero_grad();
      JointLoss l;
      try {
        l = joint_loss(model, batch, lambda, /*with_grad=*/true,
                       tcfg.bptt_truncation);
      } catch (const std::runtime_error&) {
        if (!ckpt_last.empty()) save_ckpt(out_dir + "/checkpoint_abort.fluid",
                                          epoch - 1);
        throw;
      }
      model.params.clip_grad_norm(tcfg.grad_clip);
      model.params.adam_step(lr_epoch);
      train_acc += l.total * static_cast<double>(batch.size());
      train_n += static_cast<double>(batch.size());
    }
    EpochStats es;
    es.epoch = epoch;
    es.train_nll = train_acc / train_n;
    const auto& vsplit = val_split.empty() ? train_split : val_split;
    JointLoss vl = detail::eval_split(model, vsplit, lambda, tcfg.batch_size);
    es.val_nll = vl.total;
    es.val_filter_nll = vl.filter_nll;
    es.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    result.curve.push_back(es);
    if (!out_dir.empty()) {
      save_ckpt(ckpt_last, epoch);
      if (tcfg.checkpoint_every > 0 && epoch % tcfg.checkpoint_every == 0)
        save_ckpt(out_dir + "/checkpoint_epoch" + std::to_string(epoch) +
                      ".fluid",
                  epoch);
    }
  }
  if (!out_dir.empty()) {
    save_ckpt(out_dir + "/model_final.fluid", tcfg.epochs);
    write_training_log_csv(out_dir + "/training_log.csv", result.curve);
  }
  return result;
}

}  // namespace fluid
