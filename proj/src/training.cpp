// SPDX-License-Identifier: Apache-2.0
#include "affect/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cctype>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "affect/error.hpp"
#include "affect/grad_check.hpp"
#include "affect/metrics.hpp"

namespace affect {

// ---- optimizers -------------------------------------------------------------

namespace {

const std::vector<double>* grad_or_null(const Tensor& t) {
  return t.has_grad() ? &t.grad() : nullptr;
}

void check_grad_finite(const std::string& name, const std::vector<double>& g) {
  for (double v : g) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite gradient for parameter '" + name + "'");
    }
  }
}

}  // namespace

void adam_step(NamedParams& params, AdamState& state, double lr, double beta1, double beta2,
               double eps) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].second.numel(), 0.0);
      state.v[i].assign(params[i].second.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) {
    throw ContractError("adam_step: optimizer state does not match the parameter list");
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, tensor] = params[i];
    const std::vector<double>* g = grad_or_null(tensor);
    if (g) {
      if (g->size() != state.m[i].size()) {
        throw ContractError("adam_step: gradient shape mismatch for parameter '" + name + "'");
      }
      check_grad_finite(name, *g);
    }
    auto& data = tensor.mutable_data();
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double gj = g ? (*g)[j] : 0.0;
      state.m[i][j] = beta1 * state.m[i][j] + (1.0 - beta1) * gj;
      state.v[i][j] = beta2 * state.v[i][j] + (1.0 - beta2) * gj * gj;
      const double mhat = state.m[i][j] / bc1;
      const double vhat = state.v[i][j] / bc2;
      data[j] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

void sgd_step(NamedParams& params, SgdState& state, double lr, double momentum) {
  if (state.velocity.empty()) {
    state.velocity.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.velocity[i].assign(params[i].second.numel(), 0.0);
    }
  }
  if (state.velocity.size() != params.size()) {
    throw ContractError("sgd_step: optimizer state does not match the parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, tensor] = params[i];
    const std::vector<double>* g = grad_or_null(tensor);
    if (g) check_grad_finite(name, *g);
    auto& data = tensor.mutable_data();
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double gj = g ? (*g)[j] : 0.0;
      state.velocity[i][j] = momentum * state.velocity[i][j] + gj;
      data[j] -= lr * state.velocity[i][j];
    }
  }
}

double grad_global_norm(const NamedParams& params) {
  double sq = 0.0;
  for (const auto& [name, tensor] : params) {
    (void)name;
    if (!tensor.has_grad()) continue;
    for (double g : tensor.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

void clip_gradients(NamedParams& params, double max_norm) {
  if (max_norm <= 0.0) return;
  const double norm = grad_global_norm(params);
  if (norm <= max_norm) return;
  const double factor = max_norm / norm;
  for (auto& [name, tensor] : params) {
    (void)name;
    if (!tensor.has_grad()) continue;
    // Gradient buffers are owned by the parameters; scaling them between
    // backward and the optimizer step is the one sanctioned mutation.
    auto& impl_grad = const_cast<std::vector<double>&>(tensor.grad());
    for (double& g : impl_grad) g *= factor;
  }
}

// ---- schedule ----------------------------------------------------------------

double cosine_annealing_lr(double t_cur, double t_i, double eta_max, double eta_min) {
  if (t_i <= 0.0) throw ContractError("cosine_annealing_lr: t_i must be positive");
  const double ratio = std::clamp(t_cur / t_i, 0.0, 1.0);
  return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + std::cos(std::numbers::pi * ratio));
}

double cosine_warm_restart_lr(double progress, double t0, double t_mult, double eta_max,
                              double eta_min) {
  if (t0 < 1.0) throw ContractError("cosine_warm_restart_lr: t0 must be >= 1");
  if (t_mult < 1.0) throw ContractError("cosine_warm_restart_lr: t_mult must be >= 1");
  if (progress < 0.0) throw ContractError("cosine_warm_restart_lr: negative progress");
  double cycle_len = t0;
  double t_cur = progress;
  while (t_cur >= cycle_len) {
    t_cur -= cycle_len;
    cycle_len *= t_mult;
  }
  return cosine_annealing_lr(t_cur, cycle_len, eta_max, eta_min);
}

double scheduled_lr(const TrainConfig& config, long epoch) {
  if (config.schedule == ScheduleKind::constant) return config.lr;
  return cosine_warm_restart_lr(static_cast<double>(epoch), config.t0, config.t_mult, config.lr,
                                config.eta_min);
}

// ---- checkpoints ---------------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'A', 'F', 'C', 'K'};
constexpr std::uint16_t kCkptVersion = 1;

void put_bytes(std::ofstream& out, const void* p, std::size_t n) {
  out.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void put_block(std::ofstream& out, const std::string& s) {
  const auto len = static_cast<std::uint32_t>(s.size());
  put_bytes(out, &len, 4);
  put_bytes(out, s.data(), s.size());
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path.string() + ": cannot open checkpoint for writing");
  put_bytes(out, kCkptMagic, 4);
  put_bytes(out, &kCkptVersion, 2);
  put_block(out, config_to_text(ckpt.config));
  put_block(out, ckpt.model.to_text());
  const std::int64_t epoch = ckpt.epoch;
  const std::int64_t opt_step = ckpt.opt_step;
  const double best = ckpt.has_best ? ckpt.best_metric : std::nan("");
  put_bytes(out, &epoch, 8);
  put_bytes(out, &ckpt.rng_state, 8);
  put_bytes(out, &opt_step, 8);
  put_bytes(out, &best, 8);
  const auto count = static_cast<std::uint32_t>(ckpt.tensors.size());
  put_bytes(out, &count, 4);
  for (const auto& [name, tensor] : ckpt.tensors) {
    const auto name_len = static_cast<std::uint16_t>(name.size());
    put_bytes(out, &name_len, 2);
    put_bytes(out, name.data(), name.size());
    const auto rank = static_cast<std::uint8_t>(tensor.rank());
    put_bytes(out, &rank, 1);
    for (long d : tensor.shape()) {
      const auto ext = static_cast<std::uint32_t>(d);
      put_bytes(out, &ext, 4);
    }
    put_bytes(out, tensor.data().data(), tensor.data().size() * sizeof(double));
  }
  if (!out) throw IoError(path.string() + ": checkpoint write failed");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string() + ": cannot open checkpoint");
  auto fail = [&path](const std::string& why) {
    throw ParseError(path.string() + ": " + why);
  };
  auto read_bytes = [&](void* p, std::size_t n, const char* what) {
    in.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) {
      fail(std::string("truncated checkpoint while reading ") + what);
    }
  };
  char magic[4];
  read_bytes(magic, 4, "magic");
  if (std::memcmp(magic, kCkptMagic, 4) != 0) fail("bad magic, not an AFCK checkpoint");
  std::uint16_t version = 0;
  read_bytes(&version, 2, "version");
  if (version != kCkptVersion) fail("unsupported checkpoint version " + std::to_string(version));

  auto read_block = [&](const char* what) {
    std::uint32_t len = 0;
    read_bytes(&len, 4, what);
    std::string s(len, '\0');
    if (len) read_bytes(s.data(), len, what);
    return s;
  };
  Checkpoint ckpt;
  const std::string config_text = read_block("config block");
  const std::string model_text = read_block("model block");
  ckpt.config = config_from_text(config_text, path.string() + "#config");
  ckpt.model = ModelSpec::from_text(model_text, path.string() + "#model");
  std::int64_t epoch = 0, opt_step = 0;
  double best = 0.0;
  read_bytes(&epoch, 8, "epoch");
  read_bytes(&ckpt.rng_state, 8, "rng state");
  read_bytes(&opt_step, 8, "optimizer step");
  read_bytes(&best, 8, "best metric");
  ckpt.epoch = epoch;
  ckpt.opt_step = opt_step;
  ckpt.has_best = !std::isnan(best);
  ckpt.best_metric = ckpt.has_best ? best : 0.0;
  std::uint32_t count = 0;
  read_bytes(&count, 4, "tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint16_t name_len = 0;
    read_bytes(&name_len, 2, "tensor name length");
    std::string name(name_len, '\0');
    read_bytes(name.data(), name_len, "tensor name");
    std::uint8_t rank = 0;
    read_bytes(&rank, 1, "tensor rank");
    Shape shape(rank);
    for (auto& d : shape) {
      std::uint32_t ext = 0;
      read_bytes(&ext, 4, "tensor extent");
      d = ext;
    }
    std::vector<double> data(shape_numel(shape));
    read_bytes(data.data(), data.size() * sizeof(double), "tensor data");
    ckpt.tensors.emplace_back(std::move(name), Tensor::from_data(shape, std::move(data)));
  }
  return ckpt;
}

// ---- model plumbing --------------------------------------------------------------

AnyModel build_model(const ModelSpec& spec, Rng& rng) {
  if (spec.kind == "stage1") return Stage1Model::build(spec, rng);
  if (spec.kind == "stage2") return Stage2Model::build(spec, rng);
  if (spec.kind == "au") return AuModel::build(spec, rng);
  throw ConfigError("build_model: unknown model kind '" + spec.kind + "'");
}

NamedParams model_params(const AnyModel& model) {
  return std::visit([](const auto& m) { return m.named_params(); }, model);
}

AnyModel model_from_checkpoint(const Checkpoint& ckpt) {
  Rng rng(0);
  AnyModel model = build_model(ckpt.model, rng);
  NamedParams params = model_params(model);
  for (auto& [name, tensor] : params) {
    const Tensor* stored = ckpt.find(name);
    if (!stored) throw CheckpointError("checkpoint is missing parameter '" + name + "'");
    if (stored->shape() != tensor.shape()) {
      throw CheckpointError("checkpoint parameter '" + name + "' has shape " +
                            stored->shape_str() + ", model wants " + tensor.shape_str());
    }
    tensor.mutable_data() = stored->data();
  }
  return model;
}

// ---- shared training machinery -----------------------------------------------------

namespace {

std::uint64_t epoch_seed(std::uint64_t seed, long epoch) {
  return seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(epoch + 1));
}

struct LoadedVideo {
  VideoRecord record;
  std::vector<Window> windows;
};

std::vector<LoadedVideo> load_split(const Manifest& manifest,
                                    const std::vector<ManifestEntry>& entries, LabelKind want,
                                    long window, long stride, const char* who) {
  std::vector<LoadedVideo> out;
  for (const auto& e : entries) {
    VideoRecord rec = read_video_file(manifest.resolve(e));
    if (rec.label_kind != want) {
      throw ConfigError(std::string(who) + ": video '" + e.video_id +
                        "' lacks the required labels");
    }
    LoadedVideo lv;
    lv.windows = window_sequences(rec, window, stride);
    lv.record = std::move(rec);
    out.push_back(std::move(lv));
  }
  return out;
}

struct OptimizerState {
  AdamState adam;
  SgdState sgd;
};

void optimizer_step(const TrainConfig& cfg, NamedParams& params, OptimizerState& state,
                    double lr) {
  if (cfg.optimizer == OptimizerKind::adam) {
    adam_step(params, state.adam, lr);
  } else {
    sgd_step(params, state.sgd, lr, cfg.momentum);
  }
}

void register_optimizer_tensors(const TrainConfig& cfg, const NamedParams& params,
                                const OptimizerState& state, NamedParams& out) {
  if (cfg.optimizer == OptimizerKind::adam) {
    if (state.adam.m.empty()) return;
    for (std::size_t i = 0; i < params.size(); ++i) {
      out.emplace_back("opt.m." + params[i].first,
                       Tensor::from_data(params[i].second.shape(), state.adam.m[i]));
      out.emplace_back("opt.v." + params[i].first,
                       Tensor::from_data(params[i].second.shape(), state.adam.v[i]));
    }
  } else {
    if (state.sgd.velocity.empty()) return;
    for (std::size_t i = 0; i < params.size(); ++i) {
      out.emplace_back("opt.vel." + params[i].first,
                       Tensor::from_data(params[i].second.shape(), state.sgd.velocity[i]));
    }
  }
}

void restore_optimizer_tensors(const TrainConfig& cfg, const Checkpoint& ckpt,
                               const NamedParams& params, OptimizerState& state) {
  auto fetch = [&ckpt](const std::string& name, const Tensor& like) {
    const Tensor* t = ckpt.find(name);
    if (!t) return std::vector<double>();
    if (t->shape() != like.shape()) {
      throw CheckpointError("optimizer slot '" + name + "' has the wrong shape");
    }
    return t->data();
  };
  if (cfg.optimizer == OptimizerKind::adam) {
    bool any = false;
    state.adam.m.resize(params.size());
    state.adam.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto m = fetch("opt.m." + params[i].first, params[i].second);
      auto v = fetch("opt.v." + params[i].first, params[i].second);
      if (!m.empty() && !v.empty()) {
        state.adam.m[i] = std::move(m);
        state.adam.v[i] = std::move(v);
        any = true;
      } else {
        state.adam.m[i].assign(params[i].second.numel(), 0.0);
        state.adam.v[i].assign(params[i].second.numel(), 0.0);
      }
    }
    if (!any) {
      state.adam.m.clear();
      state.adam.v.clear();
    }
    state.adam.step = ckpt.opt_step;
  } else {
    bool any = false;
    state.sgd.velocity.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto v = fetch("opt.vel." + params[i].first, params[i].second);
      if (!v.empty()) {
        state.sgd.velocity[i] = std::move(v);
        any = true;
      } else {
        state.sgd.velocity[i].assign(params[i].second.numel(), 0.0);
      }
    }
    if (!any) state.sgd.velocity.clear();
  }
}

constexpr long kFullPassLimit = 512;  // frames; longer videos use stitched windows

std::vector<double> model_rows_for_batch(const AnyModel& model, const SequenceBatch& batch,
                                         bool au_t1_only) {
  if (std::holds_alternative<Stage1Model>(model)) {
    return std::get<Stage1Model>(model).forward(batch.features).fused.data();
  }
  if (std::holds_alternative<Stage2Model>(model)) {
    return std::get<Stage2Model>(model).forward(batch.features).data();
  }
  const AuModel& au = std::get<AuModel>(model);
  return au_t1_only ? au.ablate_t1(batch.features).data()
                    : au.forward(batch.features).probs.data();
}

}  // namespace

long prediction_channels(Task task) { return task == Task::au ? kAuChannels : 2; }

std::vector<double> predict_rows(const AnyModel& model, const TrainConfig& config,
                                 const VideoRecord& record, bool au_t1_only) {
  const long channels =
      std::holds_alternative<AuModel>(model) ? kAuChannels : 2;
  if (record.n_frames <= kFullPassLimit) {
    // One pass over the whole video.
    std::vector<Window> ws = window_sequences(record, record.n_frames, record.n_frames);
    SequenceBatch batch = make_batch({&ws[0]});
    return model_rows_for_batch(model, batch, au_t1_only);
  }
  // Overlapping windows, stitched at frame centers.
  const long stride = std::max(1L, config.window / 2);
  std::vector<Window> windows = window_sequences(record, config.window, stride);
  std::vector<std::vector<double>> rows;
  rows.reserve(windows.size());
  for (const auto& w : windows) {
    SequenceBatch batch = make_batch({&w});
    rows.push_back(model_rows_for_batch(model, batch, au_t1_only));
  }
  return stitch_windows(windows, rows, record.n_frames, channels);
}

// ---- the shared epoch loop ---------------------------------------------------------

namespace {

struct TaskHooks {
  // Builds the training loss for one batch (graph already under a tape).
  std::function<Tensor(const SequenceBatch&)> loss;
  // Scores a list of videos; fills the metric fields and returns the scalar
  // used for best-checkpoint selection (higher is better).
  std::function<double(const std::vector<LoadedVideo>&, EpochMetrics&, bool)> score;
};

std::string run_tag(const TrainConfig& cfg, int fold) {
  std::string tag = task_name(cfg.task);
  if (cfg.task == Task::stage1 && fold >= 0) tag += "_fold" + std::to_string(fold);
  return tag;
}

TrainResult run_training(const TrainConfig& cfg, const std::vector<LoadedVideo>& train_videos,
                         const std::vector<LoadedVideo>& val_videos, AnyModel& model,
                         const TaskHooks& hooks, const std::filesystem::path& out_dir,
                         const TrainOptions& options) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  const std::string tag = run_tag(cfg, options.fold);

  NamedParams params = model_params(model);
  OptimizerState opt;
  Rng run_rng(cfg.seed);
  long start_epoch = 0;
  double best_metric = 0.0;
  bool has_best = false;

  if (!options.resume_from.empty()) {
    Checkpoint ckpt = load_checkpoint(options.resume_from);
    if (ckpt.config.task != cfg.task) {
      throw CheckpointError(options.resume_from.string() + ": checkpoint task '" +
                            task_name(ckpt.config.task) + "' does not match '" +
                            task_name(cfg.task) + "'");
    }
    model = model_from_checkpoint(ckpt);
    params = model_params(model);
    restore_optimizer_tensors(cfg, ckpt, params, opt);
    run_rng.set_state(ckpt.rng_state);
    start_epoch = ckpt.epoch;
    best_metric = ckpt.best_metric;
    has_best = ckpt.has_best;
  }

  // Flat window index across videos; order is manifest order, fixed.
  std::vector<std::pair<long, long>> all_windows;  // (video, window)
  for (std::size_t v = 0; v < train_videos.size(); ++v) {
    for (std::size_t w = 0; w < train_videos[v].windows.size(); ++w) {
      all_windows.emplace_back(static_cast<long>(v), static_cast<long>(w));
    }
  }
  if (all_windows.empty()) throw ConfigError("training: no training windows");

  const std::filesystem::path best_path = out_dir / (tag + "_best.afck");
  const std::filesystem::path last_path = out_dir / (tag + "_last.afck");
  const std::filesystem::path log_path = out_dir / (tag + "_log.jsonl");
  std::ofstream log(log_path, start_epoch > 0 ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError(log_path.string() + ": cannot open training log");

  auto write_checkpoint = [&](const std::filesystem::path& path, long epochs_done) {
    Checkpoint ckpt;
    ckpt.config = cfg;
    ckpt.model = std::visit([](const auto& m) { return m.spec; }, model);
    ckpt.epoch = epochs_done;
    ckpt.rng_state = run_rng.state();
    ckpt.opt_step = opt.adam.step;
    ckpt.best_metric = best_metric;
    ckpt.has_best = has_best;
    for (const auto& [name, tensor] : params) ckpt.tensors.emplace_back(name, tensor.clone());
    register_optimizer_tensors(cfg, params, opt, ckpt.tensors);
    save_checkpoint(path, ckpt);
  };

  TrainResult result;
  result.best_checkpoint = best_path;
  result.last_checkpoint = last_path;

  for (long epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const auto wall_start = std::chrono::steady_clock::now();
    const double lr = scheduled_lr(cfg, epoch);

    std::vector<std::pair<long, long>> order = all_windows;
    Rng shuffle_rng(epoch_seed(cfg.seed, epoch));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    long steps = 0;
    for (std::size_t pos = 0; pos < order.size(); pos += cfg.batch) {
      std::vector<const Window*> group;
      for (std::size_t i = pos; i < std::min(order.size(), pos + cfg.batch); ++i) {
        group.push_back(&train_videos[order[i].first].windows[order[i].second]);
      }
      SequenceBatch batch = make_batch(group);
      double loss_value = 0.0;
      {
        Tape tape;
        Tensor loss = hooks.loss(batch);
        loss_value = loss.item();
        tape.backward(loss);
      }
      clip_gradients(params, cfg.clip_norm);
      optimizer_step(cfg, params, opt, lr);
      for (auto& [name, tensor] : params) {
        (void)name;
        tensor.zero_grad();
      }
      loss_sum += loss_value;
      ++steps;
      result.step_losses.push_back(loss_value);
    }

    EpochMetrics em;
    em.epoch = epoch + 1;
    em.lr = lr;
    em.train_loss = loss_sum / static_cast<double>(steps);
    double metric = -em.train_loss;
    if (!val_videos.empty()) {
      em.has_val = true;
      metric = hooks.score(val_videos, em, /*train_side=*/false);
    }
    if (options.eval_train) hooks.score(train_videos, em, /*train_side=*/true);
    if (!has_best || metric > best_metric) {
      has_best = true;
      best_metric = metric;
      em.best = true;
      write_checkpoint(best_path, epoch + 1);
    }
    write_checkpoint(last_path, epoch + 1);

    const double wall_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
    nlohmann::json j{{"epoch", em.epoch},
                     {"lr", em.lr},
                     {"train_loss", em.train_loss},
                     {"best", em.best},
                     {"wall_s", wall_s}};
    if (em.has_val) {
      if (cfg.task == Task::au) {
        j["val_f1"] = em.val_f1;
      } else {
        j["val_ccc_v"] = em.val_ccc_v;
        j["val_ccc_a"] = em.val_ccc_a;
        j["val_ccc_va"] = em.val_ccc_va;
      }
    }
    if (options.eval_train) {
      if (cfg.task == Task::au) {
        j["train_f1"] = em.train_f1;
      } else {
        j["train_ccc_va"] = em.train_ccc_va;
      }
    }
    log << j.dump() << "\n";
    log.flush();
    if (!options.quiet) {
      std::cerr << tag << " epoch " << em.epoch << " loss " << em.train_loss << "\n";
    }

    result.epochs.push_back(em);
    if (options.on_epoch && !options.on_epoch(em)) break;
  }

  if (!has_best) write_checkpoint(best_path, start_epoch);
  if (!std::filesystem::exists(last_path)) write_checkpoint(last_path, start_epoch);
  result.best_metric = best_metric;
  return result;
}

// Scores VA predictions pooled over all frames of all videos.
double score_va(const AnyModel& model, const TrainConfig& cfg,
                const std::vector<LoadedVideo>& videos, EpochMetrics& em, bool train_side) {
  std::vector<double> pv, pa, lv, la;
  for (const auto& video : videos) {
    std::vector<double> rows = predict_rows(model, cfg, video.record);
    for (long f = 0; f < video.record.n_frames; ++f) {
      pv.push_back(rows[f * 2 + 0]);
      pa.push_back(rows[f * 2 + 1]);
      lv.push_back(video.record.va[f * 2 + 0]);
      la.push_back(video.record.va[f * 2 + 1]);
    }
  }
  const CccResult r = ccc_va(pv, pa, lv, la);
  if (train_side) {
    em.train_ccc_va = r.combined;
  } else {
    em.val_ccc_v = r.ccc_v;
    em.val_ccc_a = r.ccc_a;
    em.val_ccc_va = r.combined;
  }
  return r.combined;
}

double score_au(const AnyModel& model, const TrainConfig& cfg,
                const std::vector<LoadedVideo>& videos, EpochMetrics& em, bool train_side) {
  std::vector<std::uint8_t> pred, truth;
  for (const auto& video : videos) {
    std::vector<double> rows = predict_rows(model, cfg, video.record);
    std::vector<std::uint8_t> bits = au_predict(rows, cfg.au_threshold);
    pred.insert(pred.end(), bits.begin(), bits.end());
    truth.insert(truth.end(), video.record.au.begin(), video.record.au.end());
  }
  const double f1 = cfg.f1_average == "micro" ? f1_micro(pred, truth, kAuChannels)
                                              : f1_macro(pred, truth, kAuChannels);
  if (train_side) {
    em.train_f1 = f1;
  } else {
    em.val_f1 = f1;
  }
  return f1;
}

}  // namespace

// ---- the three training entry points -------------------------------------------

TrainResult train_stage1(const TrainConfig& cfg, const Manifest& manifest,
                         const std::filesystem::path& out_dir, const TrainOptions& options) {
  if (cfg.task != Task::stage1) throw ConfigError("train_stage1: config task is not stage1");
  cfg.validate();
  const auto train_entries = manifest.with_split("train");
  if (train_entries.empty()) throw ConfigError("train_stage1: manifest has no train videos");

  std::vector<ManifestEntry> fit, held;
  if (options.fold >= 0) {
    for (const auto& e : train_entries) {
      if (e.fold < 0) {
        throw ConfigError("train_stage1: video '" + e.video_id +
                          "' has no fold assignment; run the split step first");
      }
      (e.fold == options.fold ? held : fit).push_back(e);
    }
    if (fit.empty() || held.empty()) {
      throw ConfigError("train_stage1: fold " + std::to_string(options.fold) +
                        " leaves an empty train or validation set");
    }
  } else {
    fit = train_entries;
    held = manifest.with_split("val");
  }

  const long stride = cfg.effective_stride();
  auto train_videos = load_split(manifest, fit, LabelKind::va, cfg.window, stride, "train_stage1");
  auto val_videos = load_split(manifest, held, LabelKind::va, cfg.window, stride, "train_stage1");

  const long feat_dim = train_videos[0].record.feat_dim;
  Rng rng(cfg.seed);
  AnyModel model = build_model(make_model_spec(Task::stage1, cfg, feat_dim), rng);

  const Stage1LossWeights weights{cfg.lambda_fused, cfg.lambda_gru, cfg.lambda_trf};
  TaskHooks hooks;
  hooks.loss = [&model, weights](const SequenceBatch& batch) {
    const auto& m = std::get<Stage1Model>(model);
    Stage1Model::Heads heads = m.forward(batch.features);
    Tensor fused = select_frames(heads.fused, batch.valid_positions);
    Tensor gru_h = select_frames(heads.gru_head, batch.valid_positions);
    Tensor trf_h = select_frames(heads.trf_head, batch.valid_positions);
    Tensor labels = select_frames(batch.va_labels, batch.valid_positions);
    return stage1_combined_loss(fused, gru_h, trf_h, labels, weights);
  };
  hooks.score = [&model, &cfg](const std::vector<LoadedVideo>& videos, EpochMetrics& em,
                               bool train_side) {
    return score_va(model, cfg, videos, em, train_side);
  };
  return run_training(cfg, train_videos, val_videos, model, hooks, out_dir, options);
}

TrainResult train_stage2(const TrainConfig& cfg, const Manifest& scores_manifest,
                         const std::filesystem::path& out_dir, const TrainOptions& options) {
  if (cfg.task != Task::stage2) throw ConfigError("train_stage2: config task is not stage2");
  cfg.validate();
  const auto train_entries = scores_manifest.with_split("train");
  if (train_entries.empty()) throw ConfigError("train_stage2: manifest has no train videos");
  const auto val_entries = scores_manifest.with_split("val");

  const long stride = cfg.effective_stride();
  auto train_videos =
      load_split(scores_manifest, train_entries, LabelKind::va, cfg.window, stride, "train_stage2");
  auto val_videos =
      load_split(scores_manifest, val_entries, LabelKind::va, cfg.window, stride, "train_stage2");

  const long feat_dim = train_videos[0].record.feat_dim;
  if (feat_dim != 2 * cfg.fold_count) {
    throw ConfigError("train_stage2: fold-score width " + std::to_string(feat_dim) +
                      " != 2K = " + std::to_string(2 * cfg.fold_count));
  }
  Rng rng(cfg.seed);
  AnyModel model = build_model(make_model_spec(Task::stage2, cfg, feat_dim), rng);

  TaskHooks hooks;
  hooks.loss = [&model](const SequenceBatch& batch) {
    const auto& m = std::get<Stage2Model>(model);
    Tensor out = select_frames(m.forward(batch.features), batch.valid_positions);
    Tensor labels = select_frames(batch.va_labels, batch.valid_positions);
    return ccc_loss(slice_last(out, 0, 1), slice_last(out, 1, 1), slice_last(labels, 0, 1),
                    slice_last(labels, 1, 1));
  };
  hooks.score = [&model, &cfg](const std::vector<LoadedVideo>& videos, EpochMetrics& em,
                               bool train_side) {
    return score_va(model, cfg, videos, em, train_side);
  };
  return run_training(cfg, train_videos, val_videos, model, hooks, out_dir, options);
}

TrainResult train_au(const TrainConfig& cfg, const Manifest& manifest,
                     const std::filesystem::path& out_dir, const TrainOptions& options) {
  if (cfg.task != Task::au) throw ConfigError("train_au: config task is not au");
  cfg.validate();
  const auto train_entries = manifest.with_split("train");
  if (train_entries.empty()) throw ConfigError("train_au: manifest has no train videos");
  const auto val_entries = manifest.with_split("val");

  const long stride = cfg.effective_stride();
  auto train_videos =
      load_split(manifest, train_entries, LabelKind::au12, cfg.window, stride, "train_au");
  auto val_videos = load_split(manifest, val_entries, LabelKind::au12, cfg.window, stride, "train_au");

  const long feat_dim = train_videos[0].record.feat_dim;
  Rng rng(cfg.seed);
  AnyModel model = build_model(make_model_spec(Task::au, cfg, feat_dim), rng);

  TaskHooks hooks;
  hooks.loss = [&model, &cfg](const SequenceBatch& batch) {
    const auto& m = std::get<AuModel>(model);
    AuModel::Out out = m.forward(batch.features);
    Tensor target = select_frames(batch.au_labels, batch.valid_positions);
    Tensor l1 = focal_loss(select_frames(out.probs_t1, batch.valid_positions), target,
                           cfg.focal_gamma, cfg.focal_alpha);
    Tensor l2 = focal_loss(select_frames(out.probs_t2, batch.valid_positions), target,
                           cfg.focal_gamma, cfg.focal_alpha);
    Tensor lj = focal_loss(select_frames(out.probs_joint, batch.valid_positions), target,
                           cfg.focal_gamma, cfg.focal_alpha);
    Tensor lf = focal_loss(select_frames(out.probs, batch.valid_positions), target,
                           cfg.focal_gamma, cfg.focal_alpha);
    return scale(l1 + l2 + lj + lf, 0.25);
  };
  hooks.score = [&model, &cfg](const std::vector<LoadedVideo>& videos, EpochMetrics& em,
                               bool train_side) {
    return score_au(model, cfg, videos, em, train_side);
  };
  return run_training(cfg, train_videos, val_videos, model, hooks, out_dir, options);
}

// ---- evaluation ------------------------------------------------------------------

EvalReport evaluate(const Checkpoint& ckpt, const Manifest& manifest, const std::string& split) {
  AnyModel model = model_from_checkpoint(ckpt);
  const Task task = ckpt.config.task;
  const LabelKind want = task == Task::au ? LabelKind::au12 : LabelKind::va;

  EvalReport report;
  report.task = task;
  report.split = split;
  const auto entries = manifest.with_split(split);
  if (entries.empty()) throw ConfigError("evaluate: split '" + split + "' has no videos");

  std::vector<double> pv, pa, lv, la;
  std::vector<std::uint8_t> pred_bits, true_bits, t1_bits;
  for (const auto& e : entries) {
    VideoRecord rec = read_video_file(manifest.resolve(e));
    if (rec.label_kind != want) {
      throw ConfigError("evaluate: video '" + e.video_id + "' labels do not match task " +
                        task_name(task));
    }
    std::vector<double> rows = predict_rows(model, ckpt.config, rec);
    EvalVideoRow row;
    row.video_id = e.video_id;
    row.frames = rec.n_frames;
    if (task == Task::au) {
      std::vector<std::uint8_t> bits = au_predict(rows, ckpt.config.au_threshold);
      row.f1 = ckpt.config.f1_average == "micro" ? f1_micro(bits, rec.au, kAuChannels)
                                                 : f1_macro(bits, rec.au, kAuChannels);
      pred_bits.insert(pred_bits.end(), bits.begin(), bits.end());
      true_bits.insert(true_bits.end(), rec.au.begin(), rec.au.end());
      std::vector<std::uint8_t> ablated = au_predict(
          predict_rows(model, ckpt.config, rec, /*au_t1_only=*/true), ckpt.config.au_threshold);
      t1_bits.insert(t1_bits.end(), ablated.begin(), ablated.end());
    } else {
      std::vector<double> vpv, vpa, vlv, vla;
      for (long f = 0; f < rec.n_frames; ++f) {
        vpv.push_back(rows[f * 2 + 0]);
        vpa.push_back(rows[f * 2 + 1]);
        vlv.push_back(rec.va[f * 2 + 0]);
        vla.push_back(rec.va[f * 2 + 1]);
      }
      const CccResult r = ccc_va(vpv, vpa, vlv, vla);
      row.ccc_v = r.ccc_v;
      row.ccc_a = r.ccc_a;
      row.ccc_va = r.combined;
      pv.insert(pv.end(), vpv.begin(), vpv.end());
      pa.insert(pa.end(), vpa.begin(), vpa.end());
      lv.insert(lv.end(), vlv.begin(), vlv.end());
      la.insert(la.end(), vla.begin(), vla.end());
    }
    report.total_frames += rec.n_frames;
    report.per_video.push_back(row);
  }
  if (task == Task::au) {
    report.pooled_f1 = ckpt.config.f1_average == "micro"
                           ? f1_micro(pred_bits, true_bits, kAuChannels)
                           : f1_macro(pred_bits, true_bits, kAuChannels);
    report.pooled_f1_t1_only = ckpt.config.f1_average == "micro"
                                   ? f1_micro(t1_bits, true_bits, kAuChannels)
                                   : f1_macro(t1_bits, true_bits, kAuChannels);
  } else {
    const CccResult r = ccc_va(pv, pa, lv, la);
    report.pooled_ccc_v = r.ccc_v;
    report.pooled_ccc_a = r.ccc_a;
    report.pooled_ccc_va = r.combined;
  }
  return report;
}

// ---- fold-score production ---------------------------------------------------------

namespace {

std::string filename_safe(const std::string& id) {
  std::string out = id;
  for (char& c : out) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_' && c != '.') c = '_';
  }
  return out;
}

}  // namespace

void infer_fold_scores(const Manifest& manifest, const std::vector<Checkpoint>& fold_models,
                       const std::filesystem::path& out_dir, FoldScoreMode mode) {
  if (fold_models.empty()) throw ContractError("infer_fold_scores: no fold models");
  const int k = static_cast<int>(fold_models.size());
  std::vector<AnyModel> models;
  models.reserve(fold_models.size());
  for (const auto& ckpt : fold_models) {
    if (ckpt.config.task != Task::stage1) {
      throw CheckpointError("infer_fold_scores: all checkpoints must be stage1 models");
    }
    models.push_back(model_from_checkpoint(ckpt));
  }
  std::filesystem::create_directories(out_dir);

  Manifest out_manifest;
  out_manifest.base_dir = out_dir;
  for (const auto& e : manifest.entries) {
    VideoRecord rec = read_video_file(manifest.resolve(e));
    if (rec.label_kind != LabelKind::va) {
      throw ConfigError("infer_fold_scores: video '" + e.video_id + "' lacks VA labels");
    }
    std::vector<std::vector<std::array<double, 2>>> per_fold(k);
    const bool oof_only = mode == FoldScoreMode::oof && e.split == "train";
    if (oof_only) {
      if (e.fold < 0 || e.fold >= k) {
        throw ConfigError("infer_fold_scores: train video '" + e.video_id +
                          "' has no usable fold assignment");
      }
      std::vector<double> rows = predict_rows(models[e.fold], fold_models[e.fold].config, rec);
      std::vector<std::array<double, 2>> stream(rec.n_frames);
      for (long f = 0; f < rec.n_frames; ++f) stream[f] = {rows[f * 2], rows[f * 2 + 1]};
      // The out-of-fold stream is the only unbiased one; replicate it so the
      // fold-score layout keeps its 2K width.
      for (int fold = 0; fold < k; ++fold) per_fold[fold] = stream;
    } else {
      for (int fold = 0; fold < k; ++fold) {
        std::vector<double> rows = predict_rows(models[fold], fold_models[fold].config, rec);
        per_fold[fold].resize(rec.n_frames);
        for (long f = 0; f < rec.n_frames; ++f) {
          per_fold[fold][f] = {rows[f * 2], rows[f * 2 + 1]};
        }
      }
    }
    FoldScoreSequence scores = build_fold_scores(e.video_id, per_fold);

    VideoRecord out_rec;
    out_rec.video_id = e.video_id;
    out_rec.n_frames = rec.n_frames;
    out_rec.feat_dim = scores.width();
    out_rec.label_kind = LabelKind::va;
    out_rec.va = rec.va;
    out_rec.features.resize(scores.values.size());
    for (std::size_t i = 0; i < scores.values.size(); ++i) {
      out_rec.features[i] = static_cast<float>(scores.values[i]);
    }
    const std::string filename = filename_safe(e.video_id) + ".scores.afb1";
    write_video_file(out_dir / filename, out_rec);
    out_manifest.entries.push_back({e.video_id, filename, e.split, e.fold});
  }
  write_manifest(out_dir / "manifest.tsv", out_manifest);
}

}  // namespace affect
