// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <functional>
#include <variant>

#include "affect/au_model.hpp"
#include "affect/data_io.hpp"
#include "affect/ensemble.hpp"
#include "affect/models.hpp"

namespace affect {

// ---- optimizers -------------------------------------------------------------

struct AdamState {
  std::vector<std::vector<double>> m, v;  // aligned with the parameter list
  long step = 0;
};

/// Bias-corrected Adam update in place. Raises NumericError naming the
/// parameter on a non-finite gradient. Parameters without a gradient buffer
/// are treated as zero-gradient (moments still decay).
void adam_step(NamedParams& params, AdamState& state, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8);

struct SgdState {
  std::vector<std::vector<double>> velocity;
};

/// v <- momentum * v + g; p <- p - lr * v.
void sgd_step(NamedParams& params, SgdState& state, double lr, double momentum);

double grad_global_norm(const NamedParams& params);
/// Scales all gradients so the global norm is at most max_norm (no-op when
/// max_norm <= 0 or the norm is already within bounds).
void clip_gradients(NamedParams& params, double max_norm);

// ---- learning-rate schedule -------------------------------------------------

/// eta_min + (eta_max - eta_min) * (1 + cos(pi * t_cur / t_i)) / 2,
/// the within-cycle cosine: eta_max at t_cur=0, eta_min at t_cur=t_i.
double cosine_annealing_lr(double t_cur, double t_i, double eta_max, double eta_min);

/// Resolves `progress` (epochs since start) into the current restart cycle:
/// cycle i has length t0 * t_mult^i. Restart boundaries return eta_max.
double cosine_warm_restart_lr(double progress, double t0, double t_mult, double eta_max,
                              double eta_min);

double scheduled_lr(const TrainConfig& config, long epoch);

// ---- checkpoints ------------------------------------------------------------

// AFCK container, little-endian:
//   magic "AFCK" | u16 version=1
//   | u32 len + config text | u32 len + model-spec text
//   | i64 epochs_done | u64 rng_state | i64 opt_step | f64 best_metric
//   | u32 n_tensors | per tensor: u16 name_len + name | u8 rank | u32 dims | f64 data
struct Checkpoint {
  TrainConfig config;
  ModelSpec model;
  long epoch = 0;  // epochs completed
  std::uint64_t rng_state = 0;
  long opt_step = 0;
  double best_metric = 0.0;
  bool has_best = false;
  NamedParams tensors;  // parameters plus "opt.*" slots

  const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---- models behind one handle ----------------------------------------------

using AnyModel = std::variant<Stage1Model, Stage2Model, AuModel>;

AnyModel build_model(const ModelSpec& spec, Rng& rng);
NamedParams model_params(const AnyModel& model);
/// Model rebuilt from a checkpoint's spec with parameters restored by name.
AnyModel model_from_checkpoint(const Checkpoint& checkpoint);

// ---- training ---------------------------------------------------------------

struct EpochMetrics {
  long epoch = 0;  // 1-based
  double lr = 0.0;
  double train_loss = 0.0;
  double val_ccc_v = 0.0, val_ccc_a = 0.0, val_ccc_va = 0.0;
  double val_f1 = 0.0;
  double train_ccc_va = 0.0;  // filled when eval_train is set
  double train_f1 = 0.0;
  bool has_val = false;
  bool best = false;
};

struct TrainResult {
  std::vector<double> step_losses;  // every optimizer step, in order
  std::vector<EpochMetrics> epochs;
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
  double best_metric = 0.0;
};

struct TrainOptions {
  int fold = -1;  // stage-1: hold out this fold for validation
  std::filesystem::path resume_from;
  bool eval_train = false;  // additionally score the training split each epoch
  std::function<bool(const EpochMetrics&)> on_epoch;  // return false to stop
  bool quiet = true;
};

/// Stage-1 fusion training on windowed features with the three-head combined
/// loss. fold >= 0 trains on the other folds and validates on the held-out
/// fold; fold < 0 trains on the whole train split and validates on `val`.
TrainResult train_stage1(const TrainConfig& config, const Manifest& manifest,
                         const std::filesystem::path& out_dir, const TrainOptions& options = {});

/// Stage-2 stacker training on fold-score records (feature width 2K).
TrainResult train_stage2(const TrainConfig& config, const Manifest& scores_manifest,
                         const std::filesystem::path& out_dir, const TrainOptions& options = {});

/// Action-unit training with focal loss over the four outputs (three heads
/// plus their fused mean).
TrainResult train_au(const TrainConfig& config, const Manifest& manifest,
                     const std::filesystem::path& out_dir, const TrainOptions& options = {});

// ---- inference and evaluation ------------------------------------------------

long prediction_channels(Task task);

/// Per-frame prediction rows for one video: (valence, arousal) for the stage
/// models, 12 AU probabilities for the detector. Short videos run in one
/// pass; long ones run as overlapping windows stitched at frame centers.
/// au_t1_only switches the AU detector to its first-branch-only output.
std::vector<double> predict_rows(const AnyModel& model, const TrainConfig& config,
                                 const VideoRecord& record, bool au_t1_only = false);

struct EvalVideoRow {
  std::string video_id;
  long frames = 0;
  double ccc_v = 0.0, ccc_a = 0.0, ccc_va = 0.0;
  double f1 = 0.0;
};

struct EvalReport {
  Task task = Task::stage1;
  std::string split;
  std::vector<EvalVideoRow> per_video;
  double pooled_ccc_v = 0.0, pooled_ccc_a = 0.0, pooled_ccc_va = 0.0;
  double pooled_f1 = 0.0;
  double pooled_f1_t1_only = 0.0;  // AU only: the first-branch ablation row
  long total_frames = 0;
};

/// Scores every video of a manifest split; VA CCCs pool all frames of all
/// videos before the metric.
EvalReport evaluate(const Checkpoint& checkpoint, const Manifest& manifest,
                    const std::string& split);

// ---- fold-score production ----------------------------------------------------

enum class FoldScoreMode {
  oof,         // train videos: own fold's model only (out-of-fold), replicated K times
  all_models,  // train videos: all K models, in-sample for K-1 of them
};

/// Writes one fold-score AFB1 record per video (features = the 2K score
/// vectors, labels = the ground-truth VA) plus a manifest, under out_dir.
/// Validation/test videos always carry all K models' predictions.
void infer_fold_scores(const Manifest& manifest, const std::vector<Checkpoint>& fold_models,
                       const std::filesystem::path& out_dir,
                       FoldScoreMode mode = FoldScoreMode::oof);

}  // namespace affect
