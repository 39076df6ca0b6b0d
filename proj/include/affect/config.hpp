// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace affect {

/// Ordered key/value pairs parsed from flat `key = value` text. '#' starts a
/// comment; blank lines are skipped.
using KvPairs = std::vector<std::pair<std::string, std::string>>;

KvPairs parse_kv_text(const std::string& text, const std::string& origin);

enum class Task { stage1, stage2, au };
enum class OptimizerKind { adam, sgd };
enum class ScheduleKind { constant, cosine_warm_restarts };

std::string task_name(Task t);
Task task_from_name(const std::string& name);

/**
 * Every knob of a training run. The whole struct is serialized into each
 * checkpoint, so a run is reproducible from its artifact alone.
 */
struct TrainConfig {
  Task task = Task::stage1;

  long epochs = 25;
  double lr = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  double momentum = 0.9;
  ScheduleKind schedule = ScheduleKind::constant;
  double t0 = 5.0;
  double t_mult = 1.0;
  double eta_min = 1e-5;
  long batch = 16;
  long window = 64;
  long stride = 0;  // 0 -> window (non-overlapping)
  std::uint64_t seed = 7;
  double lambda_fused = 1.0;
  double lambda_gru = 1.0;
  double lambda_trf = 1.0;
  long fold_count = 5;
  double clip_norm = 5.0;
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
  double au_threshold = 0.5;
  std::string f1_average = "macro";  // or "micro"

  // model topology
  long gru_hidden = 256;
  long gru_layers = 2;  // stage2 task defaults to 4
  long trf_blocks = 1;
  long trf_heads = 4;
  long trf_ff = 0;  // 0 -> 4 * model dim
  long attn_window = 5;
  long attn_dim = 0;  // 0 -> model dim
  long au_blocks = 2;
  long au_heads = 4;
  long au_expand = 0;  // 0 -> 2 * feature dim

  long effective_stride() const { return stride > 0 ? stride : window; }
  void validate() const;  // throws ConfigError
};

/// Task-specific defaults (stage-2 runs a 4-layer recurrence, AU uses
/// SGD + cosine warm restarts).
TrainConfig default_config(Task task = Task::stage1);

/// Applies one key; unknown keys and malformed values raise ConfigError that
/// names the key and the expected type.
void apply_config_kv(TrainConfig& config, const std::string& key, const std::string& value);

TrainConfig config_from_text(const std::string& text, const std::string& origin);
/// Flat `key = value` file; an empty file yields all defaults.
TrainConfig load_config(const std::filesystem::path& path);

/// Full sorted key=value rendering; also the checkpoint provenance block.
std::string config_to_text(const TrainConfig& config);

}  // namespace affect
