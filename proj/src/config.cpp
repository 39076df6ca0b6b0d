// SPDX-License-Identifier: Apache-2.0
#include "affect/config.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "affect/error.hpp"

namespace affect {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

long parse_long(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    long v = std::stol(value, &used);
    if (used != value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (...) {
    throw ConfigError("config key '" + key + "' expects an integer, got '" + value + "'");
  }
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (...) {
    throw ConfigError("config key '" + key + "' expects a number, got '" + value + "'");
  }
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    unsigned long long v = std::stoull(value, &used);
    if (used != value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (...) {
    throw ConfigError("config key '" + key + "' expects a non-negative integer, got '" + value +
                      "'");
  }
}

}  // namespace

KvPairs parse_kv_text(const std::string& text, const std::string& origin) {
  KvPairs pairs;
  std::istringstream in(text);
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(line_no) +
                        ": expected 'key = value', got '" + line + "'");
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty key");
    }
    pairs.emplace_back(std::move(key), std::move(value));
  }
  return pairs;
}

std::string task_name(Task t) {
  switch (t) {
    case Task::stage1: return "stage1";
    case Task::stage2: return "stage2";
    case Task::au: return "au";
  }
  return "stage1";
}

Task task_from_name(const std::string& name) {
  if (name == "stage1") return Task::stage1;
  if (name == "stage2") return Task::stage2;
  if (name == "au") return Task::au;
  throw ConfigError("unknown task '" + name + "' (valid: stage1, stage2, au)");
}

TrainConfig default_config(Task task) {
  TrainConfig c;
  c.task = task;
  if (task == Task::stage2) {
    c.gru_layers = 4;
  } else if (task == Task::au) {
    c.epochs = 20;
    c.optimizer = OptimizerKind::sgd;
    c.lr = 0.01;
    c.schedule = ScheduleKind::cosine_warm_restarts;
  }
  return c;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1, got " + std::to_string(epochs));
  if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
  if (t0 < 1.0) throw ConfigError("t0 must be >= 1");
  if (t_mult < 1.0) throw ConfigError("t_mult must be >= 1");
  if (eta_min < 0.0) throw ConfigError("eta_min must be >= 0");
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (window < 1) throw ConfigError("window must be >= 1");
  if (stride < 0 || stride > window) throw ConfigError("stride must lie in [0, window]");
  if (fold_count < 2) throw ConfigError("k must be >= 2");
  if (clip_norm < 0.0) throw ConfigError("clip_norm must be >= 0 (0 disables clipping)");
  if (lambda_fused < 0.0 || lambda_gru < 0.0 || lambda_trf < 0.0) {
    throw ConfigError("loss weights must be >= 0");
  }
  if (focal_gamma < 0.0) throw ConfigError("focal_gamma must be >= 0");
  if (!(focal_alpha > 0.0)) throw ConfigError("focal_alpha must be > 0");
  if (au_threshold < 0.0 || au_threshold > 1.0) throw ConfigError("au_threshold must lie in [0, 1]");
  if (f1_average != "macro" && f1_average != "micro") {
    throw ConfigError("f1_average must be 'macro' or 'micro', got '" + f1_average + "'");
  }
  if (gru_hidden < 1 || gru_layers < 1) throw ConfigError("gru_hidden and gru_layers must be >= 1");
  if (trf_blocks < 0 || au_blocks < 1) throw ConfigError("block counts out of range");
  if (trf_heads < 1 || au_heads < 1) throw ConfigError("head counts must be >= 1");
  if (trf_ff < 0 || attn_dim < 0 || au_expand < 0) {
    throw ConfigError("trf_ff/attn_dim/au_expand must be >= 0 (0 means the default)");
  }
  if (attn_window < 0) throw ConfigError("attn_window must be >= 0");
}

void apply_config_kv(TrainConfig& c, const std::string& key, const std::string& value) {
  if (key == "task") {
    c.task = task_from_name(value);
  } else if (key == "epochs") {
    c.epochs = parse_long(key, value);
  } else if (key == "lr") {
    c.lr = parse_double(key, value);
  } else if (key == "optimizer") {
    if (value == "adam") {
      c.optimizer = OptimizerKind::adam;
    } else if (value == "sgd") {
      c.optimizer = OptimizerKind::sgd;
    } else {
      throw ConfigError("config key 'optimizer' got '" + value + "' (valid: adam, sgd)");
    }
  } else if (key == "momentum") {
    c.momentum = parse_double(key, value);
  } else if (key == "schedule") {
    if (value == "constant") {
      c.schedule = ScheduleKind::constant;
    } else if (value == "cosine-warm-restarts") {
      c.schedule = ScheduleKind::cosine_warm_restarts;
    } else {
      throw ConfigError("config key 'schedule' got '" + value +
                        "' (valid: constant, cosine-warm-restarts)");
    }
  } else if (key == "t0") {
    c.t0 = parse_double(key, value);
  } else if (key == "t_mult") {
    c.t_mult = parse_double(key, value);
  } else if (key == "eta_min") {
    c.eta_min = parse_double(key, value);
  } else if (key == "batch") {
    c.batch = parse_long(key, value);
  } else if (key == "window") {
    c.window = parse_long(key, value);
  } else if (key == "stride") {
    c.stride = parse_long(key, value);
  } else if (key == "seed") {
    c.seed = parse_u64(key, value);
  } else if (key == "lambda_fused") {
    c.lambda_fused = parse_double(key, value);
  } else if (key == "lambda_gru") {
    c.lambda_gru = parse_double(key, value);
  } else if (key == "lambda_trf") {
    c.lambda_trf = parse_double(key, value);
  } else if (key == "k") {
    c.fold_count = parse_long(key, value);
  } else if (key == "clip_norm") {
    c.clip_norm = parse_double(key, value);
  } else if (key == "focal_gamma") {
    c.focal_gamma = parse_double(key, value);
  } else if (key == "focal_alpha") {
    c.focal_alpha = parse_double(key, value);
  } else if (key == "au_threshold") {
    c.au_threshold = parse_double(key, value);
  } else if (key == "f1_average") {
    if (value != "macro" && value != "micro") {
      throw ConfigError("config key 'f1_average' got '" + value + "' (valid: macro, micro)");
    }
    c.f1_average = value;
  } else if (key == "gru_hidden") {
    c.gru_hidden = parse_long(key, value);
  } else if (key == "gru_layers") {
    c.gru_layers = parse_long(key, value);
  } else if (key == "trf_blocks") {
    c.trf_blocks = parse_long(key, value);
  } else if (key == "trf_heads") {
    c.trf_heads = parse_long(key, value);
  } else if (key == "trf_ff") {
    c.trf_ff = parse_long(key, value);
  } else if (key == "attn_window") {
    c.attn_window = parse_long(key, value);
  } else if (key == "attn_dim") {
    c.attn_dim = parse_long(key, value);
  } else if (key == "au_blocks") {
    c.au_blocks = parse_long(key, value);
  } else if (key == "au_heads") {
    c.au_heads = parse_long(key, value);
  } else if (key == "au_expand") {
    c.au_expand = parse_long(key, value);
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

TrainConfig config_from_text(const std::string& text, const std::string& origin) {
  const KvPairs pairs = parse_kv_text(text, origin);
  // The task key seeds task-specific defaults, so resolve it first.
  Task task = Task::stage1;
  for (const auto& [k, v] : pairs) {
    if (k == "task") task = task_from_name(v);
  }
  TrainConfig c = default_config(task);
  for (const auto& [k, v] : pairs) apply_config_kv(c, k, v);
  c.validate();
  return c;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string() + ": cannot open config file");
  std::stringstream buf;
  buf << in.rdbuf();
  return config_from_text(buf.str(), path.string());
}

std::string config_to_text(const TrainConfig& c) {
  std::map<std::string, std::string> kv;
  auto put_long = [&kv](const char* k, long v) { kv[k] = std::to_string(v); };
  auto put_double = [&kv](const char* k, double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    kv[k] = os.str();
  };
  kv["task"] = task_name(c.task);
  put_long("epochs", c.epochs);
  put_double("lr", c.lr);
  kv["optimizer"] = c.optimizer == OptimizerKind::adam ? "adam" : "sgd";
  put_double("momentum", c.momentum);
  kv["schedule"] =
      c.schedule == ScheduleKind::constant ? "constant" : "cosine-warm-restarts";
  put_double("t0", c.t0);
  put_double("t_mult", c.t_mult);
  put_double("eta_min", c.eta_min);
  put_long("batch", c.batch);
  put_long("window", c.window);
  put_long("stride", c.stride);
  kv["seed"] = std::to_string(c.seed);
  put_double("lambda_fused", c.lambda_fused);
  put_double("lambda_gru", c.lambda_gru);
  put_double("lambda_trf", c.lambda_trf);
  put_long("k", c.fold_count);
  put_double("clip_norm", c.clip_norm);
  put_double("focal_gamma", c.focal_gamma);
  put_double("focal_alpha", c.focal_alpha);
  put_double("au_threshold", c.au_threshold);
  kv["f1_average"] = c.f1_average;
  put_long("gru_hidden", c.gru_hidden);
  put_long("gru_layers", c.gru_layers);
  put_long("trf_blocks", c.trf_blocks);
  put_long("trf_heads", c.trf_heads);
  put_long("trf_ff", c.trf_ff);
  put_long("attn_window", c.attn_window);
  put_long("attn_dim", c.attn_dim);
  put_long("au_blocks", c.au_blocks);
  put_long("au_heads", c.au_heads);
  put_long("au_expand", c.au_expand);

  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

}  // namespace affect
