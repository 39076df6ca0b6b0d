// SPDX-License-Identifier: Apache-2.0
//
// Single entry point for the valence/arousal + action-unit pipeline:
// synthesize or ingest per-frame features, split folds, train the two
// stages and the AU detector, produce fold scores, evaluate, and report.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "affect/config.hpp"
#include "affect/data_io.hpp"
#include "affect/ensemble.hpp"
#include "affect/error.hpp"
#include "affect/grad_suite.hpp"
#include "affect/metrics.hpp"
#include "affect/rng.hpp"
#include "affect/training.hpp"

namespace {

using namespace affect;

struct ConfigCli {
  std::string config_path;
  std::vector<std::string> sets;
  // Convenience overrides; negative/empty means "not given".
  long epochs = -1;
  double lr = -1.0;
  long seed = -1;
  long k = -1;
  long window = -1;
  long batch = -1;
};

void attach_config_flags(CLI::App* cmd, ConfigCli& cc) {
  cmd->add_option("--config", cc.config_path, "flat key = value config file");
  cmd->add_option("--set", cc.sets, "override one config key, e.g. --set epochs=10")
      ->expected(-1);
  cmd->add_option("--epochs", cc.epochs, "override epochs");
  cmd->add_option("--lr", cc.lr, "override learning rate");
  cmd->add_option("--seed", cc.seed, "override seed");
  cmd->add_option("--k", cc.k, "override fold count");
  cmd->add_option("--window", cc.window, "override window length");
  cmd->add_option("--batch", cc.batch, "override batch size");
}

TrainConfig resolve_config(Task task, const ConfigCli& cc) {
  TrainConfig cfg = default_config(task);
  if (!cc.config_path.empty()) {
    cfg = load_config(cc.config_path);
    if (cfg.task != task) {
      // The subcommand decides the task; a conflicting config file is an error.
      throw ConfigError("config file task '" + task_name(cfg.task) +
                        "' does not match this subcommand ('" + task_name(task) + "')");
    }
  }
  for (const std::string& kv : cc.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("--set expects key=value, got '" + kv + "'");
    }
    std::string key = kv.substr(0, eq);
    std::string value = kv.substr(eq + 1);
    auto strip = [](std::string& s) {
      while (!s.empty() && (s.front() == ' ')) s.erase(s.begin());
      while (!s.empty() && (s.back() == ' ')) s.pop_back();
    };
    strip(key);
    strip(value);
    apply_config_kv(cfg, key, value);
  }
  if (cc.epochs >= 0) cfg.epochs = cc.epochs;
  if (cc.lr > 0.0) cfg.lr = cc.lr;
  if (cc.seed >= 0) cfg.seed = static_cast<std::uint64_t>(cc.seed);
  if (cc.k >= 0) cfg.fold_count = cc.k;
  if (cc.window >= 0) cfg.window = cc.window;
  if (cc.batch >= 0) cfg.batch = cc.batch;
  cfg.task = task;
  cfg.validate();
  return cfg;
}

void print_config(const TrainConfig& cfg) {
  std::cout << "# resolved configuration\n" << config_to_text(cfg) << std::flush;
}

int cmd_synth(const std::string& out_dir, long videos, long frames, long dim, long seed,
              const std::string& labels, double val_fraction, double noise) {
  std::cout << "# resolved configuration\n"
            << "labels = " << labels << "\nvideos = " << videos << "\nframes = " << frames
            << "\ndim = " << dim << "\nseed = " << seed << "\nval_fraction = " << val_fraction
            << "\nnoise = " << noise << "\nout = " << out_dir << "\n";
  if (labels != "va" && labels != "au") {
    throw ConfigError("--labels must be 'va' or 'au', got '" + labels + "'");
  }
  if (val_fraction < 0.0 || val_fraction >= 1.0) {
    throw ConfigError("--val-fraction must lie in [0, 1)");
  }
  SynthOptions options;
  options.n_videos = videos;
  options.n_frames = frames;
  options.feat_dim = dim;
  options.seed = static_cast<std::uint64_t>(seed);
  options.labels = labels == "va" ? LabelKind::va : LabelKind::au12;
  options.noise = noise;

  std::filesystem::create_directories(out_dir);
  std::vector<VideoRecord> records = synth_generate(options);

  // Deterministic split: shuffle ids by seed, last chunk becomes `val`.
  std::vector<long> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<long>(i);
  Rng rng(options.seed ^ 0xA5A5A5A5ULL);
  rng.shuffle(order);
  const long n_val = static_cast<long>(static_cast<double>(records.size()) * val_fraction);
  std::vector<bool> is_val(records.size(), false);
  for (long i = 0; i < n_val; ++i) is_val[order[order.size() - 1 - i]] = true;

  Manifest manifest;
  manifest.base_dir = out_dir;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const std::string filename = records[i].video_id + ".afb1";
    write_video_file(std::filesystem::path(out_dir) / filename, records[i]);
    manifest.entries.push_back(
        {records[i].video_id, filename, is_val[i] ? "val" : "train", -1});
  }
  write_manifest(std::filesystem::path(out_dir) / "manifest.tsv", manifest);
  std::cout << "wrote " << records.size() << " videos and manifest.tsv under " << out_dir << "\n";
  return 0;
}

int cmd_split(const std::string& manifest_path, long k, long seed) {
  std::cout << "# resolved configuration\nmanifest = " << manifest_path << "\nk = " << k
            << "\nseed = " << seed << "\n";
  Manifest manifest = read_manifest(manifest_path);
  std::vector<std::string> train_ids;
  for (const auto& e : manifest.entries) {
    if (e.split == "train") train_ids.push_back(e.video_id);
  }
  FoldAssignment folds = kfold_split(train_ids, static_cast<int>(k), static_cast<std::uint64_t>(seed));
  for (auto& e : manifest.entries) {
    if (e.split == "train") e.fold = folds.fold(e.video_id);
  }
  write_manifest(manifest_path, manifest);
  std::cout << "assigned " << train_ids.size() << " train videos to " << k << " folds\n";
  return 0;
}

void print_train_result(const TrainResult& result) {
  if (!result.epochs.empty()) {
    const EpochMetrics& last = result.epochs.back();
    std::printf("final epoch %ld: train loss %.6f", last.epoch, last.train_loss);
    if (last.has_val) std::printf(", val metric %.4f", result.best_metric);
    std::printf("\n");
  }
  std::cout << "best checkpoint: " << result.best_checkpoint.string() << "\n"
            << "last checkpoint: " << result.last_checkpoint.string() << "\n";
}

int cmd_train_stage1(const std::string& manifest_path, const std::string& out_dir, int fold,
                     const ConfigCli& cc, const std::string& resume, bool verbose) {
  TrainConfig cfg = resolve_config(Task::stage1, cc);
  print_config(cfg);
  Manifest manifest = read_manifest(manifest_path);
  TrainOptions options;
  options.fold = fold;
  options.quiet = !verbose;
  if (!resume.empty()) options.resume_from = resume;
  TrainResult result = train_stage1(cfg, manifest, out_dir, options);
  print_train_result(result);
  return 0;
}

int cmd_infer_folds(const std::string& manifest_path, const std::string& ckpt_dir,
                    const std::string& out_dir, long k, const std::string& mode) {
  std::cout << "# resolved configuration\nmanifest = " << manifest_path
            << "\nckpt_dir = " << ckpt_dir << "\nout = " << out_dir << "\nk = " << k
            << "\nmode = " << mode << "\n";
  if (mode != "oof" && mode != "all") {
    throw ConfigError("--mode must be 'oof' or 'all', got '" + mode + "'");
  }
  Manifest manifest = read_manifest(manifest_path);
  std::vector<Checkpoint> models;
  for (long fold = 0; fold < k; ++fold) {
    const auto path =
        std::filesystem::path(ckpt_dir) / ("stage1_fold" + std::to_string(fold) + "_best.afck");
    if (!std::filesystem::exists(path)) {
      throw IoError("missing checkpoint for fold " + std::to_string(fold) + ": " + path.string());
    }
    models.push_back(load_checkpoint(path));
  }
  infer_fold_scores(manifest, models, out_dir,
                    mode == "oof" ? FoldScoreMode::oof : FoldScoreMode::all_models);
  std::cout << "wrote fold scores for " << manifest.entries.size() << " videos under " << out_dir
            << "\n";
  return 0;
}

int cmd_train_stage2(const std::string& manifest_path, const std::string& out_dir,
                     const ConfigCli& cc, const std::string& resume, bool verbose) {
  TrainConfig cfg = resolve_config(Task::stage2, cc);
  print_config(cfg);
  Manifest manifest = read_manifest(manifest_path);
  TrainOptions options;
  options.quiet = !verbose;
  if (!resume.empty()) options.resume_from = resume;
  TrainResult result = train_stage2(cfg, manifest, out_dir, options);
  print_train_result(result);
  return 0;
}

int cmd_train_au(const std::string& manifest_path, const std::string& out_dir, const ConfigCli& cc,
                 const std::string& resume, bool verbose) {
  TrainConfig cfg = resolve_config(Task::au, cc);
  print_config(cfg);
  Manifest manifest = read_manifest(manifest_path);
  TrainOptions options;
  options.quiet = !verbose;
  if (!resume.empty()) options.resume_from = resume;
  TrainResult result = train_au(cfg, manifest, out_dir, options);
  print_train_result(result);
  return 0;
}

int cmd_evaluate(const std::string& ckpt_path, const std::string& manifest_path,
                 const std::string& split, const std::string& json_out,
                 const std::string& scores_out) {
  std::cout << "# resolved configuration\ncheckpoint = " << ckpt_path
            << "\nmanifest = " << manifest_path << "\nsplit = " << split << "\n";
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  Manifest manifest = read_manifest(manifest_path);
  EvalReport report = evaluate(ckpt, manifest, split);

  if (report.task == Task::au) {
    std::printf("%-24s %8s %8s\n", "Video", "Frames", "F1");
    for (const auto& row : report.per_video) {
      std::printf("%-24s %8ld %8.3f\n", row.video_id.c_str(), row.frames, row.f1);
    }
    std::printf("pooled F1 (%s, %ld frames): %.3f\n", ckpt.config.f1_average.c_str(),
                report.total_frames, report.pooled_f1);
    std::printf("%-28s %8s\n", "Method", "F1");
    std::printf("%-28s %8.3f\n", "full (T1 + T2 + fusion)", report.pooled_f1);
    std::printf("%-28s %8.3f\n", "T1 branch only", report.pooled_f1_t1_only);
  } else {
    std::printf("%-24s %8s %9s %9s %9s\n", "Video", "Frames", "Valence", "Arousal", "Combined");
    for (const auto& row : report.per_video) {
      std::printf("%-24s %8ld %9.3f %9.3f %9.3f\n", row.video_id.c_str(), row.frames, row.ccc_v,
                  row.ccc_a, row.ccc_va);
    }
    std::printf("%-24s %8ld %9.3f %9.3f %9.3f\n", "pooled", report.total_frames,
                report.pooled_ccc_v, report.pooled_ccc_a, report.pooled_ccc_va);
  }

  if (!json_out.empty()) {
    nlohmann::json j;
    j["task"] = task_name(report.task);
    j["split"] = report.split;
    j["total_frames"] = report.total_frames;
    if (report.task == Task::au) {
      j["pooled_f1"] = report.pooled_f1;
      j["pooled_f1_t1_only"] = report.pooled_f1_t1_only;
    } else {
      j["pooled_ccc_v"] = report.pooled_ccc_v;
      j["pooled_ccc_a"] = report.pooled_ccc_a;
      j["pooled_ccc_va"] = report.pooled_ccc_va;
    }
    auto& rows = j["per_video"] = nlohmann::json::array();
    for (const auto& row : report.per_video) {
      nlohmann::json r{{"video_id", row.video_id}, {"frames", row.frames}};
      if (report.task == Task::au) {
        r["f1"] = row.f1;
      } else {
        r["ccc_v"] = row.ccc_v;
        r["ccc_a"] = row.ccc_a;
        r["ccc_va"] = row.ccc_va;
      }
      rows.push_back(r);
    }
    std::ofstream out(json_out, std::ios::trunc);
    if (!out) throw IoError(json_out + ": cannot write report");
    out << j.dump(2) << "\n";
  }

  if (!scores_out.empty()) {
    AnyModel model = model_from_checkpoint(ckpt);
    std::vector<ScoredVideo> scored;
    for (const auto& e : manifest.with_split(split)) {
      VideoRecord rec = read_video_file(manifest.resolve(e));
      std::vector<double> rows = predict_rows(model, ckpt.config, rec);
      scored.push_back({e.video_id, prediction_channels(report.task), std::move(rows)});
    }
    write_scores(scores_out, scored);
  }
  return 0;
}

int cmd_grad_check(long seed, double tolerance) {
  std::cout << "# resolved configuration\nseed = " << seed << "\ntolerance = " << tolerance
            << "\n";
  std::vector<GradCheckCase> cases = run_grad_check_suite(static_cast<std::uint64_t>(seed));
  bool all_pass = true;
  for (const auto& c : cases) {
    const bool pass = c.max_rel_err <= tolerance;
    all_pass = all_pass && pass;
    std::printf("%-22s max rel err %.3e  [%s]\n", c.name.c_str(), c.max_rel_err,
                pass ? "ok" : "FAIL");
  }
  return all_pass ? 0 : 1;
}

int cmd_report(const std::string& scores_dir, const std::string& split,
               const std::string& out_path) {
  std::cout << "# resolved configuration\nscores_dir = " << scores_dir << "\nsplit = " << split
            << "\nout = " << (out_path.empty() ? "(stdout)" : out_path) << "\n";
  Manifest manifest = read_manifest(std::filesystem::path(scores_dir) / "manifest.tsv");
  const auto entries = manifest.with_split(split);
  if (entries.empty()) {
    throw ConfigError("report: split '" + split + "' has no videos in " + scores_dir);
  }

  int k = -1;
  std::vector<std::vector<double>> fold_pv, fold_pa;  // per fold, pooled frames
  std::vector<double> avg_pv, avg_pa, lv, la;
  for (const auto& e : entries) {
    VideoRecord rec = read_video_file(manifest.resolve(e));
    if (rec.label_kind != LabelKind::va || rec.feat_dim % 2 != 0) {
      throw ConfigError("report: '" + e.video_id + "' is not a fold-score record");
    }
    if (k < 0) {
      k = static_cast<int>(rec.feat_dim / 2);
      fold_pv.resize(k);
      fold_pa.resize(k);
    } else if (rec.feat_dim != 2 * k) {
      throw ConfigError("report: inconsistent fold counts across score files");
    }
    FoldScoreSequence scores;
    scores.video_id = rec.video_id;
    scores.fold_count = k;
    scores.n_frames = rec.n_frames;
    scores.values.assign(rec.features.begin(), rec.features.end());
    for (int f = 0; f < k; ++f) {
      for (const auto& va : slice_fold(scores, f)) {
        fold_pv[f].push_back(va[0]);
        fold_pa[f].push_back(va[1]);
      }
    }
    for (const auto& va : average_folds(scores)) {
      avg_pv.push_back(va[0]);
      avg_pa.push_back(va[1]);
    }
    for (long f = 0; f < rec.n_frames; ++f) {
      lv.push_back(rec.va[f * 2 + 0]);
      la.push_back(rec.va[f * 2 + 1]);
    }
  }

  std::ostringstream md;
  md << "| Fold | Valence | Arousal | Combined |\n|------|---------|---------|----------|\n";
  char buf[160];
  for (int f = 0; f < k; ++f) {
    const CccResult r = ccc_va(fold_pv[f], fold_pa[f], lv, la);
    std::snprintf(buf, sizeof(buf), "| %d | %.3f | %.3f | %.3f |\n", f + 1, r.ccc_v, r.ccc_a,
                  r.combined);
    md << buf;
  }
  const CccResult avg = ccc_va(avg_pv, avg_pa, lv, la);
  std::snprintf(buf, sizeof(buf), "| Average | %.3f | %.3f | %.3f |\n", avg.ccc_v, avg.ccc_a,
                avg.combined);
  md << buf;

  if (out_path.empty()) {
    std::cout << md.str();
  } else {
    std::ofstream out(out_path, std::ios::trunc);
    if (!out) throw IoError(out_path + ": cannot write report");
    out << md.str();
    std::cout << "wrote " << out_path << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"valence/arousal estimation and action-unit detection pipeline"};
  app.require_subcommand(1);

  // synth
  std::string synth_out, synth_labels = "va";
  long synth_videos = 40, synth_frames = 400, synth_dim = 64, synth_seed = 7;
  double synth_val_fraction = 0.2, synth_noise = 0.08;
  auto* synth = app.add_subcommand("synth", "generate a synthetic feature dataset");
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--videos", synth_videos, "number of videos");
  synth->add_option("--frames", synth_frames, "frames per video");
  synth->add_option("--dim", synth_dim, "feature dimension");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--labels", synth_labels, "label kind: va or au");
  synth->add_option("--val-fraction", synth_val_fraction, "fraction of videos tagged val");
  synth->add_option("--noise", synth_noise, "feature noise sigma");

  // split
  std::string split_manifest;
  long split_k = 5, split_seed = 7;
  auto* split = app.add_subcommand("split", "assign train videos to folds (whole-video split)");
  split->add_option("--manifest", split_manifest, "manifest file")->required();
  split->add_option("--k", split_k, "fold count");
  split->add_option("--seed", split_seed, "shuffle seed");

  // train-stage1
  std::string ts1_manifest, ts1_out, ts1_resume;
  int ts1_fold = -1;
  bool ts1_verbose = false;
  ConfigCli ts1_cc;
  auto* ts1 = app.add_subcommand("train-stage1", "train the feature-fusion stage on one fold");
  ts1->add_option("--manifest", ts1_manifest, "manifest file")->required();
  ts1->add_option("--out", ts1_out, "output directory")->required();
  ts1->add_option("--fold", ts1_fold, "held-out fold (-1 = train on all, validate on val split)");
  ts1->add_option("--resume", ts1_resume, "checkpoint to continue from");
  ts1->add_flag("--verbose", ts1_verbose, "per-epoch progress on stderr");
  attach_config_flags(ts1, ts1_cc);

  // infer-folds
  std::string if_manifest, if_ckpt_dir, if_out, if_mode = "oof";
  long if_k = 5;
  auto* inf = app.add_subcommand("infer-folds", "write per-video fold-score records");
  inf->add_option("--manifest", if_manifest, "manifest file")->required();
  inf->add_option("--ckpt-dir", if_ckpt_dir, "directory with stage1_fold<k>_best.afck")->required();
  inf->add_option("--out", if_out, "output directory")->required();
  inf->add_option("--k", if_k, "fold count");
  inf->add_option("--mode", if_mode, "train-video scoring: oof (unbiased) or all (all models)");

  // train-stage2
  std::string ts2_manifest, ts2_out, ts2_resume;
  bool ts2_verbose = false;
  ConfigCli ts2_cc;
  auto* ts2 = app.add_subcommand("train-stage2", "train the stacking model on fold scores");
  ts2->add_option("--manifest", ts2_manifest, "fold-score manifest")->required();
  ts2->add_option("--out", ts2_out, "output directory")->required();
  ts2->add_option("--resume", ts2_resume, "checkpoint to continue from");
  ts2->add_flag("--verbose", ts2_verbose, "per-epoch progress on stderr");
  attach_config_flags(ts2, ts2_cc);

  // train-au
  std::string au_manifest, au_out, au_resume;
  bool au_verbose = false;
  ConfigCli au_cc;
  auto* tau = app.add_subcommand("train-au", "train the action-unit detector");
  tau->add_option("--manifest", au_manifest, "manifest file")->required();
  tau->add_option("--out", au_out, "output directory")->required();
  tau->add_option("--resume", au_resume, "checkpoint to continue from");
  tau->add_flag("--verbose", au_verbose, "per-epoch progress on stderr");
  attach_config_flags(tau, au_cc);

  // evaluate
  std::string ev_ckpt, ev_manifest, ev_split = "val", ev_json, ev_scores;
  auto* ev = app.add_subcommand("evaluate", "score a checkpoint on a manifest split");
  ev->add_option("--checkpoint", ev_ckpt, "AFCK checkpoint")->required();
  ev->add_option("--manifest", ev_manifest, "manifest file")->required();
  ev->add_option("--split", ev_split, "split to score (train/val/test)");
  ev->add_option("--out", ev_json, "write a JSON report here");
  ev->add_option("--scores", ev_scores, "write per-frame predictions here (CSV)");

  // grad-check
  long gc_seed = 7;
  double gc_tolerance = 1e-4;
  auto* gc = app.add_subcommand("grad-check", "finite-difference check of every layer type");
  gc->add_option("--seed", gc_seed, "sweep seed");
  gc->add_option("--tolerance", gc_tolerance, "max relative error allowed");

  // report
  std::string rp_scores_dir, rp_split = "val", rp_out;
  auto* rp = app.add_subcommand("report", "per-fold and averaged CCC table from fold scores");
  rp->add_option("--scores-dir", rp_scores_dir, "directory written by infer-folds")->required();
  rp->add_option("--split", rp_split, "split to report");
  rp->add_option("--out", rp_out, "markdown output path (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (synth->parsed()) {
      return cmd_synth(synth_out, synth_videos, synth_frames, synth_dim, synth_seed, synth_labels,
                       synth_val_fraction, synth_noise);
    }
    if (split->parsed()) return cmd_split(split_manifest, split_k, split_seed);
    if (ts1->parsed()) {
      return cmd_train_stage1(ts1_manifest, ts1_out, ts1_fold, ts1_cc, ts1_resume, ts1_verbose);
    }
    if (inf->parsed()) return cmd_infer_folds(if_manifest, if_ckpt_dir, if_out, if_k, if_mode);
    if (ts2->parsed()) return cmd_train_stage2(ts2_manifest, ts2_out, ts2_cc, ts2_resume, ts2_verbose);
    if (tau->parsed()) return cmd_train_au(au_manifest, au_out, au_cc, au_resume, au_verbose);
    if (ev->parsed()) return cmd_evaluate(ev_ckpt, ev_manifest, ev_split, ev_json, ev_scores);
    if (gc->parsed()) return cmd_grad_check(gc_seed, gc_tolerance);
    if (rp->parsed()) return cmd_report(rp_scores_dir, rp_split, rp_out);
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const DimensionError& e) {
    std::cerr << "dimension error: " << e.what() << "\n";
    return 1;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
