// SPDX-License-Identifier: Apache-2.0
//
// End-to-end checks of the command-line tool as a subprocess. The binary path
// comes from the AFFECT_CLI environment variable (set by ctest).
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "affect/data_io.hpp"

using namespace affect;
namespace fs = std::filesystem;

namespace {

std::string cli_path() {
  const char* p = std::getenv("AFFECT_CLI");
  return p ? p : "";
}

struct RunResult {
  int code = -1;
  std::string output;
};

RunResult run(const std::string& args) {
  const fs::path out_file = fs::temp_directory_path() / "affect_cli_out.txt";
  const std::string cmd = cli_path() + " " + args + " > " + out_file.string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  std::ifstream in(out_file);
  r.output.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  return r;
}

fs::path work_dir() {
  static const fs::path dir = [] {
    fs::path p = fs::temp_directory_path() / "affect_cli_tests";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

std::vector<char> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

const std::string kTinyModel =
    " --set gru_hidden=8 --set trf_heads=2 --set trf_ff=16 --window 12 --batch 4 --epochs 2";

}  // namespace

TEST_CASE("cli binary is available to the test run") {
  REQUIRE_FALSE(cli_path().empty());
  REQUIRE(fs::exists(cli_path()));
}

TEST_CASE("synth writes records plus a manifest, deterministically") {
  const fs::path d1 = work_dir() / "data1";
  const fs::path d2 = work_dir() / "data2";
  RunResult r1 = run("synth --out " + d1.string() + " --videos 6 --frames 24 --dim 8 --seed 7");
  CHECK(r1.code == 0);
  CHECK(r1.output.find("# resolved configuration") != std::string::npos);

  long afb1_files = 0;
  for (const auto& e : fs::directory_iterator(d1)) {
    if (e.path().extension() == ".afb1") ++afb1_files;
  }
  CHECK(afb1_files == 6);
  CHECK(fs::exists(d1 / "manifest.tsv"));

  RunResult r2 = run("synth --out " + d2.string() + " --videos 6 --frames 24 --dim 8 --seed 7");
  CHECK(r2.code == 0);
  for (const auto& e : fs::directory_iterator(d1)) {
    if (e.path().extension() != ".afb1") continue;
    CHECK(file_bytes(e.path()) == file_bytes(d2 / e.path().filename()));
  }
}

TEST_CASE("full pipeline: split, two fold models, fold scores, stacker, report") {
  const fs::path data = work_dir() / "pipe";
  REQUIRE(run("synth --out " + data.string() + " --videos 7 --frames 24 --dim 8 --seed 9").code ==
          0);
  REQUIRE(run("split --manifest " + (data / "manifest.tsv").string() + " --k 2 --seed 9").code ==
          0);

  const fs::path ckpt = work_dir() / "pipe_ckpt";
  for (int fold = 0; fold < 2; ++fold) {
    RunResult r = run("train-stage1 --manifest " + (data / "manifest.tsv").string() + " --out " +
                      ckpt.string() + " --fold " + std::to_string(fold) + kTinyModel + " --k 2");
    CHECK(r.code == 0);
    CHECK(fs::exists(ckpt / ("stage1_fold" + std::to_string(fold) + "_best.afck")));
    CHECK(fs::exists(ckpt / ("stage1_fold" + std::to_string(fold) + "_log.jsonl")));
  }

  const fs::path scores = work_dir() / "pipe_scores";
  RunResult ri = run("infer-folds --manifest " + (data / "manifest.tsv").string() +
                     " --ckpt-dir " + ckpt.string() + " --out " + scores.string() + " --k 2");
  CHECK(ri.code == 0);
  // one fold-score record per video plus the manifest
  long score_files = 0;
  for (const auto& e : fs::directory_iterator(scores)) {
    if (e.path().extension() == ".afb1") ++score_files;
  }
  CHECK(score_files == 7);
  VideoRecord sample = read_video_file(scores / "synth_0000.scores.afb1");
  CHECK(sample.feat_dim == 4);  // 2K, K=2
  CHECK(sample.label_kind == LabelKind::va);

  const fs::path ckpt2 = work_dir() / "pipe_ckpt2";
  RunResult r2 = run("train-stage2 --manifest " + (scores / "manifest.tsv").string() + " --out " +
                     ckpt2.string() + " --set gru_hidden=8 --set attn_window=2 --window 12" +
                     " --batch 4 --epochs 2 --k 2");
  CHECK(r2.code == 0);
  CHECK(fs::exists(ckpt2 / "stage2_best.afck"));

  RunResult re = run("evaluate --checkpoint " + (ckpt2 / "stage2_best.afck").string() +
                     " --manifest " + (scores / "manifest.tsv").string() + " --split val --out " +
                     (work_dir() / "eval.json").string() + " --scores " +
                     (work_dir() / "eval_scores.csv").string());
  CHECK(re.code == 0);
  CHECK(re.output.find("Combined") != std::string::npos);
  CHECK(fs::exists(work_dir() / "eval.json"));
  CHECK(fs::exists(work_dir() / "eval_scores.csv"));

  RunResult rr = run("report --scores-dir " + scores.string() + " --out " +
                     (work_dir() / "report.md").string());
  CHECK(rr.code == 0);
  std::ifstream md(work_dir() / "report.md");
  std::string text((std::istreambuf_iterator<char>(md)), std::istreambuf_iterator<char>());
  CHECK(text.find("| Fold | Valence | Arousal | Combined |") != std::string::npos);
  CHECK(text.find("| Average |") != std::string::npos);
  CHECK(text.find("| 2 |") != std::string::npos);
}

TEST_CASE("au pipeline through the cli") {
  const fs::path data = work_dir() / "au";
  REQUIRE(run("synth --out " + data.string() +
              " --videos 4 --frames 24 --dim 8 --seed 5 --labels au --val-fraction 0.25")
              .code == 0);
  const fs::path ckpt = work_dir() / "au_ckpt";
  RunResult r = run("train-au --manifest " + (data / "manifest.tsv").string() + " --out " +
                    ckpt.string() +
                    " --set au_blocks=1 --set au_heads=2 --set au_expand=16 --set trf_ff=16" +
                    " --window 12 --batch 4 --epochs 2");
  CHECK(r.code == 0);
  RunResult re = run("evaluate --checkpoint " + (ckpt / "au_best.afck").string() + " --manifest " +
                     (data / "manifest.tsv").string() + " --split val");
  CHECK(re.code == 0);
  CHECK(re.output.find("pooled F1") != std::string::npos);
  // one report carries both the full model and the first-branch ablation
  CHECK(re.output.find("full (T1 + T2 + fusion)") != std::string::npos);
  CHECK(re.output.find("T1 branch only") != std::string::npos);
}

TEST_CASE("grad-check subcommand exits zero under the default tolerance") {
  RunResult r = run("grad-check --seed 7");
  CHECK(r.code == 0);
  CHECK(r.output.find("transformer_block") != std::string::npos);
  CHECK(r.output.find("FAIL") == std::string::npos);
}

TEST_CASE("exit codes") {
  SUBCASE("unknown flag is a usage error") {
    CHECK(run("synth --out /tmp/x --frobnicate 3").code == 1);
  }
  SUBCASE("missing manifest file is an io error (2)") {
    CHECK(run("split --manifest /nonexistent/manifest.tsv --k 2").code == 2);
  }
  SUBCASE("bad config value is a config error (1)") {
    const fs::path data = work_dir() / "cfg_err";
    REQUIRE(run("synth --out " + data.string() + " --videos 3 --frames 12 --dim 6 --seed 1")
                .code == 0);
    RunResult r = run("train-stage1 --manifest " + (data / "manifest.tsv").string() +
                      " --out /tmp/cfg_err_out --set optimizer=frobnicate");
    CHECK(r.code == 1);
    CHECK(r.output.find("adam, sgd") != std::string::npos);
  }
  SUBCASE("corrupt afb1 is a parse error (2)") {
    const fs::path data = work_dir() / "corrupt";
    REQUIRE(run("synth --out " + data.string() + " --videos 3 --frames 12 --dim 6 --seed 1")
                .code == 0);
    // truncate one record
    const fs::path victim = data / "synth_0001.afb1";
    auto bytes = file_bytes(victim);
    std::ofstream(victim, std::ios::binary | std::ios::trunc)
        .write(bytes.data(), static_cast<long>(bytes.size() / 2));
    RunResult r = run("train-stage1 --manifest " + (data / "manifest.tsv").string() +
                      " --out /tmp/corrupt_out" + kTinyModel);
    CHECK(r.code == 2);
  }
}
