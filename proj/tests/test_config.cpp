// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "affect/config.hpp"
#include "affect/error.hpp"

using namespace affect;
namespace fs = std::filesystem;

namespace {

fs::path write_config(const std::string& name, const std::string& text) {
  fs::path dir = fs::temp_directory_path() / "affect_cfg_tests";
  fs::create_directories(dir);
  fs::path p = dir / name;
  std::ofstream(p, std::ios::trunc) << text;
  return p;
}

}  // namespace

TEST_CASE("empty config file yields all documented defaults") {
  TrainConfig cfg = load_config(write_config("empty.cfg", ""));
  const TrainConfig def = default_config(Task::stage1);
  CHECK(config_to_text(cfg) == config_to_text(def));
  CHECK(cfg.epochs == 25);
  CHECK(cfg.lr == 1e-3);
  CHECK(cfg.optimizer == OptimizerKind::adam);
  CHECK(cfg.gru_hidden == 256);
  CHECK(cfg.gru_layers == 2);
  CHECK(cfg.fold_count == 5);
  CHECK(cfg.window == 64);
  CHECK(cfg.batch == 16);
}

TEST_CASE("task-specific defaults") {
  CHECK(default_config(Task::stage2).gru_layers == 4);
  CHECK(default_config(Task::au).optimizer == OptimizerKind::sgd);
  CHECK(default_config(Task::au).epochs == 20);
  CHECK(default_config(Task::au).schedule == ScheduleKind::cosine_warm_restarts);
  CHECK(default_config(Task::au).momentum == 0.9);
}

TEST_CASE("typed parsing") {
  TrainConfig cfg = load_config(write_config("typed.cfg",
                                             "epochs = 25\n"
                                             "lr = 0.001\n"
                                             "# a comment line\n"
                                             "optimizer = adam\n"
                                             "schedule = cosine-warm-restarts\n"
                                             "seed = 42\n"
                                             "lambda_gru = 0.5\n"));
  CHECK(cfg.epochs == 25);
  CHECK(cfg.lr == 0.001);
  CHECK(cfg.schedule == ScheduleKind::cosine_warm_restarts);
  CHECK(cfg.seed == 42);
  CHECK(cfg.lambda_gru == 0.5);
}

TEST_CASE("config errors name the key and what was expected") {
  SUBCASE("unknown key") {
    CHECK_THROWS_WITH_AS(load_config(write_config("bad1.cfg", "frobnicate = 7\n")),
                         doctest::Contains("frobnicate"), ConfigError);
  }
  SUBCASE("bad enum lists the valid values") {
    CHECK_THROWS_WITH_AS(load_config(write_config("bad2.cfg", "optimizer = frobnicate\n")),
                         doctest::Contains("adam, sgd"), ConfigError);
  }
  SUBCASE("bad integer names the key and the type") {
    CHECK_THROWS_WITH_AS(load_config(write_config("bad3.cfg", "epochs = soon\n")),
                         doctest::Contains("'epochs' expects an integer"), ConfigError);
  }
  SUBCASE("bad number") {
    CHECK_THROWS_AS(load_config(write_config("bad4.cfg", "lr = fast\n")), ConfigError);
  }
  SUBCASE("malformed line") {
    CHECK_THROWS_AS(load_config(write_config("bad5.cfg", "epochs\n25\n")), ConfigError);
  }
  SUBCASE("missing file is an io error") {
    CHECK_THROWS_AS(load_config("/nonexistent/affect.cfg"), IoError);
  }
}

TEST_CASE("validation bounds") {
  TrainConfig cfg = default_config(Task::stage1);
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = default_config(Task::stage1);
  cfg.lr = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = default_config(Task::stage1);
  cfg.stride = 100;  // > window
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = default_config(Task::stage1);
  cfg.fold_count = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = default_config(Task::stage1);
  cfg.f1_average = "median";
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("config text round trip") {
  TrainConfig cfg = default_config(Task::au);
  cfg.epochs = 13;
  cfg.lr = 0.037;
  cfg.seed = 981;
  cfg.f1_average = "micro";
  const std::string text = config_to_text(cfg);
  TrainConfig back = config_from_text(text, "roundtrip");
  CHECK(config_to_text(back) == text);
  CHECK(back.epochs == 13);
  CHECK(back.lr == 0.037);
  CHECK(back.f1_average == "micro");
  CHECK(back.task == Task::au);
}

TEST_CASE("later keys override earlier ones (flag-over-file semantics)") {
  TrainConfig cfg = load_config(write_config("override.cfg", "epochs = 5\nepochs = 9\n"));
  CHECK(cfg.epochs == 9);
  apply_config_kv(cfg, "epochs", "11");
  CHECK(cfg.epochs == 11);
}
