// Copyright 2026 The tlkfac Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "doctest.h"
#include "tlkfac/errors.hpp"
#include "tlkfac/experiment.hpp"

using namespace tlkfac;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("tlkfac_test_exp_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

json small_json(const std::string& kind) {
  return json{{"seed", 3},
              {"epochs", 2},
              {"batch_size", 64},
              {"architecture", {{"layers", 4}, {"width", 6}, {"batchnorm", true}}},
              {"dataset", {{"kind", "planted"}, {"d_in", 6}, {"n_train", 400}, {"n_test", 100}}},
              {"optimizer", {{"kind", kind}, {"t_stats", 2}, {"t_inv", 4}}}};
}

std::string read(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string config_error(const json& j) {
  try {
    validate_run_config(parse_run_config(j));
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("config parsing: defaults and errors name the field") {
  const RunConfig cfg = parse_run_config(json{{"seed", 1}});
  CHECK(cfg.architecture.layers == 32);
  CHECK(cfg.batch_size == 512);
  CHECK(cfg.optimizer.kind == OptimizerKind::kfac2);
  CHECK(cfg.dataset.n_train == 25000);

  CHECK(config_error(json::object()).find("seed") != std::string::npos);
  json j = small_json("sgd");
  j["optimizer"]["lr"] = -1.0;
  CHECK(config_error(j).find("lr") != std::string::npos);
  j = small_json("sgd");
  j["optimizer"]["learning_rate"] = 0.1;
  CHECK(config_error(j).find("optimizer.learning_rate") != std::string::npos);
  j = small_json("sgd");
  j["batch_size"] = 0;
  CHECK(config_error(j).find("batch_size") != std::string::npos);
  j = small_json("sgd");
  j["dataset"]["n_train"] = 0;
  CHECK(config_error(j).find("n_train") != std::string::npos);
  j = small_json("kfac1");
  j["optimizer"]["t_inv"] = 5;
  CHECK(config_error(j).find("t_inv") != std::string::npos);
  j = small_json("lbfgs");
  CHECK(config_error(j).find("kfac2") != std::string::npos);
  j = small_json("sgd");
  j["dataset"] = {{"kind", "csv"}, {"train", "/nonexistent/train.csv"}, {"test", "/nonexistent/test.csv"}};
  CHECK(config_error(j).find("dataset.train") != std::string::npos);
}

TEST_CASE("config echo round trip") {
  RunConfig cfg = parse_run_config(small_json("kfac2"));
  cfg.optimizer.lr_schedule = {{5, 0.1}};
  cfg.optimizer.damping_mode = DampingMode::factored_tikhonov;
  const json echoed = to_json(cfg);
  const RunConfig back = parse_run_config(echoed);
  CHECK(to_json(back) == echoed);
  CHECK(back.optimizer.damping_mode == DampingMode::factored_tikhonov);
  CHECK(back.dataset.seed.value() == 3);
}

TEST_CASE("build_architecture from depth and width") {
  ArchitectureSpec spec;
  spec.layers = 4;
  spec.width = 6;
  const Architecture arch = build_architecture(spec, 10);
  CHECK(arch.layer_dims == std::vector<Eigen::Index>{10, 6, 6, 6, 1});
  CHECK(arch.batchnorm == std::vector<bool>{true, true, true, false});
  spec.loss = LossKind::softmax_ce;
  CHECK(build_architecture(spec, 10).output_dim() == 2);
}

TEST_CASE("training writes run.csv and echo, and is deterministic") {
  const fs::path dir = temp_dir("train");
  RunConfig cfg = parse_run_config(small_json("kfac2"));
  cfg.output_dir = dir / "a";
  const RunResult a = run_training(cfg);
  cfg.output_dir = dir / "b";
  const RunResult b = run_training(cfg);
  REQUIRE(a.rows.size() == 2);
  const std::string csv = read(dir / "a" / "run.csv");
  CHECK(csv.substr(0, csv.find('\n')) == kRunCsvHeader);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  CHECK(csv.find("wall_seconds") != std::string::npos);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(a.rows[i].train_loss == b.rows[i].train_loss);
    CHECK(a.rows[i].test_loss == b.rows[i].test_loss);
    CHECK(a.rows[i].epoch == static_cast<int>(i + 1));
    CHECK(a.rows[i].iteration == 7 * (i + 1));
    CHECK(std::isfinite(a.rows[i].train_loss));
  }
  const json echo = json::parse(read(dir / "a" / "config.echo.json"));
  CHECK(echo["_meta"]["seed"] == 3);
  CHECK(echo["optimizer"]["kind"] == "kfac2");

  // Training from the echoed config reproduces the run.
  RunConfig again = load_run_config(dir / "a" / "config.echo.json");
  again.output_dir = dir / "c";
  const RunResult c = run_training(again);
  CHECK(c.rows[1].train_loss == a.rows[1].train_loss);
  CHECK(c.rows[1].test_acc == a.rows[1].test_acc);
}

TEST_CASE("first epoch lowers the training loss for every optimizer") {
  for (const char* kind : {"sgd", "adam", "kfac1", "kfac2"}) {
    json j = small_json(kind);
    j["epochs"] = 1;
    j["architecture"] = {{"layers", 8}, {"width", 10}, {"batchnorm", true}};
    j["dataset"] = {{"d_in", 10}, {"n_train", 2000}, {"n_test", 200}};
    j["batch_size"] = 128;
    j["optimizer"] = {{"kind", kind}};
    if (std::string(kind) == "sgd") j["optimizer"]["lr"] = 1e-2;
    RunConfig cfg = parse_run_config(j);
    const TrainTest data = load_datasets(cfg);
    const RunResult r = run_training(cfg, data, {false, nullptr});
    const Architecture arch = build_architecture(cfg.architecture, data.train.dim());
    const double after = evaluate(arch, r.params, data.train, cfg.batch_size, Mode::training).loss;
    INFO(kind << ": " << r.initial_train_loss << " -> " << after);
    CHECK(after < r.initial_train_loss);
  }
}

TEST_CASE("resume from a checkpoint reproduces the uninterrupted run") {
  const fs::path dir = temp_dir("resume");
  for (const char* kind : {"kfac2", "adam"}) {
    json j = small_json(kind);
    j["epochs"] = 4;
    RunConfig full = parse_run_config(j);
    full.output_dir = dir / (std::string(kind) + "_full");
    const RunResult whole = run_training(full);

    RunConfig first = full;
    first.epochs = 2;
    first.checkpoint_every = 2;
    first.output_dir = dir / (std::string(kind) + "_part");
    run_training(first);
    RunConfig rest = full;
    rest.output_dir = first.output_dir;
    rest.resume = first.output_dir / "checkpoint.bin";
    const RunResult resumed = run_training(rest);
    REQUIRE(resumed.rows.size() == 2);
    CHECK(resumed.rows[0].epoch == 3);
    CHECK(resumed.rows[1].train_loss == whole.rows[3].train_loss);
    CHECK(resumed.rows[1].test_loss == whole.rows[3].test_loss);
    const std::string csv = read(first.output_dir / "run.csv");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
  }
}

TEST_CASE("evaluation is chunk independent without batch norm") {
  json j = small_json("sgd");
  j["architecture"]["batchnorm"] = false;
  RunConfig cfg = parse_run_config(j);
  const TrainTest data = load_datasets(cfg);
  const Architecture arch = build_architecture(cfg.architecture, data.train.dim());
  Rng rng(1);
  const Params p = init_params(arch, rng);
  const Evaluation a = evaluate(arch, p, data.test, 7, Mode::evaluation);
  const Evaluation b = evaluate(arch, p, data.test, 100, Mode::evaluation);
  CHECK(a.loss == doctest::Approx(b.loss).epsilon(1e-12));
  CHECK(a.accuracy == doctest::Approx(b.accuracy));
}

TEST_CASE("grid expansion") {
  json j{{"base", small_json("sgd")},
         {"optimizers", {"sgd", "adam", "kfac1", "kfac2"}},
         {"grid", {{"lr", {1e-2, 1e-3, 1e-4}}, {"momentum", {0.0, 0.9}},
                   {"damping", {1e-2, 1e-3}}, {"kappa", {1e-2, 1e-3}}}}};
  const CompareConfig cfg = parse_compare_config(j);
  const auto grid = expand_grid(cfg);
  std::map<OptimizerKind, int> counts;
  for (const auto& p : grid) counts[p.kind]++;
  CHECK(counts[OptimizerKind::sgd] == 6);
  CHECK(counts[OptimizerKind::adam] == 6);
  CHECK(counts[OptimizerKind::kfac1] == 24);
  CHECK(counts[OptimizerKind::kfac2] == 24);
  std::set<std::string> names;
  for (const auto& p : grid) names.insert(p.name);
  CHECK(names.size() == grid.size());
  CHECK_THROWS_AS(parse_compare_config(json{{"base", small_json("sgd")}, {"optimizers", json::array()}}),
                  ConfigError);
}

TEST_CASE("compare: single point equals train, seeds give CI columns, failures recorded") {
  const fs::path dir = temp_dir("compare");
  json base = small_json("sgd");
  json j{{"base", base}, {"optimizers", {"sgd"}}, {"seeds", {3}}};
  const CompareResult one = run_compare(parse_compare_config(j), dir / "one", {true, nullptr});
  RunConfig cfg = parse_run_config(base);
  cfg.output_dir = dir / "train";
  const RunResult direct = run_training(cfg);
  REQUIRE(one.summary.size() == 1);
  CHECK(one.summary[0].final_train_loss_mean == direct.rows.back().train_loss);
  CHECK(one.summary[0].rank == 1);

  json many{{"base", base}, {"optimizers", {"sgd", "adam"}}, {"seeds", {1, 2, 3, 4, 5}},
            {"grid", {{"lr", {1e-2, 1e9}}}}, {"jobs", 2}};
  const CompareResult res = run_compare(parse_compare_config(many), dir / "many", {true, nullptr});
  REQUIRE(res.summary.size() == 4);
  bool saw_failure = false;
  for (const auto& row : res.summary) {
    CHECK(row.seeds == 5);
    if (row.point.kind == OptimizerKind::sgd && row.point.lr > 1.0) {
      CHECK(row.completed < 5);
      CHECK_FALSE(row.failures.empty());
      saw_failure = true;
    }
    if (row.completed == 5) {
      CHECK(std::isfinite(row.final_train_loss_ci95));
      CHECK(row.final_train_loss_ci95 > 0.0);
    }
  }
  CHECK(saw_failure);
  const std::string summary = read(dir / "many" / "summary.csv");
  CHECK(summary.find("final_train_loss_ci95") != std::string::npos);
  CHECK(fs::exists(dir / "many" / "curves.csv"));
}

TEST_CASE("ci95 half width") {
  // t_{0.975, 4} = 2.7764451051977987
  const std::vector<double> v{1, 2, 3, 4, 5};
  CHECK(ci95_halfwidth(v) == doctest::Approx(2.7764451051977987 * std::sqrt(2.5) / std::sqrt(5.0)));
  CHECK(std::isnan(ci95_halfwidth({1.0})));
}
