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

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"

namespace fs = std::filesystem;

namespace {

const fs::path kDir = fs::temp_directory_path() / "tlkfac_test_cli";

struct Result {
  int code;
  std::string out;
};

std::string read(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

Result run(const std::string& args) {
  fs::create_directories(kDir);
  const fs::path log = kDir / "out.txt";
  const std::string cmd = std::string("\"") + TLKFAC_CLI_PATH + "\" " + args + " > \"" +
                          log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read(log)};
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

const char* kSmall = R"({
  "seed": 4, "epochs": 2, "batch_size": 64,
  "architecture": {"layers": 3, "width": 5},
  "dataset": {"d_in": 5, "n_train": 300, "n_test": 60},
  "optimizer": {"kind": "sgd", "lr": 0.01}
})";

}  // namespace

TEST_CASE("gen-data writes identical files for the same seed") {
  fs::remove_all(kDir / "d1");
  fs::remove_all(kDir / "d2");
  const Result a = run("gen-data --d-in 10 --train 2000 --test 200 --seed 1 --out " + (kDir / "d1").string());
  CHECK(a.code == 0);
  CHECK(a.out.find("positive fraction") != std::string::npos);
  CHECK(run("gen-data --d-in 10 --train 2000 --test 200 --seed 1 --out " + (kDir / "d2").string()).code == 0);
  for (const char* f : {"train.csv", "test.csv", "teacher.json"}) {
    CHECK(read(kDir / "d1" / f) == read(kDir / "d2" / f));
  }
}

TEST_CASE("gen-data validation error") {
  CHECK(run("gen-data --train 0 --seed 1 --out " + (kDir / "d0").string()).code == 2);
  CHECK(run("gen-data --train 10").code == 2);  // missing seed
}

TEST_CASE("gen-data unwritable path is an IO error") {
  write(kDir / "plainfile", "x");
  CHECK(run("gen-data --train 10 --test 10 --seed 1 --out " + (kDir / "plainfile" / "sub").string()).code == 4);
}

TEST_CASE("train writes one row per epoch and reproduces loss columns") {
  write(kDir / "small.json", kSmall);
  fs::remove_all(kDir / "r1");
  fs::remove_all(kDir / "r2");
  CHECK(run("train -q -c " + (kDir / "small.json").string() + " -o " + (kDir / "r1").string()).code == 0);
  CHECK(run("train -q -c " + (kDir / "small.json").string() + " -o " + (kDir / "r2").string()).code == 0);
  const std::string a = read(kDir / "r1" / "run.csv");
  CHECK(a.rfind("epoch,iteration,train_loss,test_loss,train_acc,test_acc,wall_seconds,lr,nu_mean\n", 0) == 0);
  CHECK(std::count(a.begin(), a.end(), '\n') == 3);
  auto losses = [](const std::string& csv) {
    std::stringstream in(csv);
    std::string line, out;
    std::getline(in, line);
    while (std::getline(in, line)) {
      std::stringstream row(line);
      std::string cell;
      for (int c = 0; c < 4 && std::getline(row, cell, ','); ++c) out += cell + ",";
      out += "\n";
    }
    return out;
  };
  CHECK(losses(a) == losses(read(kDir / "r2" / "run.csv")));
  CHECK(fs::exists(kDir / "r1" / "config.echo.json"));
}

TEST_CASE("flags override the config file") {
  write(kDir / "small.json", kSmall);
  fs::remove_all(kDir / "r3");
  CHECK(run("train -q -c " + (kDir / "small.json").string() + " --epochs 1 --optimizer adam -o " +
            (kDir / "r3").string()).code == 0);
  const std::string echo = read(kDir / "r3" / "config.echo.json");
  CHECK(echo.find("\"adam\"") != std::string::npos);
  const std::string csv = read(kDir / "r3" / "run.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);
}

TEST_CASE("config and optimizer errors exit with code 2") {
  write(kDir / "small.json", kSmall);
  const Result r = run("train -q -c " + (kDir / "small.json").string() + " --optimizer lbfgs -o " +
                       (kDir / "bad").string());
  CHECK(r.code == 2);
  for (const char* k : {"sgd", "adam", "kfac1", "kfac2"}) CHECK(r.out.find(k) != std::string::npos);
  write(kDir / "noseed.json", R"({"epochs": 1})");
  const Result s = run("validate-config -c " + (kDir / "noseed.json").string());
  CHECK(s.code == 2);
  CHECK(s.out.find("seed") != std::string::npos);
  write(kDir / "broken.json", "{ not json");
  CHECK(run("validate-config -c " + (kDir / "broken.json").string()).code == 2);
  CHECK(run("validate-config -c " + (kDir / "small.json").string()).code == 0);
  CHECK(run("frobnicate").code == 2);
}

TEST_CASE("missing config file is an IO error") {
  CHECK(run("train -c " + (kDir / "nope.json").string()).code == 4);
}

TEST_CASE("divergence is a numerical failure") {
  write(kDir / "small.json", kSmall);
  CHECK(run("train -q -c " + (kDir / "small.json").string() + " --lr 1e300 -o " + (kDir / "div").string()).code == 3);
}

TEST_CASE("compare writes a summary") {
  write(kDir / "cmp.json", std::string(R"({"base": )") + kSmall +
                               R"(, "optimizers": ["sgd", "kfac1"], "seeds": [1, 2],
                                   "grid": {"lr": [0.01]}})");
  fs::remove_all(kDir / "cmp");
  CHECK(run("compare -q -c " + (kDir / "cmp.json").string() + " -o " + (kDir / "cmp").string()).code == 0);
  const std::string s = read(kDir / "cmp" / "summary.csv");
  CHECK(std::count(s.begin(), s.end(), '\n') == 3);
  CHECK(run("validate-config --compare -c " + (kDir / "cmp.json").string()).code == 0);
}
