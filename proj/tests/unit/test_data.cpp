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

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "tlkfac/data.hpp"
#include "tlkfac/errors.hpp"

using namespace tlkfac;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("tlkfac_test_data_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

fs::path write_file(const fs::path& dir, const std::string& name, const std::string& text) {
  const fs::path p = dir / name;
  std::ofstream(p) << text;
  return p;
}

std::string message_of(const fs::path& p) {
  try {
    load_csv(p);
  } catch (const InputError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("gen_planted shapes, determinism and teacher consistency") {
  const PlantedData a = gen_planted(10, 200, 50, 42);
  CHECK(a.train.x.rows() == 10);
  CHECK(a.train.size() == 200);
  CHECK(a.test.size() == 50);
  CHECK(a.train.split == Split::train);
  CHECK(a.test.split == Split::test);
  const PlantedData b = gen_planted(10, 200, 50, 42);
  CHECK(a.train.x == b.train.x);
  CHECK(a.test.y == b.test.y);
  CHECK(a.teacher == b.teacher);
  const PlantedData c = gen_planted(10, 200, 50, 43);
  CHECK(a.train.x != c.train.x);
  for (const Dataset* d : {&a.train, &a.test}) {
    for (Eigen::Index j = 0; j < d->size(); ++j) {
      CHECK(d->y(0, j) == (a.teacher.dot(d->x.col(j)) > 0 ? 1.0 : 0.0));
    }
  }
  // Disjoint draws: no test column equals a train column.
  CHECK(a.test.x.col(0) != a.train.x.col(0));
}

TEST_CASE("gen_planted default size label balance") {
  const PlantedData d = gen_planted(10, 25000, 2500, 1);
  CHECK(std::abs(positive_fraction(d.train) - 0.5) <= 0.03);
}

TEST_CASE("gen_planted rejects empty counts") {
  CHECK_THROWS_AS(gen_planted(10, 0, 10, 1), ConfigError);
  CHECK_THROWS_AS(gen_planted(0, 10, 10, 1), ConfigError);
  CHECK_THROWS_AS(gen_planted(10, 10, 0, 1), ConfigError);
}

TEST_CASE("load_csv format") {
  const fs::path dir = temp_dir("csv");
  const Dataset d = load_csv(write_file(dir, "ok.csv", "a,b,y\n1,2,0\n3,4,1\n"));
  CHECK(d.x.rows() == 2);
  CHECK(d.x.cols() == 2);
  CHECK(d.x(0, 0) == 1.0);
  CHECK(d.x(1, 0) == 2.0);
  CHECK(d.x(0, 1) == 3.0);
  CHECK(d.y(0, 0) == 0.0);
  CHECK(d.y(0, 1) == 1.0);
}

TEST_CASE("load_csv errors") {
  const fs::path dir = temp_dir("csv_err");
  CHECK_THROWS_AS(load_csv(write_file(dir, "empty.csv", "a,b,y\n")), InputError);
  CHECK_THROWS_AS(load_csv(write_file(dir, "nothing.csv", "")), InputError);
  const std::string bad_cell = message_of(write_file(dir, "cell.csv", "a,b,y\n1,2,0\n3,x,1\n"));
  CHECK(bad_cell.find("line 3") != std::string::npos);
  CHECK(bad_cell.find("column 2") != std::string::npos);
  const std::string ragged = message_of(write_file(dir, "ragged.csv", "a,b,y\n1,2\n"));
  CHECK(ragged.find("line 2") != std::string::npos);
  CHECK_THROWS_AS(load_csv(dir / "missing.csv"), IoError);
}

TEST_CASE("save_csv and planted cache round trip exactly") {
  const fs::path dir = temp_dir("roundtrip");
  const PlantedData d = gen_planted(4, 30, 10, 9);
  save_planted(d, dir);
  const PlantedData back = load_planted(dir);
  CHECK(back.train.x == d.train.x);
  CHECK(back.train.y == d.train.y);
  CHECK(back.test.x == d.test.x);
  CHECK(back.teacher == d.teacher);
  CHECK(back.seed == d.seed);
}

TEST_CASE("minibatches") {
  Rng rng(5);
  const auto batches = minibatches(10, 4, rng);
  REQUIRE(batches.size() == 3);
  CHECK(batches[0].size() == 4);
  CHECK(batches[1].size() == 4);
  CHECK(batches[2].size() == 2);
  std::set<Eigen::Index> seen;
  for (const auto& b : batches) seen.insert(b.begin(), b.end());
  CHECK(seen.size() == 10);
  CHECK(*seen.begin() == 0);
  CHECK(*seen.rbegin() == 9);
  const auto second = minibatches(10, 4, rng);
  CHECK(second != batches);
  CHECK_THROWS(minibatches(10, 0, rng));
}

TEST_CASE("gather picks columns") {
  const PlantedData d = gen_planted(3, 8, 2, 2);
  const Batch b = gather(d.train, {5, 1});
  CHECK(b.x.col(0) == d.train.x.col(5));
  CHECK(b.x.col(1) == d.train.x.col(1));
  CHECK(b.y(0, 0) == d.train.y(0, 5));
}
