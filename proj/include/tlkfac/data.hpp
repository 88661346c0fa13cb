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

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tlkfac/linalg.hpp"
#include "tlkfac/rng.hpp"

namespace tlkfac {

enum class Split { train, test };

struct Dataset {
  Matrix x;  // features x samples
  Matrix y;  // 1 x samples (class labels), or target rows for regression
  Split split = Split::train;
  std::uint64_t seed = 0;

  Eigen::Index size() const { return x.cols(); }
  Eigen::Index dim() const { return x.rows(); }
};

/// Train/test pair labelled by a hidden linear teacher.
struct PlantedData {
  Dataset train;
  Dataset test;
  Vector teacher;
  std::uint64_t seed = 0;
};

/// Gaussian inputs of dimension d_in with labels 1[w^T x > 0] for a
/// Gaussian teacher w without bias. Draw order from one stream seeded by
/// seed: teacher, train inputs, test inputs.
PlantedData gen_planted(Eigen::Index d_in, Eigen::Index n_train,
                        Eigen::Index n_test, std::uint64_t seed);

/// Reads a CSV with a header row; the last column is the label, the rest
/// are numeric features. Throws InputError naming the line (and cell).
Dataset load_csv(const std::filesystem::path& path);

/// Writes the load_csv format with round-trip precision.
void save_csv(const Dataset& data, const std::filesystem::path& path);

/// Dataset cache: train.csv, test.csv and teacher.json inside dir.
void save_planted(const PlantedData& data, const std::filesystem::path& dir);
PlantedData load_planted(const std::filesystem::path& dir);

/// One epoch of batches over a fresh random permutation. All batches have
/// batch_size samples except possibly the last.
std::vector<std::vector<Eigen::Index>> minibatches(Eigen::Index n,
                                                   Eigen::Index batch_size,
                                                   Rng& rng);

struct Batch {
  Matrix x;
  Matrix y;
};

Batch gather(const Dataset& data, const std::vector<Eigen::Index>& indices);

/// Fraction of label entries equal to 1.
double positive_fraction(const Dataset& data);

}  // namespace tlkfac
