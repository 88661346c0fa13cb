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
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tlkfac/data.hpp"
#include "tlkfac/network.hpp"
#include "tlkfac/optim.hpp"

namespace tlkfac {

inline constexpr const char* kVersion = "0.1.0";

/// Header row of run.csv.
inline constexpr const char* kRunCsvHeader =
    "epoch,iteration,train_loss,test_loss,train_acc,test_acc,wall_seconds,lr,nu_mean";

struct ArchitectureSpec {
  /// Either explicit layer_dims (d_0 must match the data), or depth/width
  /// from which dims [d_in, width x (layers - 1), out] are built.
  std::vector<Eigen::Index> layer_dims;
  std::size_t layers = 32;
  Eigen::Index width = 10;
  Activation activation = Activation::identity;
  bool batchnorm = true;
  LossKind loss = LossKind::bernoulli_logit;
  Eigen::Index classes = 2;  // softmax_ce output width
};

enum class DatasetKind { planted, csv, cache };

struct DatasetSpec {
  DatasetKind kind = DatasetKind::planted;
  Eigen::Index d_in = 10;
  Eigen::Index n_train = 25000;
  Eigen::Index n_test = 2500;
  std::optional<std::uint64_t> seed;  // defaults to the run seed
  std::filesystem::path train_path;   // csv
  std::filesystem::path test_path;    // csv
  std::filesystem::path dir;          // cache
};

struct RunConfig {
  ArchitectureSpec architecture;
  DatasetSpec dataset;
  OptimizerConfig optimizer;
  int epochs = 30;
  Eigen::Index batch_size = 512;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir;
  int checkpoint_every = 0;  // epochs; 0 disables
  std::optional<std::filesystem::path> resume;
};

/// Parses the JSON config schema; every error names the offending field.
/// "seed" is mandatory.
RunConfig parse_run_config(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& cfg);
RunConfig load_run_config(const std::filesystem::path& path);

/// Checks values and that referenced input paths exist.
void validate_run_config(const RunConfig& cfg);

struct TrainTest {
  Dataset train;
  Dataset test;
};

TrainTest load_datasets(const RunConfig& cfg);
Architecture build_architecture(const ArchitectureSpec& spec, Eigen::Index d_in);

struct EpochRow {
  int epoch = 0;
  std::size_t iteration = 0;
  double train_loss = 0.0;
  double test_loss = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double wall_seconds = 0.0;
  double lr = 0.0;
  double nu_mean = 1.0;
};

struct RunResult {
  std::vector<EpochRow> rows;
  Params params;
  double initial_train_loss = 0.0;  // training-set loss before any update, batch statistics
};

struct RunOptions {
  bool write_files = true;
  std::ostream* log = nullptr;
};

/// Trains per cfg. With write_files, creates cfg.output_dir and writes
/// run.csv (one row per epoch, flushed as produced), config.echo.json and
/// optional checkpoints.
RunResult run_training(const RunConfig& cfg, const RunOptions& opts = {});

/// Same, on datasets already in memory.
RunResult run_training(const RunConfig& cfg, const TrainTest& data,
                       const RunOptions& opts = {});

std::string format_row(const EpochRow& row);

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
};

/// Sample-weighted loss and accuracy over data in consecutive chunks of
/// batch_size columns. Training mode normalizes each chunk with its own
/// statistics; nothing is updated.
Evaluation evaluate(const Architecture& arch, const Params& params,
                    const Dataset& data, Eigen::Index batch_size, Mode mode);

struct GridSpec {
  std::vector<double> lr;
  std::vector<double> momentum;
  std::vector<double> damping;  // K-FAC only
  std::vector<double> kappa;    // K-FAC only
};

struct CompareConfig {
  RunConfig base;
  std::vector<OptimizerKind> optimizers;
  GridSpec grid;
  std::vector<std::uint64_t> seeds;
  int jobs = 1;
};

CompareConfig parse_compare_config(const nlohmann::json& j);

struct GridPoint {
  OptimizerKind kind;
  double lr;
  double momentum;
  double damping;
  double kappa;
  std::string name;  // directory name
};

/// Expands lr x momentum for every optimizer, times damping x kappa for
/// the K-FAC variants.
std::vector<GridPoint> expand_grid(const CompareConfig& cfg);

struct SummaryRow {
  GridPoint point;
  std::size_t seeds = 0;
  std::size_t completed = 0;
  double final_train_loss_mean = 0.0;
  double final_train_loss_std = 0.0;
  double final_train_loss_ci95 = 0.0;
  double final_test_loss_mean = 0.0;
  double final_test_acc_mean = 0.0;
  int rank = 0;  // 1 = lowest mean final training loss; 0 when no run finished
  std::vector<std::string> failures;
};

struct CompareResult {
  std::vector<SummaryRow> summary;
  /// Per grid point, per completed seed, the epoch rows.
  std::vector<std::vector<std::vector<EpochRow>>> runs;
};

/// Runs every grid point for every seed under out_dir/<point>/seed<s>/ and
/// writes out_dir/summary.csv and out_dir/curves.csv. Failed runs are
/// recorded and the grid continues.
CompareResult run_compare(const CompareConfig& cfg,
                          const std::filesystem::path& out_dir,
                          const RunOptions& opts = {});

/// Half-width of the two-sided 95% Student-t interval of the mean.
double ci95_halfwidth(const std::vector<double>& values);

}  // namespace tlkfac
