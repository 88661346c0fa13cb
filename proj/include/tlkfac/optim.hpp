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
#include <optional>
#include <string_view>
#include <utility>
#include <vector>

#include "tlkfac/data.hpp"
#include "tlkfac/network.hpp"
#include "tlkfac/precond.hpp"
#include "tlkfac/rng.hpp"
#include "tlkfac/stats.hpp"

namespace tlkfac {

enum class OptimizerKind { sgd, adam, kfac1, kfac2 };

std::string_view to_string(OptimizerKind k);
/// Throws ConfigError listing the valid kinds.
OptimizerKind parse_optimizer(std::string_view name);

/// Which labels drive the curvature statistics.
enum class FisherLabels { sampled, empirical };

std::string_view to_string(FisherLabels f);
FisherLabels parse_fisher_labels(std::string_view name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kfac2;
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 1e-3;
  // K-FAC
  double damping = 1e-2;
  double kappa = 1e-3;
  DampingMode damping_mode = DampingMode::eigendecomposition;
  std::size_t t_stats = 10;
  std::size_t t_inv = 100;
  FisherLabels fisher = FisherLabels::sampled;
  // Adam
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  /// (epoch, multiplier) pairs sorted by epoch.
  std::vector<std::pair<int, double>> lr_schedule;

  bool is_kfac() const {
    return kind == OptimizerKind::kfac1 || kind == OptimizerKind::kfac2;
  }
  void validate() const;
};

/// Base rate times every multiplier whose epoch is <= the current epoch.
double lr_at(int epoch, const OptimizerConfig& cfg);

/// v <- mu v + (grad + beta theta); theta <- theta - lr v.
void sgd_update(Vector& theta, Vector& velocity, const Vector& grad, double lr,
                double momentum, double weight_decay);

/// Bias-corrected Adam on grad + beta theta. step counts from 1.
void adam_update(Vector& theta, Vector& m, Vector& v, const Vector& grad,
                 double lr, double beta1, double beta2, double eps,
                 double weight_decay, std::size_t step);

struct OptimizerState {
  Vector velocity;     // weights, flat layout
  Vector adam_m;
  Vector adam_v;
  Vector bn_velocity;  // batch-norm scale/shift, flat
  Vector bn_adam_m;
  Vector bn_adam_v;
  CovState cov;
  std::optional<BlockInverse> blocks;
  std::optional<CoarseState> coarse;
  std::size_t iteration = 0;  // completed steps
};

struct StepMetrics {
  double loss = 0.0;      // batch loss before the update
  double accuracy = 0.0;
  double nu = 1.0;        // KL-clipping factor (1 for first-order methods)
  bool stats_updated = false;
  bool preconditioner_rebuilt = false;
};

/// Preconditioned K-FAC direction and its clipping factor for a
/// regularized gradient.
struct KfacDirection {
  GradVec direction;
  double nu = 1.0;
};

KfacDirection kfac_direction(const BlockInverse& blocks, const CoarseState* coarse,
                             const GradVec& reg_grad, double lr, double kappa);

/// Batch-norm scale and shift of every normalized layer, concatenated.
Vector flatten_bn(const Params& params);
void unflatten_bn(const Vector& v, Params& params);

class Optimizer {
 public:
  Optimizer(const Architecture& arch, OptimizerConfig cfg);

  /// One training iteration on a batch with learning rate lr.
  StepMetrics step(Params& params, const Batch& batch, Rng& rng, double lr);

  const OptimizerConfig& config() const { return cfg_; }
  const Architecture& architecture() const { return arch_; }
  OptimizerState& state() { return state_; }
  const OptimizerState& state() const { return state_; }

  /// Rebuilds block inverses (and the coarse term for kfac2) from the
  /// current statistics.
  void rebuild_preconditioner();

 private:
  Architecture arch_;
  OptimizerConfig cfg_;
  OptimizerState state_;
};

/// Everything needed to resume a run bit-exactly.
struct Checkpoint {
  Params params;
  OptimizerState state;
  std::string rng_state;
  int epoch = 0;  // completed epochs
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Checkpoint& ckpt, const Architecture& arch,
                     const std::filesystem::path& path);
Checkpoint load_checkpoint(const Architecture& arch,
                           const std::filesystem::path& path);

}  // namespace tlkfac
