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

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tlkfac/linalg.hpp"
#include "tlkfac/rng.hpp"

namespace tlkfac {

enum class Activation { identity, relu, tanh };
enum class LossKind { bernoulli_logit, softmax_ce, mse };

std::string_view to_string(Activation a);
std::string_view to_string(LossKind k);
Activation parse_activation(std::string_view name);
LossKind parse_loss(std::string_view name);

/// Layer i (0-based here) maps d_i inputs to d_{i+1} outputs. Optional
/// batch normalization sits between the affine map and the activation.
struct Architecture {
  std::vector<Eigen::Index> layer_dims;  // d_0 .. d_L
  std::vector<Activation> activations;   // one per layer
  std::vector<bool> batchnorm;           // one per layer
  LossKind loss = LossKind::bernoulli_logit;

  /// Hidden layers share one activation and batch-norm flag; the output
  /// layer is always identity without batch norm.
  static Architecture mlp(std::vector<Eigen::Index> dims, Activation hidden,
                          bool hidden_batchnorm, LossKind loss);

  std::size_t num_layers() const { return layer_dims.size() - 1; }
  Eigen::Index input_dim() const { return layer_dims.front(); }
  Eigen::Index output_dim() const { return layer_dims.back(); }

  /// Rows and columns of weight matrix i: d_{i+1} x (d_i + 1).
  Eigen::Index weight_rows(std::size_t i) const { return layer_dims[i + 1]; }
  Eigen::Index weight_cols(std::size_t i) const { return layer_dims[i] + 1; }
  Eigen::Index layer_size(std::size_t i) const {
    return weight_rows(i) * weight_cols(i);
  }

  /// Offsets of each layer in the flat parameter vector; size L + 1.
  std::vector<Eigen::Index> layer_offsets() const;
  Eigen::Index num_params() const { return layer_offsets().back(); }

  /// Throws ConfigError describing the first violated constraint.
  void validate() const;
};

struct BatchNormParams {
  Vector scale;
  Vector shift;
  Vector running_mean;
  Vector running_var;
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Weights carry the bias as their last column. Batch-norm parameters are
/// kept outside the flat parameter vector.
struct Params {
  std::vector<Matrix> weights;
  std::vector<std::optional<BatchNormParams>> bn;
};

/// Gaussian weights with standard deviation sqrt(1 / fan_in), zero biases,
/// unit batch-norm scale and zero shift.
Params init_params(const Architecture& arch, Rng& rng);

/// Per-layer weight gradients, same shapes as Params::weights.
struct GradVec {
  std::vector<Matrix> layers;
};

/// Column-stacks each matrix and concatenates in layer order.
Vector flatten(const std::vector<Matrix>& layers);
Vector flatten(const GradVec& g);
std::vector<Matrix> unflatten_layers(const Vector& v, const Architecture& arch);
GradVec unflatten(const Vector& v, const Architecture& arch);

struct BatchNormCache {
  Matrix normalized;  // (s - mean) * inv_std
  Vector mean;
  Vector var;
  Vector inv_std;
};

/// Everything backward and the curvature statistics need from one forward
/// pass over a batch of B columns.
struct BatchCache {
  std::vector<Matrix> a_bar;  // layer inputs with a trailing row of ones
  std::vector<Matrix> s;      // affine outputs W_i a_bar_i
  std::vector<Matrix> z;      // activation inputs (after batch norm)
  std::vector<Matrix> g;      // per-sample d loss_b / d s_i, filled by backward
  std::vector<std::optional<BatchNormCache>> bn;
  Matrix output;
  bool training = true;

  Eigen::Index batch_size() const { return output.cols(); }
};

enum class Mode { training, evaluation };

/// Forward pass. In training mode batch norm uses batch statistics; in
/// evaluation mode it uses the running statistics stored in params.
BatchCache forward(const Architecture& arch, const Params& params,
                   const Matrix& x, Mode mode = Mode::training);

struct BatchNormGrad {
  Vector scale;
  Vector shift;
};

struct Gradients {
  GradVec weights;  // batch-mean gradient
  std::vector<std::optional<BatchNormGrad>> bn;
};

/// Backward pass for labels y. Returns the gradient of the batch-mean loss
/// and stores in cache.g the per-sample derivatives, scaled so that
/// dW_i = (1/B) g_i a_bar_i^T.
Gradients backward(const Architecture& arch, const Params& params,
                   BatchCache& cache, const Matrix& y);

/// Mean negative log-likelihood of y under the network output.
///  bernoulli_logit: y is 1 x B in {0, 1}
///  softmax_ce:      y is 1 x B of class indices
///  mse:             y is d_L x B, loss 0.5 * ||y - f||^2 per sample
double loss(const Architecture& arch, const Matrix& output, const Matrix& y);

/// Fraction of correct predictions; NaN for mse.
double accuracy(const Architecture& arch, const Matrix& output,
                const Matrix& y);

/// Draws one label per column from the model's predictive distribution.
Matrix sample_labels(const Architecture& arch, const Matrix& output, Rng& rng);

/// Moves running batch-norm statistics toward the batch statistics in cache.
void update_running_stats(Params& params, const BatchCache& cache);

}  // namespace tlkfac
