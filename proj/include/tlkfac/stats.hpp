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

#include <cstddef>
#include <vector>

#include "tlkfac/linalg.hpp"
#include "tlkfac/network.hpp"

namespace tlkfac {

enum class CovMode { diagonal, full };

struct CovMemory {
  std::size_t act_matrices = 0;
  std::size_t grad_matrices = 0;
  std::size_t scalars = 0;
};

/// Running Kronecker-factor estimates for an L-layer network.
///
/// Layers are indexed 0..L-1 and pairs (p, q) always satisfy q <= p.
///   act_cov(p, q)  = E[a_bar_p a_bar_q^T]   of shape (d_p+1) x (d_q+1)
///   grad_cov(p, q) = E[g_p g_q^T]           of shape d_{p+1} x d_{q+1}
/// where a_bar_p is the input of layer p and g_p the derivative of the loss
/// w.r.t. its affine output. Diagonal mode tracks only p == q; full mode
/// tracks the whole lower triangle.
///
/// Each update blends the minibatch estimate into an exponential moving
/// average with decay min(1 - 1/t, 0.95), t counting updates from 1.
class CovState {
 public:
  CovState() = default;
  CovState(const Architecture& arch, CovMode mode);

  static double decay(std::size_t t);

  /// Folds in statistics from a cache whose g was filled by backward.
  void update(const BatchCache& cache);

  CovMode mode() const { return mode_; }
  std::size_t num_layers() const { return layers_; }
  /// Index of the next update (1 before any update).
  std::size_t t() const { return t_; }
  void set_t(std::size_t t) { t_ = t; }

  bool has_pair(std::size_t p, std::size_t q) const;
  const Matrix& act_cov(std::size_t p, std::size_t q) const;
  const Matrix& grad_cov(std::size_t p, std::size_t q) const;
  void set_act_cov(std::size_t p, std::size_t q, Matrix m);
  void set_grad_cov(std::size_t p, std::size_t q, Matrix m);

  CovMemory memory_report() const;

 private:
  std::size_t slot(std::size_t p, std::size_t q) const;

  CovMode mode_ = CovMode::diagonal;
  std::size_t layers_ = 0;
  std::size_t t_ = 1;
  std::vector<Matrix> act_;
  std::vector<Matrix> grad_;
};

}  // namespace tlkfac
