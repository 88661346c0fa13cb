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
#include <string_view>
#include <variant>
#include <vector>

#include "tlkfac/linalg.hpp"
#include "tlkfac/network.hpp"
#include "tlkfac/stats.hpp"

namespace tlkfac {

enum class DampingMode { eigendecomposition, factored_tikhonov };

std::string_view to_string(DampingMode m);
DampingMode parse_damping_mode(std::string_view name);

struct DampingConfig {
  double lambda = 1e-2;
  DampingMode mode = DampingMode::eigendecomposition;
};

/// Exact damped inverse: eigenpairs of both factors.
struct EigFactors {
  SymEig act;
  SymEig grad;
};

/// Factored Tikhonov: Cholesky factors of (A + pi sqrt(lambda) I) and
/// (G + sqrt(lambda) / pi I).
struct TikhonovFactors {
  double pi;
  Cholesky act;
  Cholesky grad;
};

using LayerInverse = std::variant<EigFactors, TikhonovFactors>;

struct BlockInverse {
  DampingConfig damping;
  std::vector<LayerInverse> layers;
};

/// sqrt((tr(A) / rows(A)) / (tr(G) / rows(G))). Throws NumericalError when
/// tr(G) is not positive.
double tikhonov_pi(const Matrix& act, const Matrix& grad);

/// Per-layer inverse representations from the diagonal factor pairs.
/// Eigenvalues below -1e-8 * max(1, largest) throw NumericalError; smaller
/// negative round-off is clamped to zero.
BlockInverse build_block_inverses(const CovState& cov, const DampingConfig& cfg);

/// Solves (A kron G + lambda I) vec(X) = vec(grad) in the factors' eigenbases.
Matrix apply_block_eig(const Matrix& grad, const EigFactors& eig, double lambda);

/// (G + sqrt(lambda)/pi I)^{-1} grad (A + pi sqrt(lambda) I)^{-1}
Matrix apply_block_tikhonov(const Matrix& grad, const TikhonovFactors& factors);

Matrix apply_block(const Matrix& grad, const LayerInverse& inv, double lambda);

/// Block-diagonal (one-level) preconditioning of every layer.
GradVec apply_one_level(const BlockInverse& blocks, const GradVec& grad);

/// Coarse Fisher: entry (p, q) is the sum of all entries of the (p, q)
/// Kronecker block, i.e. sum(act_cov(p, q)) * sum(grad_cov(p, q)).
struct CoarseState {
  Matrix fisher;  // L x L, exactly symmetric
  std::optional<Cholesky> factor;
  double factor_damping = 0.0;  // damping actually added before factoring
  bool disabled = false;        // set when the damped matrix stayed indefinite
};

/// Requires full-mode statistics.
CoarseState assemble_coarse(const CovState& cov);

/// Factors fisher + lambda I. If that is not positive definite, retries
/// once with fisher + 11 lambda I; if that also fails the coarse term is
/// disabled and a warning is logged. Returns false when disabled.
bool prepare_coarse(CoarseState& coarse, double lambda);

/// Z^T (F_coarse + lambda I)^{-1} Z grad on the flat layout given by
/// offsets (size L + 1). Uses the prepared factor when there is one (its
/// damping may be the fallback value); otherwise factors fisher + lambda I.
Vector coarse_correction(const CoarseState& coarse, const Vector& grad,
                         const std::vector<Eigen::Index>& offsets, double lambda);

/// Same on per-layer matrices.
GradVec coarse_correction(const CoarseState& coarse, const GradVec& grad,
                          double lambda);

/// Block-diagonal term plus, when coarse is given and enabled, the coarse
/// correction. Passing no coarse state gives the one-level result.
GradVec apply_two_level(const BlockInverse& blocks, const CoarseState* coarse,
                        const GradVec& grad);

/// KL-clipping factor min(1, sqrt(kappa / (lr^2 * sum_i |<P_i, R_i>|))),
/// summing per-layer inner products of preconditioned and raw gradients.
/// Returns 1 when the sum is zero.
double kl_clip(const GradVec& preconditioned, const GradVec& raw, double lr,
               double kappa);

}  // namespace tlkfac
