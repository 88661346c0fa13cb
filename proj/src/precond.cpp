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

#include "tlkfac/precond.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <sstream>

#include "tlkfac/errors.hpp"

namespace tlkfac {

namespace {

constexpr double kNegativeEigTolerance = 1e-8;

// Tolerance is relative to the largest eigenvalue (at least 1), so
// round-off on large factors is not mistaken for indefiniteness. Values
// inside the tolerance are clamped to zero.
void check_eigenvalues(SymEig& eig, std::string_view factor, std::size_t layer) {
  if (eig.values.size() == 0) return;
  const double scale = std::max(1.0, std::abs(eig.values(eig.values.size() - 1)));
  if (eig.values(0) < -kNegativeEigTolerance * scale) {
    std::ostringstream out;
    out << "layer " << layer << ": " << factor
        << " factor has negative eigenvalue " << eig.values(0)
        << " (largest " << eig.values(eig.values.size() - 1) << ")";
    throw NumericalError(out.str());
  }
  eig.values = eig.values.cwiseMax(0.0);
}

Matrix add_to_diagonal(Matrix m, double value) {
  m.diagonal().array() += value;
  return m;
}

}  // namespace

std::string_view to_string(DampingMode m) {
  return m == DampingMode::eigendecomposition ? "eig" : "tikhonov";
}

DampingMode parse_damping_mode(std::string_view name) {
  if (name == "eig" || name == "eigendecomposition") {
    return DampingMode::eigendecomposition;
  }
  if (name == "tikhonov" || name == "factored_tikhonov") {
    return DampingMode::factored_tikhonov;
  }
  throw ConfigError("unknown damping mode '" + std::string(name) +
                    "' (valid: eig, tikhonov)");
}

double tikhonov_pi(const Matrix& act, const Matrix& grad) {
  const double act_trace = act.trace() / static_cast<double>(act.rows());
  const double grad_trace = grad.trace() / static_cast<double>(grad.rows());
  if (!(grad_trace > 0.0)) {
    throw NumericalError(
        "gradient factor has zero trace (dead layer); use a larger batch or "
        "a larger damping");
  }
  if (!(act_trace > 0.0)) {
    throw NumericalError("activation factor has non-positive trace");
  }
  return std::sqrt(act_trace / grad_trace);
}

BlockInverse build_block_inverses(const CovState& cov, const DampingConfig& cfg) {
  if (!(cfg.lambda > 0.0)) throw ConfigError("damping: lambda must be > 0");
  BlockInverse out;
  out.damping = cfg;
  out.layers.reserve(cov.num_layers());
  for (std::size_t p = 0; p < cov.num_layers(); ++p) {
    const Matrix& act = cov.act_cov(p, p);
    const Matrix& grad = cov.grad_cov(p, p);
    if (cfg.mode == DampingMode::eigendecomposition) {
      EigFactors f{sym_eig(act), sym_eig(grad)};
      check_eigenvalues(f.act, "activation", p);
      check_eigenvalues(f.grad, "gradient", p);
      out.layers.emplace_back(std::move(f));
    } else {
      const double pi = tikhonov_pi(act, grad);
      const double root = std::sqrt(cfg.lambda);
      try {
        out.layers.emplace_back(TikhonovFactors{
            pi, Cholesky(add_to_diagonal(symmetrized(act), pi * root)),
            Cholesky(add_to_diagonal(symmetrized(grad), root / pi))});
      } catch (const NumericalError& e) {
        throw NumericalError("layer " + std::to_string(p) + ": damped factor: " +
                             e.what());
      }
    }
  }
  return out;
}

Matrix apply_block_eig(const Matrix& grad, const EigFactors& eig, double lambda) {
  const Matrix& q_act = eig.act.vectors;
  const Matrix& q_grad = eig.grad.vectors;
  if (grad.rows() != q_grad.rows() || grad.cols() != q_act.rows()) {
    throw DimensionError("apply_block_eig: gradient shape does not match factors");
  }
  Matrix v = q_grad.transpose() * grad * q_act;
  for (Eigen::Index b = 0; b < v.cols(); ++b) {
    for (Eigen::Index a = 0; a < v.rows(); ++a) {
      const double denom = eig.act.values(b) * eig.grad.values(a) + lambda;
      if (!(denom > 0.0)) {
        std::ostringstream out;
        out << "apply_block_eig: damped eigenvalue " << denom
            << " is not positive (lambda " << lambda << ")";
        throw NumericalError(out.str());
      }
      v(a, b) /= denom;
    }
  }
  return q_grad * v * q_act.transpose();
}

Matrix apply_block_tikhonov(const Matrix& grad, const TikhonovFactors& factors) {
  if (grad.rows() != factors.grad.size() || grad.cols() != factors.act.size()) {
    throw DimensionError("apply_block_tikhonov: gradient shape does not match factors");
  }
  return factors.act.solve_right(factors.grad.solve(grad));
}

Matrix apply_block(const Matrix& grad, const LayerInverse& inv, double lambda) {
  if (const auto* eig = std::get_if<EigFactors>(&inv)) {
    return apply_block_eig(grad, *eig, lambda);
  }
  return apply_block_tikhonov(grad, std::get<TikhonovFactors>(inv));
}

GradVec apply_one_level(const BlockInverse& blocks, const GradVec& grad) {
  if (grad.layers.size() != blocks.layers.size()) {
    throw DimensionError("apply_one_level: layer count mismatch");
  }
  GradVec out;
  out.layers.reserve(grad.layers.size());
  for (std::size_t i = 0; i < grad.layers.size(); ++i) {
    out.layers.push_back(
        apply_block(grad.layers[i], blocks.layers[i], blocks.damping.lambda));
  }
  return out;
}

CoarseState assemble_coarse(const CovState& cov) {
  if (cov.mode() != CovMode::full) {
    throw StateError("assemble_coarse: needs full-mode statistics (cross-layer pairs)");
  }
  const auto n = static_cast<Eigen::Index>(cov.num_layers());
  Matrix lower = Matrix::Zero(n, n);
  for (Eigen::Index p = 0; p < n; ++p) {
    for (Eigen::Index q = 0; q <= p; ++q) {
      const auto up = static_cast<std::size_t>(p);
      const auto uq = static_cast<std::size_t>(q);
      lower(p, q) = kron_elem_sum(cov.act_cov(up, uq), cov.grad_cov(up, uq));
    }
  }
  CoarseState coarse;
  coarse.fisher = lower + lower.transpose();
  coarse.fisher.diagonal() -= lower.diagonal();
  for (Eigen::Index p = 0; p < n; ++p) {
    if (coarse.fisher(p, p) < -1e-8) {
      std::ostringstream out;
      out << "assemble_coarse: diagonal entry " << p << " is negative ("
          << coarse.fisher(p, p) << ")";
      throw NumericalError(out.str());
    }
  }
  return coarse;
}

bool prepare_coarse(CoarseState& coarse, double lambda) {
  coarse.factor.reset();
  coarse.disabled = false;
  for (double extra : {lambda, 11.0 * lambda}) {
    try {
      coarse.factor.emplace(add_to_diagonal(coarse.fisher, extra));
      coarse.factor_damping = extra;
      return true;
    } catch (const NumericalError& e) {
      std::clog << "warning: coarse Fisher + " << extra
                << " I is not positive definite: " << e.what() << "\n";
    }
  }
  std::clog << "warning: coarse correction disabled until the next "
               "preconditioner refresh\n";
  coarse.disabled = true;
  return false;
}

namespace {

Vector coarse_solve(const CoarseState& coarse, const Vector& sums, double lambda) {
  if (sums.size() != coarse.fisher.rows()) {
    throw DimensionError("coarse_correction: layer count mismatch");
  }
  if (coarse.factor) {
    return coarse.factor->solve(sums);
  }
  try {
    return spd_solve(add_to_diagonal(coarse.fisher, lambda), sums);
  } catch (const NumericalError& e) {
    throw NumericalError(std::string("coarse_correction: ") + e.what());
  }
}

}  // namespace

Vector coarse_correction(const CoarseState& coarse, const Vector& grad,
                         const std::vector<Eigen::Index>& offsets, double lambda) {
  if (offsets.empty() || grad.size() != offsets.back()) {
    throw DimensionError("coarse_correction: gradient length does not match layout");
  }
  const auto n = static_cast<Eigen::Index>(offsets.size() - 1);
  Vector sums(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    sums(i) = grad.segment(offsets[k], offsets[k + 1] - offsets[k]).sum();
  }
  const Vector w = coarse_solve(coarse, sums, lambda);
  Vector out(grad.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    out.segment(offsets[k], offsets[k + 1] - offsets[k]).setConstant(w(i));
  }
  return out;
}

GradVec coarse_correction(const CoarseState& coarse, const GradVec& grad,
                          double lambda) {
  const auto n = static_cast<Eigen::Index>(grad.layers.size());
  Vector sums(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    sums(i) = grad.layers[static_cast<std::size_t>(i)].sum();
  }
  const Vector w = coarse_solve(coarse, sums, lambda);
  GradVec out;
  out.layers.reserve(grad.layers.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& g = grad.layers[static_cast<std::size_t>(i)];
    out.layers.push_back(Matrix::Constant(g.rows(), g.cols(), w(i)));
  }
  return out;
}

GradVec apply_two_level(const BlockInverse& blocks, const CoarseState* coarse,
                        const GradVec& grad) {
  GradVec out = apply_one_level(blocks, grad);
  if (coarse == nullptr || coarse->disabled) return out;
  const GradVec shift = coarse_correction(*coarse, grad, blocks.damping.lambda);
  for (std::size_t i = 0; i < out.layers.size(); ++i) {
    out.layers[i] += shift.layers[i];
  }
  return out;
}

double kl_clip(const GradVec& preconditioned, const GradVec& raw, double lr,
               double kappa) {
  if (!(lr > 0.0) || !(kappa > 0.0)) {
    throw InputError("kl_clip: learning rate and kappa must be > 0");
  }
  if (preconditioned.layers.size() != raw.layers.size()) {
    throw DimensionError("kl_clip: layer count mismatch");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < raw.layers.size(); ++i) {
    total += std::abs(preconditioned.layers[i].cwiseProduct(raw.layers[i]).sum());
  }
  if (total == 0.0) return 1.0;
  return std::min(1.0, std::sqrt(kappa / (lr * lr * total)));
}

}  // namespace tlkfac
