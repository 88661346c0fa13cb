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

#include "tlkfac/stats.hpp"

#include <algorithm>
#include <sstream>

#include "tlkfac/errors.hpp"

namespace tlkfac {

namespace {

// Mean of per-sample outer products left_b right_b^T. The division is a
// separate step so a column of ones yields exactly 1.
Matrix batch_mean_outer(const Matrix& left, const Matrix& right) {
  Matrix m = left * right.transpose();
  m /= static_cast<double>(left.cols());
  return m;
}

// target += (1 - decay) * (estimate - target). Leaves target unchanged when
// the estimate equals it, and reproduces the estimate exactly from zero.
void blend(Matrix& target, const Matrix& estimate, double weight) {
  target += weight * (estimate - target);
}

}  // namespace

CovState::CovState(const Architecture& arch, CovMode mode)
    : mode_(mode), layers_(arch.num_layers()) {
  for (std::size_t p = 0; p < layers_; ++p) {
    const std::size_t first = mode_ == CovMode::full ? 0 : p;
    for (std::size_t q = first; q <= p; ++q) {
      act_.push_back(Matrix::Zero(arch.weight_cols(p), arch.weight_cols(q)));
      grad_.push_back(Matrix::Zero(arch.weight_rows(p), arch.weight_rows(q)));
    }
  }
}

double CovState::decay(std::size_t t) {
  if (t == 0) throw StateError("CovState::decay: t counts from 1");
  return std::min(1.0 - 1.0 / static_cast<double>(t), 0.95);
}

bool CovState::has_pair(std::size_t p, std::size_t q) const {
  if (q > p || p >= layers_) return false;
  return mode_ == CovMode::full || p == q;
}

std::size_t CovState::slot(std::size_t p, std::size_t q) const {
  if (!has_pair(p, q)) {
    std::ostringstream out;
    out << "CovState: pair (" << p << ", " << q << ") is not tracked in "
        << (mode_ == CovMode::full ? "full" : "diagonal") << " mode with "
        << layers_ << " layers";
    throw StateError(out.str());
  }
  return mode_ == CovMode::full ? p * (p + 1) / 2 + q : p;
}

const Matrix& CovState::act_cov(std::size_t p, std::size_t q) const {
  return act_[slot(p, q)];
}

const Matrix& CovState::grad_cov(std::size_t p, std::size_t q) const {
  return grad_[slot(p, q)];
}

void CovState::set_act_cov(std::size_t p, std::size_t q, Matrix m) {
  auto& target = act_[slot(p, q)];
  if (m.rows() != target.rows() || m.cols() != target.cols()) {
    throw DimensionError("CovState::set_act_cov: shape mismatch");
  }
  target = std::move(m);
}

void CovState::set_grad_cov(std::size_t p, std::size_t q, Matrix m) {
  auto& target = grad_[slot(p, q)];
  if (m.rows() != target.rows() || m.cols() != target.cols()) {
    throw DimensionError("CovState::set_grad_cov: shape mismatch");
  }
  target = std::move(m);
}

void CovState::update(const BatchCache& cache) {
  if (cache.a_bar.size() != layers_ || cache.g.size() != layers_) {
    throw StateError(
        "CovState::update: cache has no per-sample derivatives for every layer "
        "(run backward first)");
  }
  const double weight = 1.0 - decay(t_);
  for (std::size_t p = 0; p < layers_; ++p) {
    const Matrix& a_p = cache.a_bar[p];
    const Matrix& g_p = cache.g[p];
    if (g_p.cols() != a_p.cols() || a_p.rows() != act_[slot(p, p)].rows() ||
        g_p.rows() != grad_[slot(p, p)].rows()) {
      throw StateError("CovState::update: cache shapes do not match layer " +
                       std::to_string(p));
    }
    const std::size_t first = mode_ == CovMode::full ? 0 : p;
    for (std::size_t q = first; q <= p; ++q) {
      const std::size_t k = slot(p, q);
      if (p == q) {
        blend(act_[k], symmetrized(batch_mean_outer(a_p, a_p)), weight);
        blend(grad_[k], symmetrized(batch_mean_outer(g_p, g_p)), weight);
      } else {
        blend(act_[k], batch_mean_outer(a_p, cache.a_bar[q]), weight);
        blend(grad_[k], batch_mean_outer(g_p, cache.g[q]), weight);
      }
    }
  }
  ++t_;
}

CovMemory CovState::memory_report() const {
  CovMemory report;
  report.act_matrices = act_.size();
  report.grad_matrices = grad_.size();
  for (const auto& m : act_) report.scalars += static_cast<std::size_t>(m.size());
  for (const auto& m : grad_) report.scalars += static_cast<std::size_t>(m.size());
  return report;
}

}  // namespace tlkfac
