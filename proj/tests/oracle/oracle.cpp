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

#include "oracle.hpp"

#include <cmath>

#include "tlkfac/errors.hpp"

namespace tlkfac::oracle {

namespace {

void require_small(const Architecture& arch) {
  if (arch.num_params() > kMaxParams) {
    throw SizeError("oracle: network has " + std::to_string(arch.num_params()) +
                    " parameters, cap is " + std::to_string(kMaxParams));
  }
}

Matrix inverse_spd(const Matrix& m) {
  Eigen::LDLT<Matrix> ldlt(m);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
    throw NumericalError("oracle: matrix is not positive definite");
  }
  return ldlt.solve(Matrix::Identity(m.rows(), m.cols()));
}

}  // namespace

Matrix dense_ftilde(const CovState& cov, const Architecture& arch) {
  require_small(arch);
  const auto offsets = arch.layer_offsets();
  const Eigen::Index n = offsets.back();
  Matrix f = Matrix::Zero(n, n);
  for (std::size_t p = 0; p < arch.num_layers(); ++p) {
    for (std::size_t q = 0; q <= p; ++q) {
      if (!cov.has_pair(p, q)) continue;
      const Matrix block = dense_kron(cov.act_cov(p, q), cov.grad_cov(p, q));
      f.block(offsets[p], offsets[q], block.rows(), block.cols()) = block;
      if (p != q) {
        f.block(offsets[q], offsets[p], block.cols(), block.rows()) = block.transpose();
      }
    }
  }
  return f;
}

Matrix restriction(const Architecture& arch, std::size_t layer) {
  const auto offsets = arch.layer_offsets();
  const Eigen::Index rows = arch.layer_size(layer);
  Matrix v = Matrix::Zero(rows, offsets.back());
  for (Eigen::Index r = 0; r < rows; ++r) v(r, offsets[layer] + r) = 1.0;
  return v;
}

Matrix coarse_restriction(const Architecture& arch) {
  const auto offsets = arch.layer_offsets();
  const auto layers = static_cast<Eigen::Index>(arch.num_layers());
  Matrix z = Matrix::Zero(layers, offsets.back());
  for (Eigen::Index i = 0; i < layers; ++i) {
    for (Eigen::Index j = 0; j < offsets.back(); ++j) {
      const bool in_layer = j >= offsets[static_cast<std::size_t>(i)] &&
                            j < offsets[static_cast<std::size_t>(i) + 1];
      z(i, j) = in_layer ? 1.0 : 0.0;
    }
  }
  return z;
}

Matrix dense_one_level_operator(const CovState& cov, const Architecture& arch,
                                double lambda, DampingMode mode) {
  require_small(arch);
  const Eigen::Index n = arch.num_params();
  Matrix op = Matrix::Zero(n, n);
  for (std::size_t i = 0; i < arch.num_layers(); ++i) {
    const Matrix& a = cov.act_cov(i, i);
    const Matrix& g = cov.grad_cov(i, i);
    Matrix block;
    if (mode == DampingMode::eigendecomposition) {
      block = dense_kron(a, g);
      block.diagonal().array() += lambda;
    } else {
      const double pi = std::sqrt((a.trace() / static_cast<double>(a.rows())) /
                                  (g.trace() / static_cast<double>(g.rows())));
      const double root = std::sqrt(lambda);
      block = dense_kron(a + pi * root * Matrix::Identity(a.rows(), a.cols()),
                         g + (root / pi) * Matrix::Identity(g.rows(), g.cols()));
    }
    const Matrix v = restriction(arch, i);
    op += v.transpose() * inverse_spd(block) * v;
  }
  return op;
}

Matrix dense_two_level_operator(const CovState& cov, const Architecture& arch,
                                double lambda, DampingMode mode) {
  Matrix op = dense_one_level_operator(cov, arch, lambda, mode);
  const Matrix z = coarse_restriction(arch);
  Matrix coarse = z * dense_ftilde(cov, arch) * z.transpose();
  coarse.diagonal().array() += lambda;
  op += z.transpose() * inverse_spd(coarse) * z;
  return op;
}

Matrix coarse_by_block_sums(const CovState& cov) {
  const auto n = static_cast<Eigen::Index>(cov.num_layers());
  Matrix c(n, n);
  for (Eigen::Index p = 0; p < n; ++p) {
    for (Eigen::Index q = 0; q <= p; ++q) {
      const auto up = static_cast<std::size_t>(p);
      const auto uq = static_cast<std::size_t>(q);
      const double s = dense_kron(cov.act_cov(up, uq), cov.grad_cov(up, uq)).sum();
      c(p, q) = s;
      c(q, p) = s;
    }
  }
  return c;
}

Matrix coarse_by_chain(const CovState& cov) {
  const auto n = static_cast<Eigen::Index>(cov.num_layers());
  Matrix c(n, n);
  for (Eigen::Index p = 0; p < n; ++p) {
    for (Eigen::Index q = 0; q <= p; ++q) {
      const auto up = static_cast<std::size_t>(p);
      const auto uq = static_cast<std::size_t>(q);
      const Matrix& a = cov.act_cov(up, uq);  // (d_p + 1) x (d_q + 1)
      const Matrix& g = cov.grad_cov(up, uq);  // d_{p+1} x d_{q+1}
      const Matrix ones = Matrix::Ones(g.cols(), a.cols());
      const double s = (g * ones * a.transpose()).sum();
      c(p, q) = s;
      c(q, p) = s;
    }
  }
  return c;
}

GradVec fd_gradient(const Architecture& arch, const Params& params,
                    const Matrix& x, const Matrix& y, double step) {
  if (step < 1e-6 || step > 1e-3) {
    throw InputError("fd_gradient: step must be in [1e-6, 1e-3]");
  }
  GradVec out;
  Params work = params;
  for (std::size_t i = 0; i < params.weights.size(); ++i) {
    Matrix g(params.weights[i].rows(), params.weights[i].cols());
    for (Eigen::Index c = 0; c < g.cols(); ++c) {
      for (Eigen::Index r = 0; r < g.rows(); ++r) {
        const double keep = work.weights[i](r, c);
        work.weights[i](r, c) = keep + step;
        const double up = loss(arch, forward(arch, work, x).output, y);
        work.weights[i](r, c) = keep - step;
        const double down = loss(arch, forward(arch, work, x).output, y);
        work.weights[i](r, c) = keep;
        g(r, c) = (up - down) / (2.0 * step);
      }
    }
    out.layers.push_back(std::move(g));
  }
  return out;
}

Matrix fd_jacobian(const Architecture& arch, const Params& params,
                   const Vector& x, double step) {
  require_small(arch);
  const Matrix input = x;
  Vector theta = flatten(params.weights);
  Matrix jac(arch.output_dim(), theta.size());
  Params work = params;
  for (Eigen::Index k = 0; k < theta.size(); ++k) {
    const double keep = theta(k);
    theta(k) = keep + step;
    work.weights = unflatten_layers(theta, arch);
    const Matrix up = forward(arch, work, input).output;
    theta(k) = keep - step;
    work.weights = unflatten_layers(theta, arch);
    const Matrix down = forward(arch, work, input).output;
    theta(k) = keep;
    jac.col(k) = (up - down).col(0) / (2.0 * step);
  }
  return jac;
}

MonteCarloFisher mc_fisher(const Architecture& arch, const Params& params,
                           const Matrix& inputs, std::size_t samples, Rng& rng) {
  require_small(arch);
  for (bool bn : arch.batchnorm) {
    if (bn) throw InputError("mc_fisher: batch norm couples samples");
  }
  const Eigen::Index n = arch.num_params();
  Matrix sum = Matrix::Zero(n, n);
  Matrix sum_sq = Matrix::Zero(n, n);
  for (std::size_t s = 0; s < samples; ++s) {
    const Eigen::Index col = static_cast<Eigen::Index>(
        rng.below(static_cast<std::uint64_t>(inputs.cols())));
    BatchCache cache = forward(arch, params, inputs.col(col));
    const Matrix y = sample_labels(arch, cache.output, rng);
    const Vector g = flatten(backward(arch, params, cache, y).weights);
    const Matrix outer = g * g.transpose();
    sum += outer;
    sum_sq += outer.cwiseProduct(outer);
  }
  const double count = static_cast<double>(samples);
  MonteCarloFisher out;
  out.mean = sum / count;
  const Matrix var =
      ((sum_sq / count - out.mean.cwiseProduct(out.mean)) * (count / (count - 1.0)))
          .cwiseMax(0.0);
  out.std_error = (var / count).cwiseSqrt();
  return out;
}

Matrix exact_gauss_newton(const Architecture& arch, const Params& params,
                          const Matrix& inputs) {
  if (arch.loss != LossKind::mse) {
    throw InputError("exact_gauss_newton: only the unit-variance Gaussian output is supported");
  }
  const Eigen::Index n = arch.num_params();
  Matrix f = Matrix::Zero(n, n);
  for (Eigen::Index c = 0; c < inputs.cols(); ++c) {
    const Matrix j = fd_jacobian(arch, params, inputs.col(c), 1e-5);
    f += j.transpose() * j;
  }
  return f / static_cast<double>(inputs.cols());
}

Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = rng.normal();
  }
  return m;
}

Matrix random_spd(Eigen::Index n, Rng& rng, double lo, double hi) {
  const Matrix q = Eigen::HouseholderQR<Matrix>(random_matrix(n, n, rng)).householderQ();
  Vector d(n);
  for (Eigen::Index i = 0; i < n; ++i) d(i) = lo + (hi - lo) * rng.uniform();
  Matrix a = q * d.asDiagonal() * q.transpose();
  return 0.5 * (a + a.transpose());
}

CovState random_cov(const Architecture& arch, CovMode mode, Rng& rng) {
  CovState cov(arch, mode);
  const std::size_t layers = arch.num_layers();
  // Joint samples make every cross factor consistent with its diagonals.
  const Eigen::Index samples = 64;
  std::vector<Matrix> acts, grads;
  for (std::size_t p = 0; p < layers; ++p) {
    Matrix a = random_matrix(arch.weight_cols(p), samples, rng);
    a.row(a.rows() - 1).setOnes();
    acts.push_back(std::move(a));
    grads.push_back(random_matrix(arch.weight_rows(p), samples, rng));
  }
  for (std::size_t p = 0; p < layers; ++p) {
    for (std::size_t q = 0; q <= p; ++q) {
      if (!cov.has_pair(p, q)) continue;
      Matrix a = acts[p] * acts[q].transpose() / static_cast<double>(samples);
      Matrix g = grads[p] * grads[q].transpose() / static_cast<double>(samples);
      if (p == q) {
        a = symmetrized(a);
        g = symmetrized(g);
      }
      cov.set_act_cov(p, q, std::move(a));
      cov.set_grad_cov(p, q, std::move(g));
    }
  }
  return cov;
}

double rel_err(const Matrix& a, const Matrix& b) {
  const double scale = std::max(a.norm(), b.norm());
  if (scale == 0.0) return 0.0;
  return (a - b).norm() / scale;
}

}  // namespace tlkfac::oracle
