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

#include "tlkfac/linalg.hpp"

#include <cmath>
#include <sstream>

#include "tlkfac/errors.hpp"

namespace tlkfac {

namespace {

std::string shape(const Matrix& m) {
  std::ostringstream out;
  out << m.rows() << "x" << m.cols();
  return out.str();
}

void require_square(const Matrix& m, std::string_view what) {
  if (m.rows() != m.cols()) {
    throw DimensionError(std::string(what) + ": expected a square matrix, got " +
                         shape(m));
  }
}

}  // namespace

Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const auto n_rows = static_cast<Eigen::Index>(rows.size());
  const auto n_cols =
      n_rows == 0 ? Eigen::Index{0}
                  : static_cast<Eigen::Index>(rows.begin()->size());
  Matrix m(n_rows, n_cols);
  Eigen::Index r = 0;
  for (const auto& row : rows) {
    if (static_cast<Eigen::Index>(row.size()) != n_cols) {
      throw DimensionError("from_rows: ragged row " + std::to_string(r));
    }
    Eigen::Index c = 0;
    for (double x : row) m(r, c++) = x;
    ++r;
  }
  return m;
}

void require_finite(const Matrix& m, std::string_view what) {
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      if (!std::isfinite(m(i, j))) {
        std::ostringstream out;
        out << what << ": non-finite entry at (" << i << ", " << j << ")";
        throw InputError(out.str());
      }
    }
  }
}

Matrix symmetrized(const Matrix& a) {
  require_square(a, "symmetrized");
  Matrix s(a.rows(), a.cols());
  for (Eigen::Index j = 0; j < a.cols(); ++j) {
    for (Eigen::Index i = 0; i <= j; ++i) {
      const double v = 0.5 * (a(i, j) + a(j, i));
      s(i, j) = v;
      s(j, i) = v;
    }
  }
  return s;
}

Vector vec(const Matrix& m) {
  return Eigen::Map<const Vector>(m.data(), m.size());
}

Matrix unvec(const Vector& v, Eigen::Index rows, Eigen::Index cols) {
  if (v.size() != rows * cols) {
    throw DimensionError("unvec: length " + std::to_string(v.size()) +
                         " does not match " + std::to_string(rows) + "x" +
                         std::to_string(cols));
  }
  return Eigen::Map<const Matrix>(v.data(), rows, cols);
}

SymEig sym_eig(const Matrix& a) {
  require_square(a, "sym_eig");
  if (a.size() == 0) return {Vector(0), Matrix(0, 0)};
  const Matrix s = symmetrized(a);
  Eigen::SelfAdjointEigenSolver<Matrix> solver(s, Eigen::ComputeEigenvectors);
  if (solver.info() != Eigen::Success) {
    std::ostringstream out;
    out << "sym_eig: eigensolver did not converge on " << shape(a)
        << " matrix (Frobenius norm " << s.norm() << ", max |entry| "
        << s.cwiseAbs().maxCoeff() << ")";
    throw NumericalError(out.str());
  }
  return {solver.eigenvalues(), solver.eigenvectors()};
}

Cholesky::Cholesky(const Matrix& a) {
  require_square(a, "Cholesky");
  const Eigen::Index n = a.rows();
  lower_ = Matrix::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    double diag = a(j, j);
    for (Eigen::Index k = 0; k < j; ++k) diag -= lower_(j, k) * lower_(j, k);
    if (!(diag > 0.0)) {
      std::ostringstream out;
      out << "Cholesky: matrix is not positive definite, pivot " << j
          << " of " << n << " is " << diag;
      throw NumericalError(out.str());
    }
    const double root = std::sqrt(diag);
    lower_(j, j) = root;
    for (Eigen::Index i = j + 1; i < n; ++i) {
      double v = 0.5 * (a(i, j) + a(j, i));
      for (Eigen::Index k = 0; k < j; ++k) v -= lower_(i, k) * lower_(j, k);
      lower_(i, j) = v / root;
    }
  }
}

Cholesky Cholesky::from_lower(Matrix lower) {
  require_square(lower, "Cholesky::from_lower");
  for (Eigen::Index j = 0; j < lower.cols(); ++j) {
    if (!(lower(j, j) > 0.0)) {
      throw NumericalError("Cholesky::from_lower: non-positive diagonal at " +
                           std::to_string(j));
    }
  }
  Cholesky c;
  c.lower_ = lower.triangularView<Eigen::Lower>();
  return c;
}

Vector Cholesky::solve(const Vector& b) const {
  if (b.size() != size()) {
    throw DimensionError("Cholesky::solve: right-hand side length " +
                         std::to_string(b.size()) + ", expected " +
                         std::to_string(size()));
  }
  const auto tri = lower_.triangularView<Eigen::Lower>();
  Vector y = tri.solve(b);
  return tri.transpose().solve(y);
}

Matrix Cholesky::solve(const Matrix& b) const {
  if (b.rows() != size()) {
    throw DimensionError("Cholesky::solve: right-hand side is " + shape(b) +
                         ", expected " + std::to_string(size()) + " rows");
  }
  const auto tri = lower_.triangularView<Eigen::Lower>();
  Matrix y = tri.solve(b);
  return tri.transpose().solve(y);
}

Matrix Cholesky::solve_right(const Matrix& b) const {
  if (b.cols() != size()) {
    throw DimensionError("Cholesky::solve_right: left operand is " + shape(b) +
                         ", expected " + std::to_string(size()) + " columns");
  }
  // B A^{-1} = (A^{-1} B^T)^T since A is symmetric.
  return solve(Matrix(b.transpose())).transpose();
}

Vector spd_solve(const Matrix& a, const Vector& b) {
  return Cholesky(a).solve(b);
}

Matrix kron_apply(const Matrix& a, const Matrix& b, const Matrix& x) {
  if (x.rows() != b.cols() || x.cols() != a.cols()) {
    throw DimensionError("kron_apply: operand is " + shape(x) + ", expected " +
                         std::to_string(b.cols()) + "x" +
                         std::to_string(a.cols()));
  }
  return b * x * a.transpose();
}

Vector kron_apply(const Matrix& a, const Matrix& b, const Vector& x) {
  if (x.size() != a.cols() * b.cols()) {
    throw DimensionError("kron_apply: vector length " + std::to_string(x.size()) +
                         ", expected " + std::to_string(a.cols() * b.cols()));
  }
  return vec(kron_apply(a, b, unvec(x, b.cols(), a.cols())));
}

double kron_elem_sum(const Matrix& a, const Matrix& b) {
  return a.sum() * b.sum();
}

Matrix dense_kron(const Matrix& a, const Matrix& b, std::size_t cap) {
  const auto rows = static_cast<std::size_t>(a.rows() * b.rows());
  const auto cols = static_cast<std::size_t>(a.cols() * b.cols());
  if (rows > cap || cols > cap) {
    std::ostringstream out;
    out << "dense_kron: result " << rows << "x" << cols << " exceeds cap "
        << cap;
    throw SizeError(out.str());
  }
  Matrix k(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index j = 0; j < a.cols(); ++j) {
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      k.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    }
  }
  return k;
}

}  // namespace tlkfac
