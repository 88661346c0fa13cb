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
#include <initializer_list>
#include <string_view>

#include <Eigen/Dense>

namespace tlkfac {

// Dense column-major storage. Column-major is also the vec() layout, so a
// matrix's data() pointer is its vectorization.
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Largest row or column count dense_kron will materialize.
inline constexpr std::size_t kDenseKronCap = 4096;

Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

/// Throws InputError if any entry is NaN or infinite.
void require_finite(const Matrix& m, std::string_view what);

/// (A + A^T) / 2. Exactly symmetric.
Matrix symmetrized(const Matrix& a);

/// Column-stacking vectorization and its inverse.
Vector vec(const Matrix& m);
Matrix unvec(const Vector& v, Eigen::Index rows, Eigen::Index cols);

struct SymEig {
  Vector values;   // ascending
  Matrix vectors;  // orthonormal columns
};

/// Eigendecomposition of the symmetric part of a.
SymEig sym_eig(const Matrix& a);

/// Cholesky factorization A = L L^T of a symmetric positive-definite matrix.
class Cholesky {
 public:
  explicit Cholesky(const Matrix& a);
  /// Wraps an existing lower-triangular factor (e.g. from a checkpoint).
  static Cholesky from_lower(Matrix lower);

  Eigen::Index size() const { return lower_.rows(); }
  const Matrix& lower() const { return lower_; }

  Vector solve(const Vector& b) const;
  /// A^{-1} B
  Matrix solve(const Matrix& b) const;
  /// B A^{-1}
  Matrix solve_right(const Matrix& b) const;

 private:
  Cholesky() = default;
  Matrix lower_;
};

Vector spd_solve(const Matrix& a, const Vector& b);

/// (A kron B) x, evaluated as vec(B X A^T) with X = unvec(x) of shape
/// cols(B) x cols(A). Never forms the Kronecker product.
Vector kron_apply(const Matrix& a, const Matrix& b, const Vector& x);

/// Matrix form of kron_apply: returns B X A^T.
Matrix kron_apply(const Matrix& a, const Matrix& b, const Matrix& x);

/// Sum of all entries of A kron B, which equals sum(A) * sum(B).
double kron_elem_sum(const Matrix& a, const Matrix& b);

/// Materialized Kronecker product; block (i, j) is a(i, j) * B.
/// Throws SizeError when either result dimension exceeds cap.
Matrix dense_kron(const Matrix& a, const Matrix& b,
                  std::size_t cap = kDenseKronCap);

}  // namespace tlkfac
