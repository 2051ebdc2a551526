#include "moeedit/kernels.hpp"

#include "moeedit/parallel.hpp"

namespace moeedit::kernels {

Matrix gram(const Matrix& cols) {
  const Index d = cols.rows();
  return reduce_in_order<Matrix>(
      cols.cols(), [&] { return Matrix(Matrix::Zero(d, d)); },
      [&](Matrix& acc, Index lo, Index hi) {
        const auto block = cols.middleCols(lo, hi - lo);
        acc.noalias() += block * block.transpose();
      },
      [](Matrix& total, const Matrix& part) { total += part; });
}

Matrix block_gram(const Vector& gains, const Matrix& keys) {
  const Index d = keys.rows();
  return reduce_in_order<Matrix>(
      keys.cols(), [&] { return Matrix(Matrix::Zero(d, d)); },
      [&](Matrix& acc, Index lo, Index hi) {
        for (Index j = lo; j < hi; ++j) {
          const double g2 = gains[j] * gains[j];
          acc.noalias() += g2 * (keys.col(j) * keys.col(j).transpose());
        }
      },
      [](Matrix& total, const Matrix& part) { total += part; });
}

Matrix block_cross(const Vector& gains, const Matrix& keys,
                   const Matrix& targets) {
  const Index dm = targets.rows();
  const Index dk = keys.rows();
  return reduce_in_order<Matrix>(
      keys.cols(), [&] { return Matrix(Matrix::Zero(dm, dk)); },
      [&](Matrix& acc, Index lo, Index hi) {
        for (Index j = lo; j < hi; ++j) {
          acc.noalias() += gains[j] * (targets.col(j) * keys.col(j).transpose());
        }
      },
      [](Matrix& total, const Matrix& part) { total += part; });
}

double sum_squared_columns(const Matrix& cols) {
  return reduce_in_order<double>(
      cols.cols(), [] { return 0.0; },
      [&](double& acc, Index lo, Index hi) {
        for (Index j = lo; j < hi; ++j) acc += cols.col(j).squaredNorm();
      },
      [](double& total, double part) { total += part; });
}

namespace serial {

Matrix gram(const Matrix& cols) {
  Matrix acc = Matrix::Zero(cols.rows(), cols.rows());
  for (Index j = 0; j < cols.cols(); ++j) {
    acc.noalias() += cols.col(j) * cols.col(j).transpose();
  }
  return acc;
}

Matrix block_gram(const Vector& gains, const Matrix& keys) {
  Matrix acc = Matrix::Zero(keys.rows(), keys.rows());
  for (Index j = 0; j < keys.cols(); ++j) {
    acc.noalias() += gains[j] * gains[j] * (keys.col(j) * keys.col(j).transpose());
  }
  return acc;
}

Matrix block_cross(const Vector& gains, const Matrix& keys,
                   const Matrix& targets) {
  Matrix acc = Matrix::Zero(targets.rows(), keys.rows());
  for (Index j = 0; j < keys.cols(); ++j) {
    acc.noalias() += gains[j] * (targets.col(j) * keys.col(j).transpose());
  }
  return acc;
}

double sum_squared_columns(const Matrix& cols) {
  double acc = 0.0;
  for (Index j = 0; j < cols.cols(); ++j) acc += cols.col(j).squaredNorm();
  return acc;
}

}  // namespace serial

}  // namespace moeedit::kernels
