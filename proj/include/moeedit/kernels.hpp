#pragma once

#include "moeedit/linalg.hpp"

namespace moeedit::kernels {

// Hot data-parallel reductions. The production versions chunk the sample
// axis with kReduceChunk and combine partials in order: results do not
// depend on the thread count. kernels::serial holds the single-loop
// references used by the tests and by bench_kernels.

// cols * colsᵀ
Matrix gram(const Matrix& cols);

// Σ_j gains_j² · keys_j keys_jᵀ   (keys_j = keys.col(j))
Matrix block_gram(const Vector& gains, const Matrix& keys);

// Σ_j gains_j · targets_j keys_jᵀ
Matrix block_cross(const Vector& gains, const Matrix& keys,
                   const Matrix& targets);

// Σ_j ‖cols_j‖²
double sum_squared_columns(const Matrix& cols);

namespace serial {
Matrix gram(const Matrix& cols);
Matrix block_gram(const Vector& gains, const Matrix& keys);
Matrix block_cross(const Vector& gains, const Matrix& keys,
                   const Matrix& targets);
double sum_squared_columns(const Matrix& cols);
}  // namespace serial

}  // namespace moeedit::kernels
