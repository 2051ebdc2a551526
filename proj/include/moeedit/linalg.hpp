#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace moeedit {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

// Thrown when a factorization or solve cannot proceed; the CLI maps this
// to exit code 2 (all other validation errors map to 1).
struct SolverError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require_dim(Index got, Index want, const std::string& what) {
  if (got != want) {
    throw std::invalid_argument(what + ": dimension mismatch, got " +
                                std::to_string(got) + ", expected " +
                                std::to_string(want));
  }
}

inline void require_finite(const Matrix& m, const std::string& what) {
  if (!m.allFinite()) {
    throw std::invalid_argument(what + ": non-finite entries");
  }
}

}  // namespace moeedit
