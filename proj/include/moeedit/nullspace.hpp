#pragma once

#include <cstdint>
#include <vector>

#include "moeedit/linalg.hpp"
#include "moeedit/moe_core.hpp"

namespace moeedit {

// Orthogonal projector onto the complement of one expert's preservation-key
// span: eigendecompose the (sample-normalized) key covariance, keep the
// eigenvectors with eigenvalue < tau, P = U0 U0ᵀ. Updates filtered through
// P cannot move outputs on the preservation keys.
struct ExpertProjector {
  Matrix p;                  // d_k × d_k, symmetric idempotent
  int retained_dim = 0;      // |I_0|
  Vector eigenvalues;        // covariance spectrum, descending
  std::uint64_t cov_checksum = 0;
};

struct ProjectorSet {
  std::vector<ExpertProjector> experts;
  double tau = 0.0;
  int d_k = 0;
};

// (1 / max(m,1)) · K0 K0ᵀ. Normalizing by the sample count keeps tau
// comparable across preservation-set sizes.
Matrix covariance(const Matrix& k0);

struct ProjectorBuild {
  Matrix p;
  int retained_dim = 0;
  Vector eigenvalues;  // descending
};

ProjectorBuild build_projector(const Matrix& cov, double tau);

std::vector<Vector> project_keys(const Matrix& p, const std::vector<Vector>& keys);

// Per-expert projectors for one layer from preservation prompts; the N
// eigendecompositions run expert-parallel.
ProjectorSet build_projector_set(const StackedModel& model, int layer,
                                 const std::vector<Vector>& preservation_prompts,
                                 double tau);

// P = I for every expert (projection disabled / empty preservation set).
ProjectorSet identity_projectors(int n_experts, int d_k, double tau);

std::uint64_t fnv1a64(const void* data, size_t len,
                      std::uint64_t seed = 0xcbf29ce484222325ull);

}  // namespace moeedit
