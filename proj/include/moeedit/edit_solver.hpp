#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "moeedit/linalg.hpp"
#include "moeedit/moe_core.hpp"
#include "moeedit/nullspace.hpp"

namespace moeedit {

// One expert's contribution to an edit example: gate weight, raw key k,
// projected key k̃ = P_n k, and the base value W_n k.
struct ActiveKey {
  int expert = 0;
  double gate = 0.0;
  Vector key;
  Vector pkey;
  Vector value;
};

struct EditRequest {
  std::vector<ActiveKey> active;  // selected experts, ascending by index
  Vector target;                  // v_i
  Vector base_residual;           // r_i = v_i − Σ_n g_{i,n} W_n k_{i,n}
};

struct EditBatch {
  int layer = 0;
  std::vector<EditRequest> requests;
  std::shared_ptr<const ProjectorSet> projectors;
  int n_experts = 0;
  int d_k = 0;
  int d_m = 0;
};

// Per-expert free variables Δ̂_n and written deltas Δ_n = Δ̂_n P_n, plus
// solver metadata. Experts never active in the batch keep Δ̂_n = 0.
struct UpdateSet {
  std::vector<Matrix> delta_hat;  // N × (d_m × d_k)
  std::vector<Matrix> delta;      // Δ̂_n P_n
  std::vector<int> active_experts;
  double lambda = 0.0;
  int passes = 0;
  std::uint64_t seed = 0;
  std::vector<double> objective_trace;
  double final_objective = 0.0;
};

struct GlobalSolveOptions {
  // Refuse to materialize the (N·d_k)² ridge system above this dimension;
  // the one-shot solve is the verification oracle, not the editing path.
  Index max_system_dim = 4096;
};

struct BcdOptions {
  double rel_decrease_stop = 1e-9;  // early exit over a full pass
};

EditBatch assemble_batch(const StackedModel& model, int layer,
                         const std::vector<Vector>& prompts,
                         const std::vector<Vector>& targets,
                         std::shared_ptr<const ProjectorSet> projectors);

UpdateSet zero_update_set(const EditBatch& batch);

// Σ_i ‖Σ_n g_{i,n}(W_n k_{i,n} + Δ̂_n k̃_{i,n}) − v_i‖² + λ Σ_n ‖Δ̂_n‖_F²,
// evaluated through the base residuals r_i.
double objective_value(const EditBatch& batch, const UpdateSet& updates,
                       double lambda);

// Unique minimizer via the (N·d_k)-dim ridge system Δ̂(ΨΨᵀ+λI) = RΨᵀ,
// factored once and shared across the d_m output rows.
UpdateSet solve_global(const EditBatch& batch, double lambda,
                       const GlobalSolveOptions& opts = {});

// Residual that excludes expert n:
// r_i^(−n) = v_i − Σ_{ℓ≠n} g_{i,ℓ}(W_ℓ k_{i,ℓ} + Δ̂_ℓ k̃_{i,ℓ}).
std::vector<Vector> residual_excluding(const EditBatch& batch,
                                       const UpdateSet& updates, int expert);

// Exact ridge block solve: Δ̂_n = B_n M_n⁻¹ with
// M_n = Σ_i g² k̃ k̃ᵀ + λI and B_n = Σ_i g · residuals_i k̃ᵀ, accumulated
// by streaming over examples; Cholesky with diagonal loading on failure.
Matrix solve_block(const EditBatch& batch, const std::vector<Vector>& residuals,
                   int expert, double lambda);

// Randomized block coordinate descent: seeded Fisher–Yates order over the
// active experts each pass, exact block solves, objective recorded after
// every block update.
UpdateSet bcd_solve(const EditBatch& batch, double lambda, int passes,
                    std::uint64_t seed, const BcdOptions& opts = {});

// W_down^(n) ← W_down^(n) + Δ̂_n P_n for each updated expert; returns a new
// model value, the original is untouched.
StackedModel apply_updates(const StackedModel& model, int layer,
                           const UpdateSet& updates,
                           const ProjectorSet& projectors);

}  // namespace moeedit
