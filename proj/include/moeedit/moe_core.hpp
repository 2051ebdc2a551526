#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "moeedit/linalg.hpp"

namespace moeedit {

// One gated FFN expert. w_up and w_gate are d_k × d_model, w_down is
// d_model × d_k; the post-gate feature (W_up u) ⊙ silu(W_gate u) is the
// expert's key and w_down maps keys to values.
struct Expert {
  Matrix w_up;
  Matrix w_gate;
  Matrix w_down;
};

// Router embeddings (column n is e_n) plus N experts and the Top-K width.
struct MoeLayer {
  Matrix router;  // d_model × N
  std::vector<Expert> experts;
  int top_k = 1;
};

struct GateDecision {
  std::vector<int> selected;  // sorted ascending, exactly K indices
  Vector weights;             // length N; softmax over selected, zero elsewhere
};

// Full routing state at one layer: raw logits, the full softmax
// distribution (kept for KL analysis), and the Top-K set.
struct RoutingSnapshot {
  Vector logits;
  Vector softmax;
  std::vector<int> top_set;
};

struct StackedModel {
  std::vector<MoeLayer> layers;
  int d_model = 0;
  int d_k = 0;
  int n_experts = 0;
  int top_k = 0;
  std::uint64_t seed = 0;
};

struct ForwardResult {
  Vector value;
  GateDecision gates;
  std::vector<Vector> keys;  // aligned with gates.selected
};

// Per-layer router inputs u_ℓ, block outputs v_ℓ, and routing snapshots
// for one prompt. Residual propagation: u_{ℓ+1} = u_ℓ + v_ℓ.
struct StackTrace {
  std::vector<Vector> inputs;
  std::vector<Vector> outputs;
  std::vector<RoutingSnapshot> snapshots;
};

double silu(double x);

// Indices of the K largest entries of s, ties broken by lowest index;
// returned sorted ascending.
std::vector<int> top_k_indices(const Vector& s, int k);

// Numerically shifted softmax over all entries.
Vector softmax(const Vector& s);

GateDecision gate(const MoeLayer& layer, const Vector& u);

// (key, value) of one expert: key = (W_up u) ⊙ silu(W_gate u),
// value = W_down key.
std::pair<Vector, Vector> expert_forward(const Expert& e, const Vector& u);

ForwardResult moe_forward(const MoeLayer& layer, const Vector& u);

StackTrace stack_forward(const StackedModel& model, const Vector& u0);

// Prompt-parallel stack_forward; element i equals stack_forward(prompts[i]).
std::vector<StackTrace> batch_forward(const StackedModel& model,
                                      const std::vector<Vector>& prompts);

// Residual-stream state after the last layer.
Vector final_state(const StackTrace& trace);

// Keys of `expert` at `layer`, one column per prompt that routes to it.
// Returns d_k × m with m ≥ 0.
Matrix collect_keys(const StackedModel& model, const std::vector<Vector>& prompts,
                    int layer, int expert);

void validate(const StackedModel& model);

// Synthetic weights: i.i.d. Gaussian scaled by 1/sqrt(fan-in).
StackedModel random_model(int d_model, int d_k, int n_experts, int top_k,
                          int n_layers, std::uint64_t seed);

}  // namespace moeedit
