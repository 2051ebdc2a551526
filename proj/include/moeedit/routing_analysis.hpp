#pragma once

#include <vector>

#include "moeedit/linalg.hpp"
#include "moeedit/moe_core.hpp"

namespace moeedit {

// Per-layer routing shift between two models over a prompt set: Jaccard
// similarity of Top-K sets, KL divergence of the full softmax
// distributions, and the accuracy of the first-order δg prediction.
struct RoutingShiftReport {
  std::vector<int> layers;
  std::vector<std::vector<double>> rs;  // [layer][prompt]
  std::vector<std::vector<double>> kl;
  std::vector<double> mean_rs;
  std::vector<double> mean_kl;
  std::vector<double> mean_pred_err;   // ‖δg_actual − δg_predicted‖, mean
  std::vector<double> mean_shift_norm; // ‖δg_actual‖, mean
};

// |A ∩ B| / |A ∪ B| over Top-K expert sets.
double routing_similarity(const std::vector<int>& pre, const std::vector<int>& post);

// Σ g ln(g/g′) over strictly positive distributions summing to 1.
double kl_shift(const Vector& g, const Vector& g_prime);

// diag(sm(s)) − sm(s) sm(s)ᵀ; symmetric, rows sum to zero.
Matrix softmax_jacobian(const Vector& s);

// First-order routing shift δg ≈ J_sm(s) Eᵀ δu.
Vector predict_shift(const Matrix& router, const Vector& s, const Vector& du);

RoutingShiftReport compare_routing(const StackedModel& pre,
                                   const StackedModel& post,
                                   const std::vector<Vector>& prompts,
                                   const std::vector<int>& layers);

}  // namespace moeedit
