#include "moeedit/moe_core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "moeedit/parallel.hpp"

namespace moeedit {

double silu(double x) { return x / (1.0 + std::exp(-x)); }

std::vector<int> top_k_indices(const Vector& s, int k) {
  std::vector<int> idx(static_cast<size_t>(s.size()));
  std::iota(idx.begin(), idx.end(), 0);
  // Ties broken by lowest index.
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
    if (s[a] != s[b]) return s[a] > s[b];
    return a < b;
  });
  idx.resize(static_cast<size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

Vector softmax(const Vector& s) {
  const double m = s.maxCoeff();
  Vector e = (s.array() - m).exp();
  return e / e.sum();
}

GateDecision gate(const MoeLayer& layer, const Vector& u) {
  require_dim(u.size(), layer.router.rows(), "gate: router input");
  require_finite(u, "gate: router input");
  const Vector logits = layer.router.transpose() * u;
  const int n = static_cast<int>(layer.experts.size());
  const int k = layer.top_k;
  if (k < 1 || k > n) {
    throw std::invalid_argument("gate: top_k " + std::to_string(k) +
                                " outside [1, " + std::to_string(n) + "]");
  }
  GateDecision d;
  d.selected = top_k_indices(logits, k);
  d.weights = Vector::Zero(n);
  double m = logits[d.selected[0]];
  for (int i : d.selected) m = std::max(m, logits[i]);
  double sum = 0.0;
  for (int i : d.selected) {
    d.weights[i] = std::exp(logits[i] - m);
    sum += d.weights[i];
  }
  for (int i : d.selected) d.weights[i] /= sum;
  return d;
}

std::pair<Vector, Vector> expert_forward(const Expert& e, const Vector& u) {
  require_dim(u.size(), e.w_up.cols(), "expert_forward: input");
  Vector key = (e.w_up * u).cwiseProduct((e.w_gate * u).unaryExpr([](double x) {
    return silu(x);
  }));
  Vector value = e.w_down * key;
  return {std::move(key), std::move(value)};
}

ForwardResult moe_forward(const MoeLayer& layer, const Vector& u) {
  ForwardResult r;
  r.gates = gate(layer, u);
  r.value = Vector::Zero(layer.experts[0].w_down.rows());
  r.keys.reserve(r.gates.selected.size());
  for (int n : r.gates.selected) {
    auto [key, value] = expert_forward(layer.experts[static_cast<size_t>(n)], u);
    r.value.noalias() += r.gates.weights[n] * value;
    r.keys.push_back(std::move(key));
  }
  return r;
}

StackTrace stack_forward(const StackedModel& model, const Vector& u0) {
  StackTrace t;
  const size_t L = model.layers.size();
  t.inputs.reserve(L);
  t.outputs.reserve(L);
  t.snapshots.reserve(L);
  Vector u = u0;
  for (const MoeLayer& layer : model.layers) {
    ForwardResult f = moe_forward(layer, u);
    RoutingSnapshot snap;
    snap.logits = layer.router.transpose() * u;
    snap.softmax = softmax(snap.logits);
    snap.top_set = f.gates.selected;
    t.inputs.push_back(u);
    t.snapshots.push_back(std::move(snap));
    u += f.value;
    t.outputs.push_back(std::move(f.value));
  }
  return t;
}

std::vector<StackTrace> batch_forward(const StackedModel& model,
                                      const std::vector<Vector>& prompts) {
  std::vector<StackTrace> traces(prompts.size());
  parallel_for(static_cast<Index>(prompts.size()), [&](Index i) {
    traces[static_cast<size_t>(i)] =
        stack_forward(model, prompts[static_cast<size_t>(i)]);
  });
  return traces;
}

Vector final_state(const StackTrace& trace) {
  return trace.inputs.back() + trace.outputs.back();
}

Matrix collect_keys(const StackedModel& model, const std::vector<Vector>& prompts,
                    int layer, int expert) {
  if (layer < 0 || layer >= static_cast<int>(model.layers.size())) {
    throw std::invalid_argument("collect_keys: layer " + std::to_string(layer) +
                                " out of range");
  }
  if (expert < 0 || expert >= model.n_experts) {
    throw std::invalid_argument("collect_keys: expert " + std::to_string(expert) +
                                " out of range");
  }
  std::vector<StackTrace> traces = batch_forward(model, prompts);
  const MoeLayer& l = model.layers[static_cast<size_t>(layer)];
  std::vector<Vector> cols;
  for (size_t i = 0; i < prompts.size(); ++i) {
    const RoutingSnapshot& snap = traces[i].snapshots[static_cast<size_t>(layer)];
    if (std::find(snap.top_set.begin(), snap.top_set.end(), expert) !=
        snap.top_set.end()) {
      cols.push_back(expert_forward(l.experts[static_cast<size_t>(expert)],
                                    traces[i].inputs[static_cast<size_t>(layer)])
                         .first);
    }
  }
  Matrix k0(model.d_k, static_cast<Index>(cols.size()));
  for (size_t j = 0; j < cols.size(); ++j) k0.col(static_cast<Index>(j)) = cols[j];
  return k0;
}

void validate(const StackedModel& model) {
  if (model.layers.empty()) throw std::invalid_argument("model: no layers");
  for (const MoeLayer& l : model.layers) {
    if (static_cast<int>(l.experts.size()) != model.n_experts) {
      throw std::invalid_argument("model: expert count mismatch");
    }
    if (l.top_k != model.top_k || l.top_k < 1 || l.top_k > model.n_experts) {
      throw std::invalid_argument("model: bad top_k");
    }
    require_dim(l.router.rows(), model.d_model, "model: router rows");
    require_dim(l.router.cols(), model.n_experts, "model: router cols");
    require_finite(l.router, "model: router");
    for (const Expert& e : l.experts) {
      require_dim(e.w_up.rows(), model.d_k, "model: w_up rows");
      require_dim(e.w_up.cols(), model.d_model, "model: w_up cols");
      require_dim(e.w_gate.rows(), model.d_k, "model: w_gate rows");
      require_dim(e.w_gate.cols(), model.d_model, "model: w_gate cols");
      require_dim(e.w_down.rows(), model.d_model, "model: w_down rows");
      require_dim(e.w_down.cols(), model.d_k, "model: w_down cols");
      require_finite(e.w_up, "model: w_up");
      require_finite(e.w_gate, "model: w_gate");
      require_finite(e.w_down, "model: w_down");
    }
  }
}

namespace {

Matrix gaussian_matrix(Index rows, Index cols, double scale,
                       std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) m(i, j) = scale * gauss(rng);
  }
  return m;
}

}  // namespace

StackedModel random_model(int d_model, int d_k, int n_experts, int top_k,
                          int n_layers, std::uint64_t seed) {
  if (d_model < 1 || d_k < 1 || n_experts < 1 || n_layers < 1 || top_k < 1 ||
      top_k > n_experts) {
    throw std::invalid_argument("random_model: invalid dims");
  }
  StackedModel model;
  model.d_model = d_model;
  model.d_k = d_k;
  model.n_experts = n_experts;
  model.top_k = top_k;
  model.seed = seed;
  std::mt19937_64 rng(seed);
  const double in_scale = 1.0 / std::sqrt(static_cast<double>(d_model));
  const double down_scale = 1.0 / std::sqrt(static_cast<double>(d_k));
  model.layers.reserve(static_cast<size_t>(n_layers));
  for (int l = 0; l < n_layers; ++l) {
    MoeLayer layer;
    layer.top_k = top_k;
    layer.router = gaussian_matrix(d_model, n_experts, in_scale, rng);
    layer.experts.reserve(static_cast<size_t>(n_experts));
    for (int n = 0; n < n_experts; ++n) {
      Expert e;
      e.w_up = gaussian_matrix(d_k, d_model, in_scale, rng);
      e.w_gate = gaussian_matrix(d_k, d_model, in_scale, rng);
      e.w_down = gaussian_matrix(d_model, d_k, down_scale, rng);
      layer.experts.push_back(std::move(e));
    }
    model.layers.push_back(std::move(layer));
  }
  return model;
}

}  // namespace moeedit
