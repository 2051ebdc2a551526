#include "moeedit/routing_analysis.hpp"

#include <algorithm>
#include <cmath>

#include "moeedit/parallel.hpp"

namespace moeedit {

double routing_similarity(const std::vector<int>& pre, const std::vector<int>& post) {
  if (pre.empty() || post.empty()) {
    throw std::invalid_argument("routing_similarity: empty expert set");
  }
  std::vector<int> a = pre, b = post;
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::vector<int> both;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(),
                        std::back_inserter(both));
  const size_t inter = both.size();
  const size_t uni = a.size() + b.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double kl_shift(const Vector& g, const Vector& g_prime) {
  require_dim(g_prime.size(), g.size(), "kl_shift: distributions");
  auto check = [](const Vector& v, const char* name) {
    if (v.minCoeff() <= 0.0) {
      throw std::invalid_argument(std::string("kl_shift: ") + name +
                                  " has non-positive entries");
    }
    if (std::abs(v.sum() - 1.0) > 1e-10) {
      throw std::invalid_argument(std::string("kl_shift: ") + name +
                                  " does not sum to 1");
    }
  };
  check(g, "g");
  check(g_prime, "g'");
  double kl = 0.0;
  for (Index i = 0; i < g.size(); ++i) kl += g[i] * std::log(g[i] / g_prime[i]);
  return std::max(kl, 0.0);
}

Matrix softmax_jacobian(const Vector& s) {
  require_finite(s, "softmax_jacobian: logits");
  const Vector p = softmax(s);
  Matrix j = -(p * p.transpose());
  j.diagonal() += p;
  return j;
}

Vector predict_shift(const Matrix& router, const Vector& s, const Vector& du) {
  require_dim(s.size(), router.cols(), "predict_shift: logits");
  require_dim(du.size(), router.rows(), "predict_shift: delta-u");
  return softmax_jacobian(s) * (router.transpose() * du);
}

RoutingShiftReport compare_routing(const StackedModel& pre,
                                   const StackedModel& post,
                                   const std::vector<Vector>& prompts,
                                   const std::vector<int>& layers) {
  if (pre.d_model != post.d_model || pre.d_k != post.d_k ||
      pre.n_experts != post.n_experts || pre.top_k != post.top_k ||
      pre.layers.size() != post.layers.size()) {
    throw std::invalid_argument("compare_routing: architecture mismatch");
  }
  for (int l : layers) {
    if (l < 0 || l >= static_cast<int>(pre.layers.size())) {
      throw std::invalid_argument("compare_routing: layer " + std::to_string(l) +
                                  " out of range");
    }
  }

  const std::vector<StackTrace> t_pre = batch_forward(pre, prompts);
  const std::vector<StackTrace> t_post = batch_forward(post, prompts);

  RoutingShiftReport rep;
  rep.layers = layers;
  const size_t np = prompts.size();
  rep.rs.assign(layers.size(), std::vector<double>(np, 0.0));
  rep.kl.assign(layers.size(), std::vector<double>(np, 0.0));
  std::vector<std::vector<double>> pred_err(layers.size(),
                                            std::vector<double>(np, 0.0));
  std::vector<std::vector<double>> shift_norm(layers.size(),
                                              std::vector<double>(np, 0.0));

  parallel_for(static_cast<Index>(np), [&](Index pi) {
    const size_t i = static_cast<size_t>(pi);
    for (size_t li = 0; li < layers.size(); ++li) {
      const size_t l = static_cast<size_t>(layers[li]);
      const RoutingSnapshot& a = t_pre[i].snapshots[l];
      const RoutingSnapshot& b = t_post[i].snapshots[l];
      rep.rs[li][i] = routing_similarity(a.top_set, b.top_set);
      rep.kl[li][i] = kl_shift(a.softmax, b.softmax);
      const Vector du = t_post[i].inputs[l] - t_pre[i].inputs[l];
      const Vector predicted =
          predict_shift(pre.layers[l].router, a.logits, du);
      const Vector actual = b.softmax - a.softmax;
      pred_err[li][i] = (actual - predicted).norm();
      shift_norm[li][i] = actual.norm();
    }
  });

  auto mean = [](const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  for (size_t li = 0; li < layers.size(); ++li) {
    rep.mean_rs.push_back(mean(rep.rs[li]));
    rep.mean_kl.push_back(mean(rep.kl[li]));
    rep.mean_pred_err.push_back(mean(pred_err[li]));
    rep.mean_shift_norm.push_back(mean(shift_norm[li]));
  }
  return rep;
}

}  // namespace moeedit
