#include "moeedit/edit_solver.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <cmath>
#include <random>

#include "moeedit/kernels.hpp"
#include "moeedit/parallel.hpp"

namespace moeedit {

namespace {

// LLT with diagonal loading escalation: start at 1e-10·trace/d and double,
// up to 8 attempts.
Eigen::LLT<Matrix> factor_spd(const Matrix& m) {
  Eigen::LLT<Matrix> llt(m);
  if (llt.info() == Eigen::Success) return llt;
  const Index d = m.rows();
  double load = 1e-10 * m.trace() / static_cast<double>(d);
  for (int attempt = 0; attempt < 8; ++attempt) {
    llt.compute(m + load * Matrix::Identity(d, d));
    if (llt.info() == Eigen::Success) return llt;
    load *= 2.0;
  }
  throw SolverError("factorization failed after diagonal loading escalation");
}

void fisher_yates(std::vector<int>& v, std::mt19937_64& rng) {
  for (size_t i = v.size(); i > 1; --i) {
    const size_t j = static_cast<size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

void check_lambda(double lambda) {
  if (!(lambda > 0.0)) {
    throw std::invalid_argument("lambda must be > 0, got " +
                                std::to_string(lambda));
  }
}

// Example indices, gates and projected keys of one expert's block,
// gathered once per batch solve.
struct BlockSamples {
  std::vector<Index> examples;
  Vector gains;
  Matrix keys;  // d_k × m_n
};

std::vector<BlockSamples> gather_blocks(const EditBatch& batch) {
  std::vector<BlockSamples> blocks(static_cast<size_t>(batch.n_experts));
  std::vector<std::vector<std::pair<Index, const ActiveKey*>>> hits(
      static_cast<size_t>(batch.n_experts));
  for (size_t i = 0; i < batch.requests.size(); ++i) {
    for (const ActiveKey& a : batch.requests[i].active) {
      if (a.gate != 0.0) {
        hits[static_cast<size_t>(a.expert)].emplace_back(static_cast<Index>(i), &a);
      }
    }
  }
  for (size_t n = 0; n < hits.size(); ++n) {
    BlockSamples& b = blocks[n];
    const Index m = static_cast<Index>(hits[n].size());
    b.gains = Vector(m);
    b.keys = Matrix(batch.d_k, m);
    b.examples.reserve(static_cast<size_t>(m));
    for (Index j = 0; j < m; ++j) {
      b.examples.push_back(hits[n][static_cast<size_t>(j)].first);
      b.gains[j] = hits[n][static_cast<size_t>(j)].second->gate;
      b.keys.col(j) = hits[n][static_cast<size_t>(j)].second->pkey;
    }
  }
  return blocks;
}

Matrix residual_matrix(const EditBatch& batch) {
  Matrix r(batch.d_m, static_cast<Index>(batch.requests.size()));
  for (size_t i = 0; i < batch.requests.size(); ++i) {
    r.col(static_cast<Index>(i)) = batch.requests[i].base_residual;
  }
  return r;
}

double penalty(const UpdateSet& u, double lambda) {
  double s = 0.0;
  for (int n : u.active_experts) {
    s += u.delta_hat[static_cast<size_t>(n)].squaredNorm();
  }
  return lambda * s;
}

}  // namespace

EditBatch assemble_batch(const StackedModel& model, int layer,
                         const std::vector<Vector>& prompts,
                         const std::vector<Vector>& targets,
                         std::shared_ptr<const ProjectorSet> projectors) {
  if (layer < 0 || layer >= static_cast<int>(model.layers.size())) {
    throw std::invalid_argument("assemble_batch: layer " + std::to_string(layer) +
                                " out of range");
  }
  if (prompts.size() != targets.size()) {
    throw std::invalid_argument("assemble_batch: prompts/targets size mismatch");
  }
  if (!projectors || static_cast<int>(projectors->experts.size()) != model.n_experts ||
      projectors->d_k != model.d_k) {
    throw std::invalid_argument("assemble_batch: projector set does not match model");
  }

  EditBatch batch;
  batch.layer = layer;
  batch.n_experts = model.n_experts;
  batch.d_k = model.d_k;
  batch.d_m = model.d_model;
  batch.projectors = std::move(projectors);
  batch.requests.resize(prompts.size());

  std::vector<StackTrace> traces = batch_forward(model, prompts);
  const MoeLayer& l = model.layers[static_cast<size_t>(layer)];
  parallel_for(static_cast<Index>(prompts.size()), [&](Index ii) {
    const size_t i = static_cast<size_t>(ii);
    require_dim(targets[i].size(), model.d_model, "assemble_batch: target");
    const Vector& u = traces[i].inputs[static_cast<size_t>(layer)];
    ForwardResult f = moe_forward(l, u);
    EditRequest& req = batch.requests[i];
    req.target = targets[i];
    req.base_residual = targets[i] - f.value;
    req.active.reserve(f.gates.selected.size());
    for (size_t j = 0; j < f.gates.selected.size(); ++j) {
      ActiveKey a;
      a.expert = f.gates.selected[j];
      a.gate = f.gates.weights[a.expert];
      a.key = f.keys[j];
      a.pkey = batch.projectors->experts[static_cast<size_t>(a.expert)].p * a.key;
      a.value = l.experts[static_cast<size_t>(a.expert)].w_down * a.key;
      req.active.push_back(std::move(a));
    }
  });
  return batch;
}

UpdateSet zero_update_set(const EditBatch& batch) {
  UpdateSet u;
  u.delta_hat.assign(static_cast<size_t>(batch.n_experts),
                     Matrix::Zero(batch.d_m, batch.d_k));
  u.delta = u.delta_hat;
  return u;
}

double objective_value(const EditBatch& batch, const UpdateSet& updates,
                       double lambda) {
  if (static_cast<int>(updates.delta_hat.size()) != batch.n_experts) {
    throw std::invalid_argument("objective_value: update set size mismatch");
  }
  const Index m = static_cast<Index>(batch.requests.size());
  Matrix res(batch.d_m, m);
  parallel_for(m, [&](Index ii) {
    const EditRequest& req = batch.requests[static_cast<size_t>(ii)];
    Vector r = -req.base_residual;
    for (const ActiveKey& a : req.active) {
      r.noalias() +=
          a.gate * (updates.delta_hat[static_cast<size_t>(a.expert)] * a.pkey);
    }
    res.col(ii) = r;
  });
  double pen = 0.0;
  for (const Matrix& d : updates.delta_hat) pen += d.squaredNorm();
  return kernels::sum_squared_columns(res) + lambda * pen;
}

UpdateSet solve_global(const EditBatch& batch, double lambda,
                       const GlobalSolveOptions& opts) {
  check_lambda(lambda);
  const Index d_sys = static_cast<Index>(batch.n_experts) * batch.d_k;
  if (d_sys > opts.max_system_dim) {
    throw SolverError("solve_global: system dimension " + std::to_string(d_sys) +
                      " exceeds cap " + std::to_string(opts.max_system_dim) +
                      "; use bcd_solve for large expert counts");
  }
  const Index m = static_cast<Index>(batch.requests.size());

  Matrix psi = Matrix::Zero(d_sys, m);
  for (Index i = 0; i < m; ++i) {
    for (const ActiveKey& a : batch.requests[static_cast<size_t>(i)].active) {
      psi.block(static_cast<Index>(a.expert) * batch.d_k, i, batch.d_k, 1) =
          a.gate * a.pkey;
    }
  }
  const Matrix r = residual_matrix(batch);

  Matrix a = kernels::gram(psi);
  a.diagonal().array() += lambda;
  Eigen::LLT<Matrix> llt = factor_spd(a);
  const Matrix rhs = psi * r.transpose();        // (N d_k) × d_m
  const Matrix delta_t = llt.solve(rhs);         // A⁻¹ Ψ Rᵀ
  const Matrix delta_hat = delta_t.transpose();  // d_m × (N d_k)

  UpdateSet out = zero_update_set(batch);
  out.lambda = lambda;
  std::vector<bool> active(static_cast<size_t>(batch.n_experts), false);
  for (const EditRequest& req : batch.requests) {
    for (const ActiveKey& ak : req.active) {
      if (ak.gate != 0.0) active[static_cast<size_t>(ak.expert)] = true;
    }
  }
  for (int n = 0; n < batch.n_experts; ++n) {
    if (!active[static_cast<size_t>(n)]) continue;
    out.active_experts.push_back(n);
    out.delta_hat[static_cast<size_t>(n)] =
        delta_hat.middleCols(static_cast<Index>(n) * batch.d_k, batch.d_k);
    out.delta[static_cast<size_t>(n)] =
        out.delta_hat[static_cast<size_t>(n)] *
        batch.projectors->experts[static_cast<size_t>(n)].p;
  }
  out.objective_trace = {objective_value(batch, zero_update_set(batch), lambda),
                         objective_value(batch, out, lambda)};
  out.final_objective = out.objective_trace.back();
  return out;
}

std::vector<Vector> residual_excluding(const EditBatch& batch,
                                       const UpdateSet& updates, int expert) {
  if (expert < 0 || expert >= batch.n_experts) {
    throw std::invalid_argument("residual_excluding: expert " +
                                std::to_string(expert) + " out of range");
  }
  const Index m = static_cast<Index>(batch.requests.size());
  std::vector<Vector> out(static_cast<size_t>(m));
  parallel_for(m, [&](Index ii) {
    const EditRequest& req = batch.requests[static_cast<size_t>(ii)];
    Vector r = req.base_residual;
    for (const ActiveKey& a : req.active) {
      if (a.expert == expert) {
        r.noalias() += a.gate * a.value;  // base term of the excluded expert
      } else {
        r.noalias() -=
            a.gate * (updates.delta_hat[static_cast<size_t>(a.expert)] * a.pkey);
      }
    }
    out[static_cast<size_t>(ii)] = std::move(r);
  });
  return out;
}

Matrix solve_block(const EditBatch& batch, const std::vector<Vector>& residuals,
                   int expert, double lambda) {
  check_lambda(lambda);
  if (residuals.size() != batch.requests.size()) {
    throw std::invalid_argument("solve_block: residual list size mismatch");
  }
  if (expert < 0 || expert >= batch.n_experts) {
    throw std::invalid_argument("solve_block: expert out of range");
  }
  std::vector<Index> idx;
  std::vector<double> g;
  for (size_t i = 0; i < batch.requests.size(); ++i) {
    for (const ActiveKey& a : batch.requests[i].active) {
      if (a.expert == expert && a.gate != 0.0) {
        idx.push_back(static_cast<Index>(i));
        g.push_back(a.gate);
      }
    }
  }
  const Index mn = static_cast<Index>(idx.size());
  Vector gains(mn);
  Matrix keys(batch.d_k, mn);
  Matrix targets(batch.d_m, mn);
  for (Index j = 0; j < mn; ++j) {
    const EditRequest& req = batch.requests[static_cast<size_t>(idx[static_cast<size_t>(j)])];
    gains[j] = g[static_cast<size_t>(j)];
    for (const ActiveKey& a : req.active) {
      if (a.expert == expert) keys.col(j) = a.pkey;
    }
    targets.col(j) = residuals[static_cast<size_t>(idx[static_cast<size_t>(j)])];
  }
  Matrix m_n = kernels::block_gram(gains, keys);
  m_n.diagonal().array() += lambda;
  const Matrix b_n = kernels::block_cross(gains, keys, targets);
  return factor_spd(m_n).solve(b_n.transpose()).transpose();
}

UpdateSet bcd_solve(const EditBatch& batch, double lambda, int passes,
                    std::uint64_t seed, const BcdOptions& opts) {
  check_lambda(lambda);
  if (passes < 1) throw std::invalid_argument("bcd_solve: passes must be >= 1");

  const std::vector<BlockSamples> blocks = gather_blocks(batch);
  std::vector<int> active;
  for (int n = 0; n < batch.n_experts; ++n) {
    if (blocks[static_cast<size_t>(n)].gains.size() > 0) active.push_back(n);
  }

  UpdateSet u = zero_update_set(batch);
  u.lambda = lambda;
  u.seed = seed;
  u.active_experts = active;

  // Block Gram matrices depend only on frozen gates/keys: factor once.
  std::vector<Eigen::LLT<Matrix>> factors(static_cast<size_t>(batch.n_experts));
  for (int n : active) {
    const BlockSamples& b = blocks[static_cast<size_t>(n)];
    Matrix m_n = kernels::block_gram(b.gains, b.keys);
    m_n.diagonal().array() += lambda;
    factors[static_cast<size_t>(n)] = factor_spd(m_n);
  }

  // Full residuals ρ_i = r_i − Σ_ℓ g_{i,ℓ} Δ̂_ℓ k̃_{i,ℓ}; block targets are
  // r^(−n) = ρ_i + g_{i,n} Δ̂_n k̃_{i,n}, and ρ is rewritten exactly from the
  // targets after each block solve.
  Matrix rho = residual_matrix(batch);
  double fit = kernels::sum_squared_columns(rho);
  u.objective_trace.push_back(fit);

  std::mt19937_64 rng(seed);
  int passes_run = 0;
  for (int pass = 0; pass < passes; ++pass) {
    const double f_start = u.objective_trace.back();
    std::vector<int> order = active;
    fisher_yates(order, rng);
    for (int n : order) {
      const BlockSamples& b = blocks[static_cast<size_t>(n)];
      Matrix& dh = u.delta_hat[static_cast<size_t>(n)];
      const Index mn = b.gains.size();

      Matrix targets(batch.d_m, mn);
      const Matrix t_old = dh * b.keys;
      for (Index j = 0; j < mn; ++j) {
        targets.col(j) =
            rho.col(b.examples[static_cast<size_t>(j)]) + b.gains[j] * t_old.col(j);
      }
      const Matrix b_n = kernels::block_cross(b.gains, b.keys, targets);
      dh = factors[static_cast<size_t>(n)].solve(b_n.transpose()).transpose();

      const Matrix t_new = dh * b.keys;
      for (Index j = 0; j < mn; ++j) {
        rho.col(b.examples[static_cast<size_t>(j)]) =
            targets.col(j) - b.gains[j] * t_new.col(j);
      }
      fit = kernels::sum_squared_columns(rho);
      u.objective_trace.push_back(fit + penalty(u, lambda));
    }
    ++passes_run;
    const double f_end = u.objective_trace.back();
    if (f_start - f_end < opts.rel_decrease_stop * std::max(f_start, 1e-300)) {
      break;
    }
  }

  u.passes = passes_run;
  for (int n : active) {
    u.delta[static_cast<size_t>(n)] =
        u.delta_hat[static_cast<size_t>(n)] *
        batch.projectors->experts[static_cast<size_t>(n)].p;
  }
  u.final_objective = u.objective_trace.back();
  return u;
}

StackedModel apply_updates(const StackedModel& model, int layer,
                           const UpdateSet& updates,
                           const ProjectorSet& projectors) {
  if (layer < 0 || layer >= static_cast<int>(model.layers.size())) {
    throw std::invalid_argument("apply_updates: layer out of range");
  }
  if (static_cast<int>(updates.delta_hat.size()) != model.n_experts ||
      static_cast<int>(projectors.experts.size()) != model.n_experts) {
    throw std::invalid_argument("apply_updates: expert count mismatch");
  }
  StackedModel edited = model;
  MoeLayer& l = edited.layers[static_cast<size_t>(layer)];
  for (int n : updates.active_experts) {
    const Matrix& dh = updates.delta_hat[static_cast<size_t>(n)];
    require_dim(dh.rows(), model.d_model, "apply_updates: delta rows");
    require_dim(dh.cols(), model.d_k, "apply_updates: delta cols");
    const Matrix d = dh * projectors.experts[static_cast<size_t>(n)].p;
    if (d.isZero(0.0)) continue;  // keep untouched weights bit-identical
    l.experts[static_cast<size_t>(n)].w_down += d;
  }
  return edited;
}

}  // namespace moeedit
