#include "moeedit/nullspace.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>

#include "moeedit/kernels.hpp"
#include "moeedit/parallel.hpp"

namespace moeedit {

std::uint64_t fnv1a64(const void* data, size_t len, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

Matrix covariance(const Matrix& k0) {
  require_finite(k0, "covariance: keys");
  const double m = static_cast<double>(std::max<Index>(k0.cols(), 1));
  return kernels::gram(k0) / m;
}

ProjectorBuild build_projector(const Matrix& cov, double tau) {
  if (cov.rows() != cov.cols()) {
    throw std::invalid_argument("build_projector: covariance not square");
  }
  require_finite(cov, "build_projector: covariance");
  if (tau < 0.0) throw std::invalid_argument("build_projector: tau < 0");
  const double scale = std::max(1.0, cov.cwiseAbs().maxCoeff());
  if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale) {
    throw std::invalid_argument("build_projector: covariance not symmetric");
  }

  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
  if (eig.info() != Eigen::Success) {
    throw SolverError("build_projector: eigendecomposition failed");
  }
  Vector lambda = eig.eigenvalues();  // ascending
  for (Index i = 0; i < lambda.size(); ++i) {
    if (lambda[i] < 0.0) {
      if (lambda[i] < -1e-10) {
        throw std::invalid_argument(
            "build_projector: covariance eigenvalue " + std::to_string(lambda[i]) +
            " below -1e-10");
      }
      lambda[i] = 0.0;
    }
  }

  ProjectorBuild out;
  const Index d = cov.rows();
  Index null_count = 0;
  while (null_count < d && lambda[null_count] < tau) ++null_count;
  const Matrix u0 = eig.eigenvectors().leftCols(null_count);
  out.p = u0 * u0.transpose();
  out.retained_dim = static_cast<int>(null_count);
  out.eigenvalues = lambda.reverse();
  return out;
}

std::vector<Vector> project_keys(const Matrix& p, const std::vector<Vector>& keys) {
  std::vector<Vector> out(keys.size());
  parallel_for(static_cast<Index>(keys.size()), [&](Index i) {
    const Vector& k = keys[static_cast<size_t>(i)];
    require_dim(k.size(), p.cols(), "project_keys: key");
    out[static_cast<size_t>(i)] = p * k;
  });
  return out;
}

ProjectorSet build_projector_set(const StackedModel& model, int layer,
                                 const std::vector<Vector>& preservation_prompts,
                                 double tau) {
  if (preservation_prompts.empty()) {
    return identity_projectors(model.n_experts, model.d_k, tau);
  }
  ProjectorSet set;
  set.tau = tau;
  set.d_k = model.d_k;
  set.experts.resize(static_cast<size_t>(model.n_experts));

  // One forward pass for the whole preservation set, then per-expert key
  // matrices and independent eigendecompositions.
  std::vector<StackTrace> traces = batch_forward(model, preservation_prompts);
  const MoeLayer& l = model.layers[static_cast<size_t>(layer)];
  std::vector<std::vector<Index>> hits(static_cast<size_t>(model.n_experts));
  for (size_t i = 0; i < traces.size(); ++i) {
    for (int n : traces[i].snapshots[static_cast<size_t>(layer)].top_set) {
      hits[static_cast<size_t>(n)].push_back(static_cast<Index>(i));
    }
  }
  parallel_for(model.n_experts, [&](Index n) {
    const auto& prompt_ids = hits[static_cast<size_t>(n)];
    Matrix k0(model.d_k, static_cast<Index>(prompt_ids.size()));
    for (size_t j = 0; j < prompt_ids.size(); ++j) {
      const auto& trace = traces[static_cast<size_t>(prompt_ids[j])];
      k0.col(static_cast<Index>(j)) =
          expert_forward(l.experts[static_cast<size_t>(n)],
                         trace.inputs[static_cast<size_t>(layer)])
              .first;
    }
    const Matrix cov = covariance(k0);
    ProjectorBuild b = build_projector(cov, tau);
    ExpertProjector& ep = set.experts[static_cast<size_t>(n)];
    ep.p = std::move(b.p);
    ep.retained_dim = b.retained_dim;
    ep.eigenvalues = std::move(b.eigenvalues);
    ep.cov_checksum = fnv1a64(cov.data(), sizeof(double) * static_cast<size_t>(
                                              cov.size()));
  });
  return set;
}

ProjectorSet identity_projectors(int n_experts, int d_k, double tau) {
  ProjectorSet set;
  set.tau = tau;
  set.d_k = d_k;
  set.experts.resize(static_cast<size_t>(n_experts));
  const Matrix zero_cov = Matrix::Zero(d_k, d_k);
  const std::uint64_t checksum =
      fnv1a64(zero_cov.data(), sizeof(double) * static_cast<size_t>(zero_cov.size()));
  for (auto& ep : set.experts) {
    ep.p = Matrix::Identity(d_k, d_k);
    ep.retained_dim = d_k;
    ep.eigenvalues = Vector::Zero(d_k);
    ep.cov_checksum = checksum;
  }
  return set;
}

}  // namespace moeedit
