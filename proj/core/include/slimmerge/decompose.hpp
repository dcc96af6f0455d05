#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "slimmerge/layer_matrix.hpp"

namespace slimmerge {

/// Thin SVD M = U * diag(S) * V^T with k = min(rows, cols).
/// Columns of U and V are orthonormal, S is nonincreasing and nonnegative,
/// and the sign convention (first nonzero entry of each U column >= 0) makes
/// the factorization deterministic.
struct SvdTriple {
  Matrix U;  // m x k
  Vector S;  // k
  Matrix V;  // n x k

  Eigen::Index max_rank() const { return S.size(); }
};

/// Deterministic thin SVD. Inputs with more columns than rows are transposed
/// internally and the factors swapped back, so one orientation is ever
/// decomposed. Throws ConvergenceError if the backend fails to converge.
SvdTriple svd(const Matrix& m);
SvdTriple svd(const LayerMatrix& m);

/// Top-r reconstruction sum_{i<=r} s_i u_i v_i^T. r == k reproduces the input
/// (to roundoff); r == 0 is the zero matrix. Throws RankOutOfRangeError.
Matrix hard_truncate(const SvdTriple& triple, Eigen::Index r);

/// Shared/expert split of a task-vector set. The construction is exact:
/// shared + expert_t == tau_t for every task and layer.
struct Decomposition {
  LayerMap shared;                 // M_s per layer
  std::vector<TaskEntry> experts;  // M_t = tau_t - M_s, same layer geometry
  CheckpointMeta base_meta;

  int task_count() const { return static_cast<int>(experts.size()); }
  /// Exact target for task t at a layer: shared + expert.
  Matrix target(int task, const std::string& layer) const;
};

/// Static merge of the task vectors. Default coefficients are 1/T
/// (averaging); an explicit lambda vector must have length T.
LayerMap shared_merge(const TaskVectorSet& set, std::span<const double> coefficients = {});

/// Per-task residual relative to the shared component.
std::vector<TaskEntry> expert_residual(const TaskVectorSet& set, const LayerMap& shared);

/// shared_merge + expert_residual in one step.
Decomposition decompose(const TaskVectorSet& set, std::span<const double> coefficients = {});

/// SVDs for every (component, layer) of a decomposition, computed in parallel
/// across layers.
struct DecompositionSvd {
  std::map<std::string, SvdTriple> shared;
  std::vector<std::map<std::string, SvdTriple>> experts;  // [task][layer]
};

DecompositionSvd svd_all(const Decomposition& decomp);

}  // namespace slimmerge
