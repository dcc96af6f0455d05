#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "slimmerge/decompose.hpp"
#include "slimmerge/layer_matrix.hpp"

namespace slimmerge {

enum class LossKind { mse, l1 };
enum class RatioScope { pooled, per_matrix };
enum class RankOptimizer { gd, adam };

std::string_view to_string(LossKind k);
LossKind loss_kind_from_string(std::string_view s);

/// Stage-1 configuration. Presets follow the per-model-family defaults
/// (vision: MSE, beta=20, gamma=300, lr1=0.2; llm/mllm use L1 with larger
/// beta/gamma; peft uses MSE with gamma=100).
struct RankSearchConfig {
  LossKind loss_kind = LossKind::mse;
  double gamma = 300.0;
  double target_ratio = 0.2;  // R_tar in (0, 1]
  double lr1 = 0.2;
  int max_iters = 500;
  double beta = 20.0;
  std::uint64_t seed = 0;
  RankOptimizer optimizer = RankOptimizer::gd;
  RatioScope ratio_scope = RatioScope::pooled;
  double early_stop_tol = 1e-8;
  int early_stop_window = 20;

  void validate() const;  // throws ConfigError naming the offending field

  static RankSearchConfig vision();
  static RankSearchConfig llm();
  static RankSearchConfig peft();
  static RankSearchConfig mllm();
  static RankSearchConfig preset(std::string_view name);
};

inline constexpr int kSharedTask = -1;

/// One (component, layer) slot of a rank allocation. task == kSharedTask
/// denotes the shared component.
struct RankEntry {
  int task = kSharedTask;
  std::string layer;
  int rows = 0;
  int cols = 0;
  int max_rank = 0;  // k = min(rows, cols)
  double continuous = 0.0;
  int rounded = 0;
};

/// Continuous and rounded ranks for every (component, layer), plus the ratio
/// achieved by the rounded ranks.
struct RankAllocation {
  std::vector<RankEntry> entries;
  double achieved_ratio = 0.0;

  const RankEntry* find(int task, const std::string& layer) const;
  /// rounded = round-half-up(continuous) clamped to [0, max_rank], then
  /// achieved_ratio is recomputed from the rounded ranks.
  void round_and_clamp();
};

/// Skeleton allocation (dims and max ranks filled in, ranks zero) in the
/// canonical component order: shared per layer, then each task per layer.
RankAllocation make_skeleton(const Decomposition& decomp);

/// sigma_i * (0.5 * tanh(beta * (r - i)) + 0.5), indices 1-based.
Vector smooth_truncate(const Vector& singular_values, double r, double beta);

/// U * diag(smooth_truncate(S, r, beta)) * V^T. As beta grows with r at a
/// half-integer this converges to hard_truncate(floor(r)).
Matrix soft_reconstruct(const SvdTriple& triple, double r, double beta);

/// Mean over tasks of the summed per-layer reconstruction error:
///   MSE: (1/T) sum_t sum_l ||recon - target||_F^2
///   L1:  same structure with an entrywise absolute sum.
/// Both containers are indexed [task][layer].
double task_loss(const std::vector<std::vector<Matrix>>& reconstructed,
                 const std::vector<std::vector<Matrix>>& originals, LossKind kind);

/// sum_l r_l (m_l + n_l) / sum_l m_l n_l. Continuous ranks allowed.
struct RankedDims {
  double rank = 0.0;
  int rows = 0;
  int cols = 0;
};
double compression_ratio(std::span<const RankedDims> items);
double compression_ratio(const RankAllocation& alloc, bool use_rounded = true);

/// L = L_task + gamma * |R_now - R_target|.
double total_loss(double task_loss_value, double ratio_now, double ratio_target, double gamma);

/// Compression-penalty subgradient pieces for one component:
///   gamma * sign(R_now - R_target) * slope, slope = (m+n)/sum(mn).
/// The subgradient at R_now == R_target is zero by convention.
struct RatioPenaltyTerm {
  double gamma = 0.0;
  double sign = 0.0;
  double slope = 0.0;
};

/// dL_task/dM for a reconstruction residual (residual = recon - target):
/// MSE: 2 * weight * residual; L1: weight * sign(residual).
Matrix loss_grad_wrt_reconstruction(const Matrix& residual, LossKind kind, double weight);

/// Analytic dL/dr with loss_grad = dL_task/dM already accumulated for this
/// component (for the shared component that is the sum over tasks):
///   sum_i (U^T loss_grad V)_ii * s_i * 0.5 * beta * sech^2(beta (r - i))
///   + gamma * sign * slope
double grad_rank(const SvdTriple& triple, double r, double beta, const Matrix& loss_grad,
                 const RatioPenaltyTerm& ratio);

/// Single-component convenience form: residual-to-target plus loss kind and
/// weight, chained through the reconstruction and the ratio penalty.
double grad_rank(const SvdTriple& triple, double r, double beta, const Matrix& residual,
                 LossKind kind, double weight, const RatioPenaltyTerm& ratio);

struct RankSearchTracePoint {
  int iter = 0;
  double task_loss = 0.0;
  double ratio = 0.0;
  double total_loss = 0.0;
};

struct RankSearchResult {
  RankAllocation allocation;
  std::vector<RankSearchTracePoint> trace;
  int iterations = 0;
};

/// Joint gradient descent on every continuous rank against
/// L_task + gamma * |R_now - R_target|. Ranks start at k * target_ratio and
/// are clamped to [0, k] after every step. Deterministic given the config.
/// Throws NonFiniteError if the loss leaves the finite range.
RankSearchResult optimize_ranks(const Decomposition& decomp, const DecompositionSvd& svds,
                                const RankSearchConfig& config);

/// Global rank-scaling: continuous ranks multiplied by `factor`, re-rounded,
/// re-clamped, ratio recomputed. Used to move between parameter budgets.
RankAllocation scale_budget(const RankAllocation& alloc, double factor);

/// Task loss of an integer allocation under hard truncation at the rounded
/// ranks. This is the deployment semantics of an allocation and the common
/// yardstick for comparing allocators.
double allocation_task_loss(const Decomposition& decomp, const DecompositionSvd& svds,
                            const RankAllocation& alloc, LossKind kind);

/// iteration, L_task, R_now, L_total as CSV, one row per optimization step.
void write_trace_csv(const std::filesystem::path& path,
                     std::span<const RankSearchTracePoint> trace);

}  // namespace slimmerge
