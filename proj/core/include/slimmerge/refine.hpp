#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "slimmerge/decompose.hpp"
#include "slimmerge/layer_matrix.hpp"

namespace slimmerge {

/// Rank-r factor pair M ~= A * B for one component at one layer.
struct FactorPair {
  int task = -1;  // kSharedTask for the shared component
  std::string layer;
  Matrix A;  // m x r
  Matrix B;  // r x n

  Eigen::Index rank() const { return A.cols(); }
  Matrix product() const;  // m x n; rank 0 yields the zero matrix
};

/// Complete factor set: shared plus every task, per layer.
struct FactorSet {
  std::vector<FactorPair> factors;

  const FactorPair* find(int task, const std::string& layer) const;
  FactorPair& at(int task, const std::string& layer);              // MissingFactorError
  const FactorPair& at(int task, const std::string& layer) const;  // MissingFactorError
};

enum class WeightingKind { uniform, temperature };

/// Stage-2 configuration: Adam on the factor pairs with the stored task
/// vectors as reconstruction targets.
struct RefineConfig {
  double lr2 = 1e-3;
  int max_iters = 1000;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double reg_lambda = 0.0;
  WeightingKind weighting = WeightingKind::uniform;
  double tau = 1.0;
  std::uint64_t seed = 0;
  double early_stop_rel_tol = 1e-9;
  int early_stop_window = 50;
  /// Regularizer anchor: the truncated init product by default, or the
  /// pre-truncation matrix when set.
  bool reg_to_pre_truncation = false;

  void validate() const;
};

/// SVD-initialized factors: A = U_r sqrt(S_r), B = sqrt(S_r) V_r^T, so
/// A*B equals the top-r truncation and ||A||_F == ||B||_F.
FactorPair init_factors(const SvdTriple& triple, Eigen::Index r);
FactorPair init_factors(const LayerMatrix& m0, Eigen::Index r);

/// LoRA-convention random init for the ablation baseline: A ~ N(0, 1/sqrt(r)),
/// B = 0, so the initial product is zero.
FactorPair random_init_factors(Eigen::Index rows, Eigen::Index cols, Eigen::Index r,
                               std::uint64_t seed);

/// Optional anchors M^(0) for the reg_lambda * ||A B - M^(0)||_F^2 term,
/// keyed by (task, layer).
struct RegTargets {
  std::map<std::pair<int, std::string>, Matrix> anchor;
};

/// L_task = (1/T) sum_t sum_l || A_s B_s + A_t B_t - tau_{t,l} ||_F^2
/// (+ reg_lambda * sum ||A B - M^(0)||_F^2 when anchors are given).
double refine_loss(const FactorSet& factors, const TaskVectorSet& targets,
                   double reg_lambda = 0.0, const RegTargets* reg = nullptr);

/// Closed-form gradients of refine_loss. With E = A_s B_s + A_t B_t - tau:
///   dL/dA_t = (2/T) w_t E B_t^T,  dL/dB_t = (2/T) w_t A_t^T E,
/// and the shared factors accumulate the sum over tasks.
struct FactorGrads {
  std::vector<Matrix> dA;  // aligned with FactorSet::factors
  std::vector<Matrix> dB;
};
FactorGrads grad_factors(const FactorSet& factors, const TaskVectorSet& targets,
                         std::span<const double> task_weights = {}, double reg_lambda = 0.0,
                         const RegTargets* reg = nullptr);

struct RefineTracePoint {
  int iter = 0;
  std::vector<double> per_task;  // sum_l ||E_{t,l}||_F^2
  double total = 0.0;            // unweighted L_task
};

struct RefineResult {
  FactorSet factors;
  std::vector<RefineTracePoint> trace;
  int iterations = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

/// Adam on all factors jointly. Temperature weighting scales task t's loss
/// term by w_t = T * softmax(l_t / (mean(l) * tau))_t, recomputed each
/// iteration; uniform weighting is the tau -> infinity limit. The returned
/// factors are the best iterate seen, so final_loss <= initial_loss.
/// reg_override supplies regularizer anchors (e.g. the pre-truncation
/// matrices); by default the anchors are the init factor products.
RefineResult refine(FactorSet init, const TaskVectorSet& targets, const RefineConfig& config,
                    const RegTargets* reg_override = nullptr);

/// iteration, per-task losses, total as CSV.
void write_refine_trace_csv(const std::filesystem::path& path,
                            std::span<const RefineTracePoint> trace);

}  // namespace slimmerge
