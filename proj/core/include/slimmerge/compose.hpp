#pragma once

#include <string>
#include <vector>

#include "slimmerge/layer_matrix.hpp"
#include "slimmerge/refine.hpp"

namespace slimmerge {

/// Length-T routing weights. The ideal router is one-hot on the ground-truth
/// task id; explicit weights are allowed for experimentation beyond that
/// protocol.
struct RoutingWeights {
  Vector w;

  int task_count() const { return static_cast<int>(w.size()); }
  bool is_one_hot() const;
};

/// One-hot routing to `task_id`. Throws TaskOutOfRangeError.
RoutingWeights ideal_route(int task_id, int task_count);

/// Explicit weights; entries must be finite.
RoutingWeights explicit_route(Vector w);

/// Merged parameters theta*(x) together with how they were produced.
struct MergedModel {
  Checkpoint model;
  std::string provenance_json;  // base id, allocation summary, weights used
};

/// theta* = theta_0 + A_s B_s + sum_t w_t A_t B_t per layer. Base layers
/// without factors pass through untouched; the base checkpoint itself is
/// never mutated. Throws DimMismatchError / MissingFactorError.
MergedModel compose(const Checkpoint& base, const FactorSet& factors, const RoutingWeights& weights);

/// Adapter-space composition for PEFT inputs: the task vector is the
/// materialized LoRA delta itself, so the merged adapter is
///   LoRA* = M_s + sum_t w_t (LoRA_t - LoRA_s)
/// assembled from the pipeline's factor pairs. `task_adapters` supplies the
/// layer geometry to validate against. Equals the full-parameter pipeline on
/// materialized deltas.
LayerMap peft_compose(const std::vector<TaskEntry>& task_adapters, const FactorSet& factors,
                      const RoutingWeights& weights);

}  // namespace slimmerge
