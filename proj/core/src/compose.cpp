#include "slimmerge/compose.hpp"

#include <cmath>
#include <sstream>

#include "slimmerge/rank_search.hpp"

namespace slimmerge {

bool RoutingWeights::is_one_hot() const {
  int ones = 0;
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    if (w[i] == 1.0) {
      ++ones;
    } else if (w[i] != 0.0) {
      return false;
    }
  }
  return ones == 1;
}

RoutingWeights ideal_route(int task_id, int task_count) {
  if (task_id < 0 || task_id >= task_count) throw TaskOutOfRangeError(task_id, task_count);
  RoutingWeights r;
  r.w = Vector::Zero(task_count);
  r.w[task_id] = 1.0;
  return r;
}

RoutingWeights explicit_route(Vector w) {
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    if (!std::isfinite(w[i])) throw Error("routing weight " + std::to_string(i) + " is not finite");
  }
  RoutingWeights r;
  r.w = std::move(w);
  return r;
}

namespace {

/// Factor assembly for one layer: A_s B_s + sum_t w_t A_t B_t, checked
/// against the expected shape.
Matrix assemble_delta(const FactorSet& factors, const RoutingWeights& weights,
                      const std::string& layer, Eigen::Index rows, Eigen::Index cols) {
  const FactorPair& shared = factors.at(kSharedTask, layer);
  if (shared.A.rows() != rows || shared.B.cols() != cols) {
    throw DimMismatchError(layer, "shared factors vs base");
  }
  Matrix delta = shared.product();
  for (int t = 0; t < weights.task_count(); ++t) {
    if (weights.w[t] == 0.0) continue;
    const FactorPair& expert = factors.at(t, layer);
    if (expert.A.rows() != rows || expert.B.cols() != cols) {
      throw DimMismatchError(layer, "expert factors vs base");
    }
    delta += weights.w[t] * expert.product();
  }
  return delta;
}

}  // namespace

MergedModel compose(const Checkpoint& base, const FactorSet& factors,
                    const RoutingWeights& weights) {
  MergedModel merged;
  merged.model.meta = base.meta;

  for (const auto& layer : base.layers) {
    const bool has_factors = factors.find(kSharedTask, layer.name) != nullptr ||
                             factors.find(0, layer.name) != nullptr;
    if (!has_factors) {
      // Backbone layer without low-rank modules passes through untouched.
      merged.model.layers.insert(layer);
      continue;
    }
    Matrix theta =
        layer.data + assemble_delta(factors, weights, layer.name, layer.rows(), layer.cols());
    merged.model.layers.insert({layer.name, layer.kind, std::move(theta)});
  }

  std::ostringstream prov;
  prov << "{\"base_id\":\"" << base.meta.model_id << "\",\"weights\":[";
  for (Eigen::Index i = 0; i < weights.w.size(); ++i) {
    if (i > 0) prov << ',';
    prov << weights.w[i];
  }
  prov << "],\"factor_count\":" << factors.factors.size() << "}";
  merged.provenance_json = prov.str();
  return merged;
}

LayerMap peft_compose(const std::vector<TaskEntry>& task_adapters, const FactorSet& factors,
                      const RoutingWeights& weights) {
  if (task_adapters.empty()) throw Error("no task adapters given");
  const LayerMap& ref = task_adapters.front().layers;
  for (const auto& adapter : task_adapters) {
    for (const auto& layer : ref) {
      const LayerMatrix* other = adapter.layers.find(layer.name);
      if (other == nullptr) throw MissingLayerError(layer.name);
      if (other->rows() != layer.rows() || other->cols() != layer.cols()) {
        throw DimMismatchError(layer.name, "across adapters");
      }
    }
  }

  LayerMap merged;
  for (const auto& layer : ref) {
    merged.insert({layer.name, layer.kind,
                   assemble_delta(factors, weights, layer.name, layer.rows(), layer.cols())});
  }
  return merged;
}

}  // namespace slimmerge
