#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "slimmerge/errors.hpp"

namespace slimmerge {

/// Dense compute type. Storage on disk is 32-bit float; in memory everything
/// runs at 64-bit so SVD and gradient checks have headroom.
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class ModuleKind { attn_in, attn_out, mlp_fc, mlp_proj, other };

std::string_view to_string(ModuleKind kind);
ModuleKind module_kind_from_string(std::string_view s);

/// One weight-delta matrix: the unit of SVD and rank allocation.
struct LayerMatrix {
  std::string name;
  ModuleKind kind = ModuleKind::other;
  Matrix data;

  Eigen::Index rows() const { return data.rows(); }
  Eigen::Index cols() const { return data.cols(); }
  bool all_finite() const { return data.allFinite(); }
};

/// Insertion-ordered map of uniquely named layers. Order is preserved so round
/// trips through the on-disk format keep the tensor payload bit-exact.
class LayerMap {
 public:
  void insert(LayerMatrix layer) {
    if (index_.count(layer.name) != 0) {
      throw Error("duplicate layer name '" + layer.name + "'");
    }
    index_.emplace(layer.name, layers_.size());
    layers_.push_back(std::move(layer));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const LayerMatrix* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &layers_[it->second];
  }

  const LayerMatrix& at(const std::string& name) const {
    const LayerMatrix* lm = find(name);
    if (lm == nullptr) throw MissingLayerError(name);
    return *lm;
  }

  LayerMatrix& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw MissingLayerError(name);
    return layers_[it->second];
  }

  std::size_t size() const { return layers_.size(); }
  bool empty() const { return layers_.empty(); }

  auto begin() const { return layers_.begin(); }
  auto end() const { return layers_.end(); }
  auto begin() { return layers_.begin(); }
  auto end() { return layers_.end(); }

  const LayerMatrix& operator[](std::size_t i) const { return layers_[i]; }
  LayerMatrix& operator[](std::size_t i) { return layers_[i]; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(layers_.size());
    for (const auto& l : layers_) out.push_back(l.name);
    return out;
  }

 private:
  std::vector<LayerMatrix> layers_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct CheckpointMeta {
  std::string model_id;
  std::optional<int> task_hint;  // expected task count, if known
};

/// Full parameter set of one model: base (theta_0) or fine-tuned (theta_t).
struct Checkpoint {
  LayerMap layers;
  CheckpointMeta meta;

  /// Layer names distinct by construction; checks the finiteness invariant.
  void validate() const;
};

/// One task vector: tau_t = theta_t - theta_0, stored layer by layer.
struct TaskEntry {
  std::string task_id;
  LayerMap layers;
};

/// T task vectors over a common layer geometry, plus base-model metadata.
struct TaskVectorSet {
  std::vector<TaskEntry> tasks;
  CheckpointMeta base_meta;

  int task_count() const { return static_cast<int>(tasks.size()); }

  /// Every task must expose the same layer names and per-layer dims; T >= 1.
  void validate() const;
};

/// Recipe for a synthetic task-vector set with planted low-rank structure:
///   tau_t = similarity * C + (1 - similarity) * D_t + noise
/// where C has rank shared_rank (common to all tasks) and each D_t has rank
/// expert_rank. Factor columns are unit-normalized; when the layer is wide
/// enough the left factors of C and all D_t are drawn mutually orthogonal so
/// cross-task inner products vanish exactly.
struct SyntheticSpec {
  int tasks = 2;
  int layers = 2;
  std::vector<std::pair<int, int>> dims;  // (rows, cols) per layer
  int shared_rank = 2;
  int expert_rank = 1;
  double similarity = 0.5;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;

  void validate() const;  // throws SpecError
};

}  // namespace slimmerge
