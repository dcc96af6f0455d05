#include "slimmerge/model_store.hpp"

#include <Eigen/QR>
#include <algorithm>
#include <array>
#include <nlohmann/json.hpp>

#include "slimmerge/tensor_file.hpp"
#include "rng.hpp"

namespace slimmerge {

namespace {
using nlohmann::json;
}

std::string_view to_string(ModuleKind kind) {
  switch (kind) {
    case ModuleKind::attn_in: return "attn_in";
    case ModuleKind::attn_out: return "attn_out";
    case ModuleKind::mlp_fc: return "mlp_fc";
    case ModuleKind::mlp_proj: return "mlp_proj";
    case ModuleKind::other: return "other";
  }
  return "other";
}

ModuleKind module_kind_from_string(std::string_view s) {
  if (s == "attn_in") return ModuleKind::attn_in;
  if (s == "attn_out") return ModuleKind::attn_out;
  if (s == "mlp_fc") return ModuleKind::mlp_fc;
  if (s == "mlp_proj") return ModuleKind::mlp_proj;
  return ModuleKind::other;
}

void Checkpoint::validate() const {
  for (const auto& layer : layers) {
    if (layer.rows() < 1 || layer.cols() < 1) {
      throw Error("layer '" + layer.name + "' has empty dims");
    }
    if (!layer.all_finite()) {
      throw Error("layer '" + layer.name + "' contains NaN/Inf");
    }
  }
}

void TaskVectorSet::validate() const {
  if (tasks.empty()) throw Error("task vector set has no tasks");
  const LayerMap& ref = tasks.front().layers;
  for (const auto& task : tasks) {
    if (task.layers.size() != ref.size()) {
      throw MissingLayerError("(task '" + task.task_id + "' layer count differs)");
    }
    for (const auto& layer : ref) {
      const LayerMatrix* other = task.layers.find(layer.name);
      if (other == nullptr) throw MissingLayerError(layer.name);
      if (other->rows() != layer.rows() || other->cols() != layer.cols()) {
        throw DimMismatchError(layer.name, "across tasks");
      }
    }
  }
}

void SyntheticSpec::validate() const {
  if (tasks < 1) throw SpecError("tasks must be >= 1");
  if (layers < 1) throw SpecError("layers must be >= 1");
  if (static_cast<int>(dims.size()) != layers) {
    throw SpecError("dims must list one (rows, cols) pair per layer");
  }
  if (shared_rank < 0 || expert_rank < 0) throw SpecError("ranks must be >= 0");
  for (const auto& [m, n] : dims) {
    if (m < 1 || n < 1) throw SpecError("layer dims must be positive");
    if (shared_rank + expert_rank > std::min(m, n)) {
      throw SpecError("shared_rank + expert_rank exceeds min(rows, cols)");
    }
  }
  if (similarity < 0.0 || similarity > 1.0) throw SpecError("similarity must be in [0, 1]");
  if (noise_sigma < 0.0) throw SpecError("noise_sigma must be >= 0");
}

TaskEntry diff(const Checkpoint& fine_tuned, const Checkpoint& base) {
  for (const auto& layer : base.layers) {
    if (!fine_tuned.layers.contains(layer.name)) throw MissingLayerError(layer.name);
  }
  TaskEntry entry;
  entry.task_id = fine_tuned.meta.model_id;
  for (const auto& layer : fine_tuned.layers) {
    const LayerMatrix* b = base.layers.find(layer.name);
    if (b == nullptr) throw MissingLayerError(layer.name);
    if (b->rows() != layer.rows() || b->cols() != layer.cols()) {
      throw DimMismatchError(layer.name);
    }
    entry.layers.insert({layer.name, layer.kind, layer.data - b->data});
  }
  return entry;
}

namespace {

json parse_meta(const std::string& meta_json) {
  if (meta_json.empty()) return json::object();
  json meta = json::parse(meta_json, nullptr, false);
  if (meta.is_discarded() || !meta.is_object()) {
    throw IoError("meta_json must be a JSON object");
  }
  return meta;
}

CheckpointMeta meta_from_manifest(const json& meta) {
  CheckpointMeta out;
  out.model_id = meta.value("model_id", "");
  if (meta.contains("task_hint") && meta["task_hint"].is_number_integer()) {
    out.task_hint = meta["task_hint"].get<int>();
  }
  return out;
}

}  // namespace

void save_set(const TaskVectorSet& set, const std::filesystem::path& path,
              const std::string& meta_json) {
  json meta = parse_meta(meta_json);
  meta["model_id"] = set.base_meta.model_id;
  if (set.base_meta.task_hint) meta["task_hint"] = *set.base_meta.task_hint;

  TensorArchive archive;
  archive.artifact = "task_vector_set";
  archive.meta_json = meta.dump();
  for (const auto& task : set.tasks) {
    for (const auto& layer : task.layers) {
      archive.tensors.push_back({layer.name, task.task_id, layer.kind, TensorDtype::f32, layer.data});
    }
  }
  archive.save(path);
}

TaskVectorSet load_set(const std::filesystem::path& path) {
  TensorArchive archive = TensorArchive::load(path);
  if (archive.artifact != "task_vector_set") {
    throw FormatError(16, "expected a task_vector_set archive, got '" + archive.artifact + "'");
  }
  TaskVectorSet set;
  set.base_meta = meta_from_manifest(json::parse(archive.meta_json));
  for (auto& t : archive.tensors) {
    TaskEntry* entry = nullptr;
    for (auto& existing : set.tasks) {
      if (existing.task_id == t.group) {
        entry = &existing;
        break;
      }
    }
    if (entry == nullptr) {
      set.tasks.push_back({t.group, {}});
      entry = &set.tasks.back();
    }
    if (entry->layers.contains(t.name)) {
      throw FormatError(16, "duplicate layer '" + t.name + "' in task '" + t.group + "'");
    }
    entry->layers.insert({t.name, t.kind, std::move(t.data)});
  }
  try {
    set.validate();
  } catch (const Error& e) {
    throw FormatError(16, e.what());
  }
  return set;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path,
                     const std::string& meta_json) {
  json meta = parse_meta(meta_json);
  meta["model_id"] = ckpt.meta.model_id;
  if (ckpt.meta.task_hint) meta["task_hint"] = *ckpt.meta.task_hint;

  TensorArchive archive;
  archive.artifact = "checkpoint";
  archive.meta_json = meta.dump();
  for (const auto& layer : ckpt.layers) {
    archive.tensors.push_back({layer.name, "", layer.kind, TensorDtype::f32, layer.data});
  }
  archive.save(path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  TensorArchive archive = TensorArchive::load(path);
  if (archive.artifact != "checkpoint") {
    throw FormatError(16, "expected a checkpoint archive, got '" + archive.artifact + "'");
  }
  Checkpoint ckpt;
  ckpt.meta = meta_from_manifest(json::parse(archive.meta_json));
  for (auto& t : archive.tensors) {
    if (ckpt.layers.contains(t.name)) {
      throw FormatError(16, "duplicate layer '" + t.name + "'");
    }
    ckpt.layers.insert({t.name, t.kind, std::move(t.data)});
  }
  try {
    ckpt.validate();
  } catch (const Error& e) {
    throw FormatError(16, e.what());
  }
  return ckpt;
}

namespace {

Matrix gaussian_matrix(detail::Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Matrix m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c) {
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = rng.normal();
  }
  return m;
}

void normalize_columns(Matrix& m) {
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    const double norm = m.col(c).norm();
    if (norm > 0.0) m.col(c) /= norm;
  }
}

// Mildly decreasing planted spectrum: 1.0 down to 0.5 across the factor rank.
double planted_scale(int i, int rank) {
  if (rank <= 1) return 1.0;
  return 1.0 - 0.5 * static_cast<double>(i) / static_cast<double>(rank - 1);
}

constexpr std::array<ModuleKind, 4> kKindCycle = {ModuleKind::attn_in, ModuleKind::attn_out,
                                                  ModuleKind::mlp_fc, ModuleKind::mlp_proj};

}  // namespace

TaskVectorSet generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  detail::Rng rng(spec.seed);

  TaskVectorSet set;
  set.base_meta.model_id = "synthetic";
  set.base_meta.task_hint = spec.tasks;
  set.tasks.resize(spec.tasks);
  for (int t = 0; t < spec.tasks; ++t) set.tasks[t].task_id = "task_" + std::to_string(t);

  for (int l = 0; l < spec.layers; ++l) {
    const auto [m, n] = spec.dims[l];
    const int joint = spec.shared_rank + spec.tasks * spec.expert_rank;

    // Left and right factor pools. When one side is wide enough the joint
    // left (or right) factors are orthonormalized so cross-task and
    // shared/expert inner products vanish exactly.
    Matrix left = gaussian_matrix(rng, m, joint);
    Matrix right = gaussian_matrix(rng, n, joint);
    if (joint <= m && joint > 0) {
      left = Eigen::HouseholderQR<Matrix>(left).householderQ() * Matrix::Identity(m, joint);
      normalize_columns(right);
    } else if (joint <= n && joint > 0) {
      right = Eigen::HouseholderQR<Matrix>(right).householderQ() * Matrix::Identity(n, joint);
      normalize_columns(left);
    } else {
      normalize_columns(left);
      normalize_columns(right);
    }

    Matrix shared_plant = Matrix::Zero(m, n);
    for (int i = 0; i < spec.shared_rank; ++i) {
      shared_plant += planted_scale(i, spec.shared_rank) * left.col(i) * right.col(i).transpose();
    }

    const std::string name = "layer_" + std::to_string(l);
    const ModuleKind kind = kKindCycle[static_cast<std::size_t>(l) % kKindCycle.size()];

    for (int t = 0; t < spec.tasks; ++t) {
      Matrix expert_plant = Matrix::Zero(m, n);
      for (int i = 0; i < spec.expert_rank; ++i) {
        const int col = spec.shared_rank + t * spec.expert_rank + i;
        expert_plant +=
            planted_scale(i, spec.expert_rank) * left.col(col) * right.col(col).transpose();
      }
      Matrix tau = spec.similarity * shared_plant + (1.0 - spec.similarity) * expert_plant;
      if (spec.noise_sigma > 0.0) {
        tau += spec.noise_sigma * gaussian_matrix(rng, m, n);
      }
      // Round through storage precision so in-memory contents match a
      // saved-and-reloaded copy.
      tau = tau.cast<float>().cast<double>();
      set.tasks[t].layers.insert({name, kind, std::move(tau)});
    }
  }
  return set;
}

}  // namespace slimmerge
