#pragma once

#include <filesystem>
#include <string>

#include "slimmerge/layer_matrix.hpp"

namespace slimmerge {

/// Task vector tau = fine_tuned - base, layer by layer.
/// Throws MissingLayerError if the key sets differ, DimMismatchError if a
/// shared layer has different shapes.
TaskEntry diff(const Checkpoint& fine_tuned, const Checkpoint& base);

/// Persistence for task-vector sets and checkpoints (see tensor_file.hpp for
/// the container format). `meta_json`, when non-empty, is stored verbatim in
/// the manifest's "meta" block (provenance, config hashes, ...).
void save_set(const TaskVectorSet& set, const std::filesystem::path& path,
              const std::string& meta_json = {});
TaskVectorSet load_set(const std::filesystem::path& path);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path,
                     const std::string& meta_json = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Deterministic synthetic task vectors with planted shared/expert structure.
/// Pure function of the spec, including the seed; generated values are
/// rounded to f32 so in-memory contents equal a saved-and-reloaded copy.
TaskVectorSet generate_synthetic(const SyntheticSpec& spec);

}  // namespace slimmerge
