#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "slimmerge/layer_matrix.hpp"

namespace slimmerge {

/// One named tensor inside an archive. `group` distinguishes tasks or
/// components ("" for flat archives such as checkpoints). Model artifacts
/// store f32; numeric caches (SVD factors) may request lossless f64.
enum class TensorDtype { f32, f64 };

struct NamedTensor {
  std::string name;
  std::string group;
  ModuleKind kind = ModuleKind::other;
  TensorDtype dtype = TensorDtype::f32;
  Matrix data;
};

/// Self-describing tensor container:
///
///   bytes 0..3    magic "SMTF"
///   bytes 4..7    format version (u32 LE)
///   bytes 8..15   manifest length in bytes (u64 LE)
///   ...           manifest (UTF-8 JSON: artifact kind, free-form meta,
///                 per-tensor name/group/kind/rows/cols/dtype/offset/bytes)
///   ...           blob of little-endian f32 values, column-major per tensor
///
/// Offsets in the manifest are relative to the blob start. Values are stored
/// at 32 bits and widened to 64-bit doubles on load, so save-after-load
/// reproduces the tensor payload bit-exactly.
struct TensorArchive {
  std::string artifact;   // e.g. "task_vector_set", "checkpoint", "factors"
  std::string meta_json;  // free-form manifest block, must be a JSON object
  std::vector<NamedTensor> tensors;

  void save(const std::filesystem::path& path) const;           // IoError
  static TensorArchive load(const std::filesystem::path& path); // FormatError, IoError

  const NamedTensor* find(const std::string& group, const std::string& name) const;
};

inline constexpr std::uint32_t kTensorFormatVersion = 1;

}  // namespace slimmerge
