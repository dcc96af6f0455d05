#include "slimmerge/tensor_file.hpp"

#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "slimmerge/errors.hpp"

namespace slimmerge {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'S', 'M', 'T', 'F'};
constexpr std::uint64_t kHeaderBytes = 16;  // magic + version + manifest length

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

// Little-endian, column-major. The host is assumed little-endian; the raw
// bytes are copied directly.
void append_tensor_blob(std::string& blob, const Matrix& m, TensorDtype dtype) {
  const std::size_t old = blob.size();
  if (dtype == TensorDtype::f32) {
    Eigen::MatrixXf f = m.cast<float>();
    const std::size_t nbytes = static_cast<std::size_t>(m.size()) * sizeof(float);
    blob.resize(old + nbytes);
    std::memcpy(blob.data() + old, f.data(), nbytes);
  } else {
    const std::size_t nbytes = static_cast<std::size_t>(m.size()) * sizeof(double);
    blob.resize(old + nbytes);
    std::memcpy(blob.data() + old, m.data(), nbytes);
  }
}

}  // namespace

void TensorArchive::save(const std::filesystem::path& path) const {
  json manifest;
  manifest["artifact"] = artifact;
  if (!meta_json.empty()) {
    json meta = json::parse(meta_json, nullptr, false);
    if (meta.is_discarded()) throw IoError("meta_json is not valid JSON");
    manifest["meta"] = std::move(meta);
  } else {
    manifest["meta"] = json::object();
  }
  manifest["layout"] = "col-major";

  std::string blob;
  json records = json::array();
  for (const auto& t : tensors) {
    json rec;
    rec["name"] = t.name;
    rec["group"] = t.group;
    rec["kind"] = std::string(to_string(t.kind));
    rec["rows"] = t.data.rows();
    rec["cols"] = t.data.cols();
    rec["dtype"] = t.dtype == TensorDtype::f32 ? "f32" : "f64";
    rec["offset"] = blob.size();
    rec["bytes"] = static_cast<std::uint64_t>(t.data.size()) *
                   (t.dtype == TensorDtype::f32 ? sizeof(float) : sizeof(double));
    records.push_back(std::move(rec));
    append_tensor_blob(blob, t.data, t.dtype);
  }
  manifest["tensors"] = std::move(records);

  const std::string manifest_text = manifest.dump();

  std::string header;
  header.append(kMagic, 4);
  put_u32(header, kTensorFormatVersion);
  put_u64(header, manifest_text.size());

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(manifest_text.data(), static_cast<std::streamsize>(manifest_text.size()));
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

TensorArchive TensorArchive::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::string raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failure on '" + path.string() + "'");

  if (raw.size() < kHeaderBytes) throw FormatError(0, "file shorter than header");
  if (std::memcmp(raw.data(), kMagic, 4) != 0) throw FormatError(0, "bad magic");
  const std::uint32_t version = get_u32(raw.data() + 4);
  if (version != kTensorFormatVersion) {
    throw FormatError(4, "unsupported format version " + std::to_string(version));
  }
  const std::uint64_t manifest_len = get_u64(raw.data() + 8);
  if (kHeaderBytes + manifest_len > raw.size()) {
    throw FormatError(8, "manifest length exceeds file size");
  }

  json manifest = json::parse(raw.begin() + kHeaderBytes,
                              raw.begin() + static_cast<std::ptrdiff_t>(kHeaderBytes + manifest_len),
                              nullptr, false);
  if (manifest.is_discarded()) throw FormatError(kHeaderBytes, "manifest is not valid JSON");

  TensorArchive archive;
  archive.artifact = manifest.value("artifact", "");
  archive.meta_json = manifest.contains("meta") ? manifest["meta"].dump() : "{}";

  const std::uint64_t blob_start = kHeaderBytes + manifest_len;
  const std::uint64_t blob_size = raw.size() - blob_start;

  if (!manifest.contains("tensors") || !manifest["tensors"].is_array()) {
    throw FormatError(kHeaderBytes, "manifest has no tensor list");
  }
  for (const auto& rec : manifest["tensors"]) {
    NamedTensor t;
    t.name = rec.value("name", "");
    t.group = rec.value("group", "");
    t.kind = module_kind_from_string(rec.value("kind", "other"));
    const std::int64_t rows = rec.value("rows", -1);
    const std::int64_t cols = rec.value("cols", -1);
    const std::uint64_t offset = rec.value("offset", std::uint64_t{0});
    const std::uint64_t nbytes = rec.value("bytes", std::uint64_t{0});
    if (rows < 1 || cols < 1) {
      throw FormatError(kHeaderBytes, "tensor '" + t.name + "' has non-positive dims");
    }
    const std::string dtype = rec.value("dtype", "");
    if (dtype != "f32" && dtype != "f64") {
      throw FormatError(kHeaderBytes, "tensor '" + t.name + "' has unsupported dtype");
    }
    t.dtype = dtype == "f32" ? TensorDtype::f32 : TensorDtype::f64;
    const std::uint64_t elem = t.dtype == TensorDtype::f32 ? sizeof(float) : sizeof(double);
    const std::uint64_t expect = static_cast<std::uint64_t>(rows) * cols * elem;
    if (nbytes != expect) {
      throw FormatError(kHeaderBytes, "tensor '" + t.name + "' byte count mismatch");
    }
    if (offset + nbytes > blob_size) {
      throw FormatError(blob_start + offset, "tensor '" + t.name + "' extends past end of file");
    }
    if (t.dtype == TensorDtype::f32) {
      Eigen::MatrixXf f(rows, cols);
      std::memcpy(f.data(), raw.data() + blob_start + offset, nbytes);
      t.data = f.cast<double>();
    } else {
      t.data.resize(rows, cols);
      std::memcpy(t.data.data(), raw.data() + blob_start + offset, nbytes);
    }
    archive.tensors.push_back(std::move(t));
  }
  return archive;
}

const NamedTensor* TensorArchive::find(const std::string& group, const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.group == group && t.name == name) return &t;
  }
  return nullptr;
}

}  // namespace slimmerge
