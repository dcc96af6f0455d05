#pragma once

#include <filesystem>
#include <string>

#include "slimmerge/decompose.hpp"
#include "slimmerge/rank_search.hpp"
#include "slimmerge/refine.hpp"

namespace slimmerge {

/// Pipeline artifact persistence on top of the tensor container.
/// Decompositions and factors live in the f32 model format (factors are the
/// deployed, 32-bit-accounted parameters); the SVD cache stores lossless f64
/// so reloaded triples keep their orthonormality contract. `meta_json`
/// carries provenance (config hash) into each manifest.

void save_decomposition(const Decomposition& decomp, const std::filesystem::path& path,
                        const std::string& meta_json = {});
Decomposition load_decomposition(const std::filesystem::path& path);

void save_svd_cache(const DecompositionSvd& svds, const Decomposition& decomp,
                    const std::filesystem::path& path, const std::string& meta_json = {});
DecompositionSvd load_svd_cache(const std::filesystem::path& path, const Decomposition& decomp);

void save_factors(const FactorSet& factors, const std::vector<std::string>& task_ids,
                  const std::filesystem::path& path, const std::string& meta_json = {});
FactorSet load_factors(const std::filesystem::path& path);

/// RankAllocation round-trips through a small JSON document.
void save_allocation(const RankAllocation& alloc, const std::vector<std::string>& task_ids,
                     const std::filesystem::path& path, const std::string& meta_json = {});
RankAllocation load_allocation(const std::filesystem::path& path);

}  // namespace slimmerge
