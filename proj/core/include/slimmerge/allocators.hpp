#pragma once

#include <cstdint>
#include <span>
#include <string_view>

#include "slimmerge/decompose.hpp"
#include "slimmerge/rank_search.hpp"

namespace slimmerge {

/// Non-differentiable rank-allocation baselines. Budgets are expressed in the
/// compression-ratio metric (sum r (m+n) / sum mn) and met by bisecting one
/// scalar knob: a rank fraction for uniform/random, an energy threshold for
/// energy-based. Throws InfeasibleBudgetError when rounding granularity
/// prevents landing inside the accepted window.

enum class AllocatorKind { uniform, random, energy };

std::string_view to_string(AllocatorKind k);
AllocatorKind allocator_kind_from_string(std::string_view s);

/// Widest tolerated deviation |achieved - budget| for any allocator.
inline constexpr double kBudgetWindow = 0.05;

/// One rank fraction rho applied to every component-layer, r = round(rho * k),
/// with rho bisected so the achieved ratio is maximal without exceeding
/// budget * 1.02.
RankAllocation allocate_uniform(const RankAllocation& skeleton, double budget);

/// Ranks drawn uniformly per component-layer, then globally rescaled and
/// rounded to land within +-0.02 of the budget. Deterministic per seed.
RankAllocation allocate_random(const RankAllocation& skeleton, double budget,
                               std::uint64_t seed);

/// Whether expert spectra are thresholded per component or summed across
/// tasks per layer before thresholding.
enum class EnergyScope { per_component, pooled_tasks };

/// Per component-layer, the smallest r whose cumulative singular-value energy
/// sum_{i<=r} s_i^2 / sum s_i^2 reaches a global threshold eta, with eta
/// bisected to land within +-0.02 of the budget.
RankAllocation allocate_energy(const DecompositionSvd& svds, const RankAllocation& skeleton,
                               double budget, EnergyScope scope = EnergyScope::per_component);

/// Energy allocation at a fixed threshold (no budget search); exposed for
/// tests and diagnostics.
RankAllocation energy_at_threshold(const DecompositionSvd& svds, const RankAllocation& skeleton,
                                   double eta, EnergyScope scope = EnergyScope::per_component);

}  // namespace slimmerge
