#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "slimmerge/rank_search.hpp"

namespace slimmerge {

/// Geometry of one module type: d_in x d_out, replicated `count` times
/// (e.g. per transformer block).
struct ModuleGeom {
  std::string name;
  std::int64_t d_in = 0;
  std::int64_t d_out = 0;
  int count = 1;

  std::int64_t params() const { return d_in * d_out; }  // P
};

enum class AccountingMethod { static_merge, tall_mask, emr, tsv_c, didi };

std::string_view to_string(AccountingMethod m);
AccountingMethod accounting_method_from_string(std::string_view s);

/// Integer ranks for one module under the rank-allocated method: shared rank
/// plus one expert rank per task.
struct ModuleRanks {
  std::int64_t shared = 0;
  std::vector<std::int64_t> experts;
};

/// Inputs the per-method bit formulas need. Only the fields a method uses are
/// required; bits_cost throws MissingParamError otherwise.
struct AccountingParams {
  std::optional<std::int64_t> router_params;          // R
  std::optional<double> alpha;                        // per-task scalar fraction
  std::optional<std::int64_t> fixed_expert_rank;      // r_tsv
  std::optional<std::vector<ModuleRanks>> module_ranks;  // aligned with geoms
};

/// Per-component storage cost in bits. Float parameters cost 32 bits, binary
/// masks 1 bit; no entropy coding.
struct BitBreakdown {
  AccountingMethod method = AccountingMethod::static_merge;
  std::uint64_t backbone_bits = 0;
  std::uint64_t router_bits = 0;
  std::uint64_t shared_bits = 0;
  std::uint64_t expert_bits = 0;

  std::uint64_t total() const {
    return backbone_bits + router_bits + shared_bits + expert_bits;
  }
};

/// Exact integer bit cost of one method over the module geometry, shared
/// across T tasks:
///   static:     backbone 32P
///   mask-based: backbone 32P, router 32R, shared 32P, experts TP
///   scaled-mask (alpha): experts T(P + 32 alpha P)
///   fixed-rank experts:  experts 32 r_tsv (d_in + d_out)
///   rank-allocated:      shared 32 r_s (d_in + d_out),
///                        experts 32 sum_t r_t (d_in + d_out)
BitBreakdown bits_cost(AccountingMethod method, std::span<const ModuleGeom> geoms, int tasks,
                       const AccountingParams& params);

/// Total-parameter budget relative to one fine-tuned model, backbone and
/// router excluded:
///   1 + sum_modules count * (r_s + sum_t r_t)(d_in + d_out) / backbone_params
/// using fractional per-module average ranks (r_t applied once per task).
struct AverageRanks {
  double shared = 0.0;
  double expert = 0.0;  // mean per-task expert rank
};
double budget_ratio(std::span<const ModuleGeom> geoms, std::span<const AverageRanks> ranks,
                    int tasks, double backbone_total_params);

/// Same ratio computed straight from an allocation's entries (each entry
/// carries its own dims). Continuous ranks by default; rounded on request.
double budget_ratio(const RankAllocation& alloc, double backbone_total_params,
                    bool use_rounded = false);

}  // namespace slimmerge
