#include "slimmerge/accounting.hpp"

#include <cmath>

namespace slimmerge {

std::string_view to_string(AccountingMethod m) {
  switch (m) {
    case AccountingMethod::static_merge: return "static";
    case AccountingMethod::tall_mask: return "tall_mask";
    case AccountingMethod::emr: return "emr";
    case AccountingMethod::tsv_c: return "tsv_c";
    case AccountingMethod::didi: return "didi";
  }
  return "static";
}

AccountingMethod accounting_method_from_string(std::string_view s) {
  if (s == "static") return AccountingMethod::static_merge;
  if (s == "tall_mask") return AccountingMethod::tall_mask;
  if (s == "emr") return AccountingMethod::emr;
  if (s == "tsv_c") return AccountingMethod::tsv_c;
  if (s == "didi") return AccountingMethod::didi;
  throw ConfigError("method", "unknown accounting method '" + std::string(s) + "'");
}

BitBreakdown bits_cost(AccountingMethod method, std::span<const ModuleGeom> geoms, int tasks,
                       const AccountingParams& params) {
  BitBreakdown out;
  out.method = method;

  auto router_bits = [&]() -> std::uint64_t {
    if (!params.router_params) throw MissingParamError("router_params");
    return 32ull * static_cast<std::uint64_t>(*params.router_params);
  };

  for (std::size_t g = 0; g < geoms.size(); ++g) {
    const ModuleGeom& geom = geoms[g];
    const std::uint64_t p = static_cast<std::uint64_t>(geom.params());
    const std::uint64_t dims_sum = static_cast<std::uint64_t>(geom.d_in + geom.d_out);
    const std::uint64_t count = static_cast<std::uint64_t>(geom.count);

    out.backbone_bits += count * 32ull * p;

    switch (method) {
      case AccountingMethod::static_merge:
        break;
      case AccountingMethod::tall_mask:
        out.shared_bits += count * 32ull * p;
        out.expert_bits += count * static_cast<std::uint64_t>(tasks) * p;
        break;
      case AccountingMethod::emr: {
        if (!params.alpha) throw MissingParamError("alpha");
        const std::uint64_t scalars =
            static_cast<std::uint64_t>(std::llround(32.0 * (*params.alpha) * static_cast<double>(p)));
        out.shared_bits += count * 32ull * p;
        out.expert_bits += count * static_cast<std::uint64_t>(tasks) * (p + scalars);
        break;
      }
      case AccountingMethod::tsv_c: {
        if (!params.fixed_expert_rank) throw MissingParamError("fixed_expert_rank");
        out.expert_bits +=
            count * 32ull * static_cast<std::uint64_t>(*params.fixed_expert_rank) * dims_sum;
        break;
      }
      case AccountingMethod::didi: {
        if (!params.module_ranks) throw MissingParamError("module_ranks");
        if (params.module_ranks->size() != geoms.size()) {
          throw MissingParamError("module_ranks (length mismatch with geometry)");
        }
        const ModuleRanks& ranks = (*params.module_ranks)[g];
        out.shared_bits += count * 32ull * static_cast<std::uint64_t>(ranks.shared) * dims_sum;
        std::uint64_t expert_rank_sum = 0;
        for (std::int64_t r : ranks.experts) expert_rank_sum += static_cast<std::uint64_t>(r);
        out.expert_bits += count * 32ull * expert_rank_sum * dims_sum;
        break;
      }
    }
  }

  if (method != AccountingMethod::static_merge) out.router_bits = router_bits();
  return out;
}

double budget_ratio(std::span<const ModuleGeom> geoms, std::span<const AverageRanks> ranks,
                    int tasks, double backbone_total_params) {
  if (ranks.size() != geoms.size()) {
    throw MissingParamError("average ranks (length mismatch with geometry)");
  }
  if (!(backbone_total_params > 0.0)) throw MissingParamError("backbone_total_params");
  double numer = 0.0;
  for (std::size_t g = 0; g < geoms.size(); ++g) {
    const double dims_sum = static_cast<double>(geoms[g].d_in + geoms[g].d_out);
    numer += geoms[g].count * (ranks[g].shared + tasks * ranks[g].expert) * dims_sum;
  }
  return 1.0 + numer / backbone_total_params;
}

double budget_ratio(const RankAllocation& alloc, double backbone_total_params, bool use_rounded) {
  if (!(backbone_total_params > 0.0)) throw MissingParamError("backbone_total_params");
  double numer = 0.0;
  for (const auto& e : alloc.entries) {
    const double r = use_rounded ? static_cast<double>(e.rounded) : e.continuous;
    numer += r * (e.rows + e.cols);
  }
  return 1.0 + numer / backbone_total_params;
}

}  // namespace slimmerge
