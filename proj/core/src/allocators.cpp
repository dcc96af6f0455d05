#include "slimmerge/allocators.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "rng.hpp"

namespace slimmerge {

std::string_view to_string(AllocatorKind k) {
  switch (k) {
    case AllocatorKind::uniform: return "uniform";
    case AllocatorKind::random: return "random";
    case AllocatorKind::energy: return "energy";
  }
  return "uniform";
}

AllocatorKind allocator_kind_from_string(std::string_view s) {
  if (s == "uniform") return AllocatorKind::uniform;
  if (s == "random") return AllocatorKind::random;
  if (s == "energy") return AllocatorKind::energy;
  throw ConfigError("allocator", "unknown allocator '" + std::string(s) + "'");
}

namespace {

int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5)); }

void check_budget(double budget) {
  if (!(budget > 0.0 && budget <= 1.0)) {
    throw InfeasibleBudgetError("budget must be in (0, 1]");
  }
}

/// Bisection on one scalar knob in [0, 1]. ranks_at(knob) fills the rounded
/// ranks; the achieved ratio is monotone nondecreasing in the knob. Picks the
/// largest knob whose achieved ratio stays at or below budget * (1 + 0.02),
/// preferring the feasible value closest to the budget.
RankAllocation bisect_budget(const RankAllocation& skeleton, double budget,
                             const std::function<void(RankAllocation&, double)>& ranks_at) {
  check_budget(budget);
  const double cap = budget * 1.02;

  auto achieved = [&](double knob, RankAllocation& out) {
    out = skeleton;
    ranks_at(out, knob);
    out.round_and_clamp();
    return out.achieved_ratio;
  };

  double lo = 0.0, hi = 1.0;
  RankAllocation probe;
  double best_ratio = -1.0;
  RankAllocation best;
  if (achieved(1.0, probe) <= cap) {
    best = probe;
    best_ratio = probe.achieved_ratio;
  } else {
    for (int it = 0; it < 60; ++it) {
      const double mid = 0.5 * (lo + hi);
      const double r = achieved(mid, probe);
      if (r <= cap) {
        if (r > best_ratio) {
          best_ratio = r;
          best = probe;
        }
        lo = mid;
      } else {
        hi = mid;
      }
    }
  }
  if (best_ratio < 0.0 || std::abs(best_ratio - budget) > kBudgetWindow) {
    throw InfeasibleBudgetError("rounding granularity cannot meet budget " +
                                std::to_string(budget) + " within the accepted window");
  }
  return best;
}

}  // namespace

RankAllocation allocate_uniform(const RankAllocation& skeleton, double budget) {
  return bisect_budget(skeleton, budget, [](RankAllocation& alloc, double rho) {
    for (auto& e : alloc.entries) e.continuous = rho * e.max_rank;
  });
}

RankAllocation allocate_random(const RankAllocation& skeleton, double budget,
                               std::uint64_t seed) {
  // One uniform draw per component-layer, fixed for the whole bisection so
  // only the global scale moves.
  detail::Rng rng(seed);
  std::vector<double> draw(skeleton.entries.size());
  for (auto& d : draw) d = rng.uniform();

  // The knob scales the draws; scale can exceed 1 before clamping, so stretch
  // the knob range by mapping [0,1] -> [0,2].
  return bisect_budget(skeleton, budget, [&draw](RankAllocation& alloc, double knob) {
    for (std::size_t i = 0; i < alloc.entries.size(); ++i) {
      auto& e = alloc.entries[i];
      e.continuous = std::min(2.0 * knob * draw[i], 1.0) * e.max_rank;
    }
  });
}

namespace {

int rank_at_energy(const Vector& s, double eta, int max_rank) {
  const double total = s.squaredNorm();
  if (total <= 0.0) return 0;
  double cum = 0.0;
  for (int r = 1; r <= static_cast<int>(s.size()) && r <= max_rank; ++r) {
    cum += s[r - 1] * s[r - 1];
    if (cum / total >= eta) return r;
  }
  return std::min<int>(max_rank, static_cast<int>(s.size()));
}

const Vector& spectrum_for(const DecompositionSvd& svds, const RankEntry& e) {
  if (e.task == kSharedTask) return svds.shared.at(e.layer).S;
  return svds.experts.at(static_cast<std::size_t>(e.task)).at(e.layer).S;
}

}  // namespace

RankAllocation energy_at_threshold(const DecompositionSvd& svds, const RankAllocation& skeleton,
                                   double eta, EnergyScope scope) {
  RankAllocation alloc = skeleton;
  for (auto& e : alloc.entries) {
    if (scope == EnergyScope::pooled_tasks && e.task != kSharedTask) {
      // Pool sigma^2 across tasks at this layer: every expert of the layer
      // shares one thresholded spectrum.
      Vector pooled = Vector::Zero(e.max_rank);
      for (const auto& per_task : svds.experts) {
        const Vector& s = per_task.at(e.layer).S;
        for (Eigen::Index i = 0; i < pooled.size() && i < s.size(); ++i) {
          pooled[i] += s[i] * s[i];
        }
      }
      pooled = pooled.cwiseSqrt();
      e.continuous = rank_at_energy(pooled, eta, e.max_rank);
    } else {
      e.continuous = rank_at_energy(spectrum_for(svds, e), eta, e.max_rank);
    }
  }
  alloc.round_and_clamp();
  return alloc;
}

RankAllocation allocate_energy(const DecompositionSvd& svds, const RankAllocation& skeleton,
                               double budget, EnergyScope scope) {
  check_budget(budget);
  const double cap = budget * 1.02;

  // Raising the threshold keeps more ranks, so the achieved ratio is
  // nondecreasing in eta; bisect eta for the largest feasible value.
  auto achieved = [&](double eta, RankAllocation& out) {
    out = energy_at_threshold(svds, skeleton, eta, scope);
    return out.achieved_ratio;
  };

  double lo = 0.0, hi = 1.0;
  RankAllocation probe;
  double best_ratio = -1.0;
  RankAllocation best;
  for (int it = 0; it < 60; ++it) {
    const double eta = 0.5 * (lo + hi);
    const double r = achieved(eta, probe);
    if (r <= cap) {
      if (r > best_ratio) {
        best_ratio = r;
        best = probe;
      }
      lo = eta;
    } else {
      hi = eta;
    }
  }
  if (best_ratio < 0.0 || std::abs(best_ratio - budget) > kBudgetWindow) {
    throw InfeasibleBudgetError("energy thresholding cannot meet budget " +
                                std::to_string(budget) + " within the accepted window");
  }
  return best;
}

}  // namespace slimmerge
