#include "slimmerge/rank_search.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "parallel.hpp"

namespace slimmerge {

std::string_view to_string(LossKind k) { return k == LossKind::mse ? "mse" : "l1"; }

LossKind loss_kind_from_string(std::string_view s) {
  if (s == "mse") return LossKind::mse;
  if (s == "l1") return LossKind::l1;
  throw ConfigError("loss", "unknown loss kind '" + std::string(s) + "'");
}

void RankSearchConfig::validate() const {
  if (!(gamma > 0.0)) throw ConfigError("gamma", "must be > 0");
  if (!(target_ratio > 0.0 && target_ratio <= 1.0)) {
    throw ConfigError("target_ratio", "must be in (0, 1]");
  }
  if (!(lr1 > 0.0)) throw ConfigError("lr1", "must be > 0");
  if (max_iters < 0) throw ConfigError("max_iters", "must be >= 0");
  if (!(beta > 0.0)) throw ConfigError("beta", "must be > 0");
  if (!(early_stop_tol >= 0.0)) throw ConfigError("early_stop_tol", "must be >= 0");
  if (early_stop_window < 1) throw ConfigError("early_stop_window", "must be >= 1");
}

RankSearchConfig RankSearchConfig::vision() { return {}; }

RankSearchConfig RankSearchConfig::llm() {
  RankSearchConfig c;
  c.loss_kind = LossKind::l1;
  c.beta = 30.0;
  c.gamma = 500.0;
  return c;
}

RankSearchConfig RankSearchConfig::peft() {
  RankSearchConfig c;
  c.gamma = 100.0;
  return c;
}

RankSearchConfig RankSearchConfig::mllm() {
  RankSearchConfig c;
  c.loss_kind = LossKind::l1;
  c.beta = 50.0;
  c.gamma = 500.0;
  return c;
}

RankSearchConfig RankSearchConfig::preset(std::string_view name) {
  if (name == "vision") return vision();
  if (name == "llm") return llm();
  if (name == "peft") return peft();
  if (name == "mllm") return mllm();
  throw ConfigError("preset", "unknown preset '" + std::string(name) + "'");
}

const RankEntry* RankAllocation::find(int task, const std::string& layer) const {
  for (const auto& e : entries) {
    if (e.task == task && e.layer == layer) return &e;
  }
  return nullptr;
}

namespace {

int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5)); }

}  // namespace

void RankAllocation::round_and_clamp() {
  for (auto& e : entries) {
    e.rounded = std::clamp(round_half_up(e.continuous), 0, e.max_rank);
  }
  achieved_ratio = compression_ratio(*this, /*use_rounded=*/true);
}

RankAllocation make_skeleton(const Decomposition& decomp) {
  RankAllocation alloc;
  auto add = [&alloc](int task, const LayerMatrix& layer) {
    RankEntry e;
    e.task = task;
    e.layer = layer.name;
    e.rows = static_cast<int>(layer.rows());
    e.cols = static_cast<int>(layer.cols());
    e.max_rank = std::min(e.rows, e.cols);
    alloc.entries.push_back(std::move(e));
  };
  for (const auto& layer : decomp.shared) add(kSharedTask, layer);
  for (std::size_t t = 0; t < decomp.experts.size(); ++t) {
    for (const auto& layer : decomp.experts[t].layers) add(static_cast<int>(t), layer);
  }
  return alloc;
}

namespace {

// Overflow-safe sech^2. cosh saturates double around |x| ~ 710; the square
// underflows to 0 far earlier.
double sech2(double x) {
  const double ax = std::abs(x);
  if (ax > 300.0) return 0.0;
  const double c = std::cosh(ax);
  return 1.0 / (c * c);
}

double truncation_factor(double r, int index_one_based, double beta) {
  return 0.5 * std::tanh(beta * (r - static_cast<double>(index_one_based))) + 0.5;
}

}  // namespace

Vector smooth_truncate(const Vector& singular_values, double r, double beta) {
  Vector out(singular_values.size());
  for (Eigen::Index i = 0; i < singular_values.size(); ++i) {
    out[i] = singular_values[i] * truncation_factor(r, static_cast<int>(i) + 1, beta);
  }
  return out;
}

Matrix soft_reconstruct(const SvdTriple& triple, double r, double beta) {
  const Vector reweighted = smooth_truncate(triple.S, r, beta);
  return triple.U * reweighted.asDiagonal() * triple.V.transpose();
}

double task_loss(const std::vector<std::vector<Matrix>>& reconstructed,
                 const std::vector<std::vector<Matrix>>& originals, LossKind kind) {
  if (reconstructed.size() != originals.size() || reconstructed.empty()) {
    throw DimMismatchError("(task axis)", "reconstructed vs originals");
  }
  double acc = 0.0;
  for (std::size_t t = 0; t < reconstructed.size(); ++t) {
    if (reconstructed[t].size() != originals[t].size()) {
      throw DimMismatchError("(layer axis)", "reconstructed vs originals");
    }
    for (std::size_t l = 0; l < reconstructed[t].size(); ++l) {
      const Matrix& a = reconstructed[t][l];
      const Matrix& b = originals[t][l];
      if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw DimMismatchError("(task " + std::to_string(t) + ", layer " + std::to_string(l) + ")");
      }
      acc += kind == LossKind::mse ? (a - b).squaredNorm() : (a - b).cwiseAbs().sum();
    }
  }
  return acc / static_cast<double>(reconstructed.size());
}

double compression_ratio(std::span<const RankedDims> items) {
  double numer = 0.0;
  double denom = 0.0;
  for (const auto& it : items) {
    numer += it.rank * (it.rows + it.cols);
    denom += static_cast<double>(it.rows) * it.cols;
  }
  return denom > 0.0 ? numer / denom : 0.0;
}

double compression_ratio(const RankAllocation& alloc, bool use_rounded) {
  std::vector<RankedDims> items;
  items.reserve(alloc.entries.size());
  for (const auto& e : alloc.entries) {
    items.push_back({use_rounded ? static_cast<double>(e.rounded) : e.continuous, e.rows, e.cols});
  }
  return compression_ratio(items);
}

double total_loss(double task_loss_value, double ratio_now, double ratio_target, double gamma) {
  return task_loss_value + gamma * std::abs(ratio_now - ratio_target);
}

Matrix loss_grad_wrt_reconstruction(const Matrix& residual, LossKind kind, double weight) {
  if (kind == LossKind::mse) return 2.0 * weight * residual;
  return weight * residual.unaryExpr([](double v) {
    return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
  });
}

double grad_rank(const SvdTriple& triple, double r, double beta, const Matrix& loss_grad,
                 const RatioPenaltyTerm& ratio) {
  // d sigma~_i / dr = s_i * 0.5 * beta * sech^2(beta (r - i)); chain through
  // M~ = U diag(sigma~) V^T, so only diag(U^T G V) is needed.
  const Matrix w = triple.U.transpose() * loss_grad;  // k x n
  double g = 0.0;
  for (Eigen::Index i = 0; i < triple.S.size(); ++i) {
    const double gate = 0.5 * beta * sech2(beta * (r - static_cast<double>(i + 1)));
    if (gate == 0.0) continue;
    g += w.row(i).dot(triple.V.col(i)) * triple.S[i] * gate;
  }
  return g + ratio.gamma * ratio.sign * ratio.slope;
}

double grad_rank(const SvdTriple& triple, double r, double beta, const Matrix& residual,
                 LossKind kind, double weight, const RatioPenaltyTerm& ratio) {
  return grad_rank(triple, r, beta, loss_grad_wrt_reconstruction(residual, kind, weight), ratio);
}

namespace {

double sgn(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

struct CompState {
  int task = kSharedTask;
  std::string layer;
  const SvdTriple* triple = nullptr;
  int rows = 0, cols = 0, max_rank = 0;
  double r = 0.0;
  double dims_sum = 0.0;   // m + n
  double dims_prod = 0.0;  // m * n
};

}  // namespace

RankSearchResult optimize_ranks(const Decomposition& decomp, const DecompositionSvd& svds,
                                const RankSearchConfig& config) {
  config.validate();
  const int tasks = decomp.task_count();
  if (tasks < 1) throw Error("decomposition has no tasks");
  const double task_weight = 1.0 / static_cast<double>(tasks);

  // Canonical component order: shared per layer, then each task per layer.
  std::vector<CompState> comps;
  std::vector<std::size_t> shared_index_of_layer;  // parallel to layer order
  std::vector<std::string> layer_order;
  for (const auto& layer : decomp.shared) {
    CompState c;
    c.task = kSharedTask;
    c.layer = layer.name;
    c.triple = &svds.shared.at(layer.name);
    c.rows = static_cast<int>(layer.rows());
    c.cols = static_cast<int>(layer.cols());
    c.max_rank = std::min(c.rows, c.cols);
    c.dims_sum = c.rows + c.cols;
    c.dims_prod = static_cast<double>(c.rows) * c.cols;
    shared_index_of_layer.push_back(comps.size());
    layer_order.push_back(layer.name);
    comps.push_back(std::move(c));
  }
  const std::size_t layer_count = layer_order.size();
  std::vector<std::size_t> expert_index;  // [t * layer_count + l]
  expert_index.resize(static_cast<std::size_t>(tasks) * layer_count);
  for (int t = 0; t < tasks; ++t) {
    for (std::size_t l = 0; l < layer_count; ++l) {
      const std::string& name = layer_order[l];
      const LayerMatrix& lm = decomp.experts[static_cast<std::size_t>(t)].layers.at(name);
      CompState c;
      c.task = t;
      c.layer = name;
      c.triple = &svds.experts[static_cast<std::size_t>(t)].at(name);
      c.rows = static_cast<int>(lm.rows());
      c.cols = static_cast<int>(lm.cols());
      c.max_rank = std::min(c.rows, c.cols);
      c.dims_sum = c.rows + c.cols;
      c.dims_prod = static_cast<double>(c.rows) * c.cols;
      expert_index[static_cast<std::size_t>(t) * layer_count + l] = comps.size();
      comps.push_back(std::move(c));
    }
  }

  double pooled_denom = 0.0;
  for (const auto& c : comps) pooled_denom += c.dims_prod;

  // Exact targets tau_{t,l} = shared + expert.
  std::vector<std::vector<Matrix>> targets(static_cast<std::size_t>(tasks));
  for (int t = 0; t < tasks; ++t) {
    targets[static_cast<std::size_t>(t)].reserve(layer_count);
    for (const auto& name : layer_order) targets[static_cast<std::size_t>(t)].push_back(decomp.target(t, name));
  }

  // Ranks start at the budget fraction of each spectrum.
  for (auto& c : comps) c.r = config.target_ratio * c.max_rank;

  const std::size_t comp_count = comps.size();
  std::vector<Matrix> recon(comp_count);
  std::vector<Matrix> residual(static_cast<std::size_t>(tasks) * layer_count);
  std::vector<Matrix> loss_grad(comp_count);
  std::vector<double> grad(comp_count, 0.0);
  std::vector<double> partial_loss(static_cast<std::size_t>(tasks) * layer_count, 0.0);

  // Keep tiny problems serial: per-iteration work below ~1 Mflop loses to
  // thread spawn overhead.
  double flops_per_iter = 0.0;
  for (const auto& c : comps) flops_per_iter += 2.0 * c.dims_prod * c.max_rank;
  const bool parallel = flops_per_iter > 1e6;

  // Adam state (only touched when the optimizer is adam).
  std::vector<double> adam_m(comp_count, 0.0), adam_v(comp_count, 0.0);

  RankSearchResult result;
  double prev_total = std::numeric_limits<double>::quiet_NaN();
  int stable_iters = 0;

  auto evaluate = [&](int iter) {
    detail::parallel_for(comp_count, [&](std::size_t i) {
      recon[i] = soft_reconstruct(*comps[i].triple, comps[i].r, config.beta);
    }, parallel);
    detail::parallel_for(residual.size(), [&](std::size_t j) {
      const std::size_t t = j / layer_count;
      const std::size_t l = j % layer_count;
      residual[j] = recon[shared_index_of_layer[l]] + recon[expert_index[j]] - targets[t][l];
      partial_loss[j] = config.loss_kind == LossKind::mse ? residual[j].squaredNorm()
                                                          : residual[j].cwiseAbs().sum();
    }, parallel);
    double l_task = 0.0;
    for (double p : partial_loss) l_task += p;  // fixed order: deterministic
    l_task *= task_weight;

    double penalty = 0.0;
    double r_now = 0.0;
    if (config.ratio_scope == RatioScope::pooled) {
      double numer = 0.0;
      for (const auto& c : comps) numer += c.r * c.dims_sum;
      r_now = numer / pooled_denom;
      penalty = config.gamma * std::abs(r_now - config.target_ratio);
    } else {
      double mean_dev = 0.0;
      double mean_ratio = 0.0;
      for (const auto& c : comps) {
        const double rc = c.r * c.dims_sum / c.dims_prod;
        mean_dev += std::abs(rc - config.target_ratio);
        mean_ratio += rc;
      }
      mean_dev /= static_cast<double>(comp_count);
      r_now = mean_ratio / static_cast<double>(comp_count);
      penalty = config.gamma * mean_dev;
    }
    const double total = l_task + penalty;
    if (!std::isfinite(total)) throw NonFiniteError(iter);
    result.trace.push_back({iter, l_task, r_now, total});
    return total;
  };

  int iter = 0;
  for (; iter < config.max_iters; ++iter) {
    const double total = evaluate(iter);

    if (std::isfinite(prev_total) && std::abs(total - prev_total) < config.early_stop_tol) {
      if (++stable_iters >= config.early_stop_window) break;
    } else {
      stable_iters = 0;
    }
    prev_total = total;

    // dL_task/dM~ per component; shared slots accumulate over tasks in fixed
    // task order.
    for (std::size_t i = 0; i < comp_count; ++i) {
      loss_grad[i] = Matrix::Zero(comps[i].rows, comps[i].cols);
    }
    for (std::size_t j = 0; j < residual.size(); ++j) {
      const std::size_t l = j % layer_count;
      const Matrix g = loss_grad_wrt_reconstruction(residual[j], config.loss_kind, task_weight);
      loss_grad[expert_index[j]] = g;
      loss_grad[shared_index_of_layer[l]] += g;
    }

    const double r_now = result.trace.back().ratio;
    detail::parallel_for(comp_count, [&](std::size_t i) {
      RatioPenaltyTerm ratio;
      ratio.gamma = config.gamma;
      if (config.ratio_scope == RatioScope::pooled) {
        ratio.sign = sgn(r_now - config.target_ratio);
        ratio.slope = comps[i].dims_sum / pooled_denom;
      } else {
        const double rc = comps[i].r * comps[i].dims_sum / comps[i].dims_prod;
        ratio.sign = sgn(rc - config.target_ratio);
        ratio.slope = comps[i].dims_sum / comps[i].dims_prod / static_cast<double>(comp_count);
      }
      grad[i] = grad_rank(*comps[i].triple, comps[i].r, config.beta, loss_grad[i], ratio);
    }, parallel);

    for (std::size_t i = 0; i < comp_count; ++i) {
      double step = 0.0;
      if (config.optimizer == RankOptimizer::gd) {
        step = config.lr1 * grad[i];
      } else {
        const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        adam_m[i] = b1 * adam_m[i] + (1.0 - b1) * grad[i];
        adam_v[i] = b2 * adam_v[i] + (1.0 - b2) * grad[i] * grad[i];
        const double mhat = adam_m[i] / (1.0 - std::pow(b1, iter + 1));
        const double vhat = adam_v[i] / (1.0 - std::pow(b2, iter + 1));
        step = config.lr1 * mhat / (std::sqrt(vhat) + eps);
      }
      comps[i].r = std::clamp(comps[i].r - step, 0.0, static_cast<double>(comps[i].max_rank));
    }
  }
  result.iterations = iter;
  evaluate(iter);  // closing trace row at the final ranks

  RankAllocation alloc;
  for (const auto& c : comps) {
    RankEntry e;
    e.task = c.task;
    e.layer = c.layer;
    e.rows = c.rows;
    e.cols = c.cols;
    e.max_rank = c.max_rank;
    e.continuous = c.r;
    alloc.entries.push_back(std::move(e));
  }
  alloc.round_and_clamp();
  result.allocation = std::move(alloc);
  return result;
}

RankAllocation scale_budget(const RankAllocation& alloc, double factor) {
  if (!(factor > 0.0)) throw ConfigError("factor", "must be > 0");
  RankAllocation out = alloc;
  for (auto& e : out.entries) e.continuous *= factor;
  out.round_and_clamp();
  return out;
}

double allocation_task_loss(const Decomposition& decomp, const DecompositionSvd& svds,
                            const RankAllocation& alloc, LossKind kind) {
  const int tasks = decomp.task_count();
  std::map<std::string, Matrix> shared_trunc;
  for (const auto& layer : decomp.shared) {
    const RankEntry* e = alloc.find(kSharedTask, layer.name);
    if (e == nullptr) throw Error("allocation missing shared entry for layer '" + layer.name + "'");
    shared_trunc[layer.name] = hard_truncate(svds.shared.at(layer.name), e->rounded);
  }
  double acc = 0.0;
  for (int t = 0; t < tasks; ++t) {
    for (const auto& layer : decomp.shared) {
      const RankEntry* e = alloc.find(t, layer.name);
      if (e == nullptr) {
        throw Error("allocation missing task " + std::to_string(t) + " entry for layer '" +
                    layer.name + "'");
      }
      const Matrix recon =
          shared_trunc[layer.name] +
          hard_truncate(svds.experts[static_cast<std::size_t>(t)].at(layer.name), e->rounded);
      const Matrix target = decomp.target(t, layer.name);
      acc += kind == LossKind::mse ? (recon - target).squaredNorm()
                                   : (recon - target).cwiseAbs().sum();
    }
  }
  return acc / static_cast<double>(tasks);
}

void write_trace_csv(const std::filesystem::path& path,
                     std::span<const RankSearchTracePoint> trace) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << "iter,task_loss,ratio,total_loss\n";
  out.precision(17);
  for (const auto& p : trace) {
    out << p.iter << ',' << p.task_loss << ',' << p.ratio << ',' << p.total_loss << '\n';
  }
}

}  // namespace slimmerge
