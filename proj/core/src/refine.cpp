#include "slimmerge/refine.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <unordered_map>

#include "parallel.hpp"
#include "rng.hpp"
#include "slimmerge/rank_search.hpp"

namespace slimmerge {

Matrix FactorPair::product() const {
  if (rank() == 0) return Matrix::Zero(A.rows(), B.cols());
  return A * B;
}

const FactorPair* FactorSet::find(int task, const std::string& layer) const {
  for (const auto& f : factors) {
    if (f.task == task && f.layer == layer) return &f;
  }
  return nullptr;
}

namespace {

std::string component_name(int task) {
  return task == kSharedTask ? "shared" : "task_" + std::to_string(task);
}

}  // namespace

FactorPair& FactorSet::at(int task, const std::string& layer) {
  for (auto& f : factors) {
    if (f.task == task && f.layer == layer) return f;
  }
  throw MissingFactorError(component_name(task), layer);
}

const FactorPair& FactorSet::at(int task, const std::string& layer) const {
  const FactorPair* f = find(task, layer);
  if (f == nullptr) throw MissingFactorError(component_name(task), layer);
  return *f;
}

void RefineConfig::validate() const {
  if (!(lr2 > 0.0)) throw ConfigError("lr2", "must be > 0");
  if (max_iters < 0) throw ConfigError("max_iters", "must be >= 0");
  if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0)) throw ConfigError("adam_beta1", "must be in (0, 1)");
  if (!(adam_beta2 > 0.0 && adam_beta2 < 1.0)) throw ConfigError("adam_beta2", "must be in (0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps", "must be > 0");
  if (reg_lambda < 0.0) throw ConfigError("reg_lambda", "must be >= 0");
  if (!(tau > 0.0)) throw ConfigError("tau", "must be > 0");
  if (!(early_stop_rel_tol >= 0.0)) throw ConfigError("early_stop_rel_tol", "must be >= 0");
  if (early_stop_window < 1) throw ConfigError("early_stop_window", "must be >= 1");
}

FactorPair init_factors(const SvdTriple& triple, Eigen::Index r) {
  const Eigen::Index k = triple.max_rank();
  if (r < 0 || r > k) throw RankOutOfRangeError(r, k);
  FactorPair pair;
  const Vector root = triple.S.head(r).cwiseSqrt();
  pair.A = triple.U.leftCols(r) * root.asDiagonal();
  pair.B = root.asDiagonal() * triple.V.leftCols(r).transpose();
  return pair;
}

FactorPair init_factors(const LayerMatrix& m0, Eigen::Index r) {
  FactorPair pair = init_factors(svd(m0.data), r);
  pair.layer = m0.name;
  return pair;
}

FactorPair random_init_factors(Eigen::Index rows, Eigen::Index cols, Eigen::Index r,
                               std::uint64_t seed) {
  if (r < 0) throw RankOutOfRangeError(r, std::min(rows, cols));
  detail::Rng rng(seed);
  FactorPair pair;
  pair.A.resize(rows, r);
  const double scale = 1.0 / std::sqrt(static_cast<double>(std::max<Eigen::Index>(r, 1)));
  for (Eigen::Index c = 0; c < r; ++c) {
    for (Eigen::Index i = 0; i < rows; ++i) pair.A(i, c) = scale * rng.normal();
  }
  pair.B = Matrix::Zero(r, cols);
  return pair;
}

namespace {

/// Index structure binding the factor list to (task, layer) slots, built once
/// per call so the inner loops stay O(1).
struct FactorIndex {
  std::vector<std::string> layers;                      // canonical layer order
  std::vector<std::size_t> shared;                      // factor index per layer
  std::vector<std::vector<std::size_t>> expert;         // [task][layer]
  std::unordered_map<std::string, std::size_t> layer_pos;
};

FactorIndex build_index(const FactorSet& factors, const TaskVectorSet& targets) {
  FactorIndex idx;
  const int tasks = targets.task_count();
  for (const auto& layer : targets.tasks.front().layers) {
    idx.layer_pos.emplace(layer.name, idx.layers.size());
    idx.layers.push_back(layer.name);
  }
  idx.shared.assign(idx.layers.size(), SIZE_MAX);
  idx.expert.assign(static_cast<std::size_t>(tasks),
                    std::vector<std::size_t>(idx.layers.size(), SIZE_MAX));
  for (std::size_t f = 0; f < factors.factors.size(); ++f) {
    const FactorPair& p = factors.factors[f];
    auto it = idx.layer_pos.find(p.layer);
    if (it == idx.layer_pos.end()) continue;  // factor for a layer outside the targets
    if (p.task == kSharedTask) {
      idx.shared[it->second] = f;
    } else if (p.task >= 0 && p.task < tasks) {
      idx.expert[static_cast<std::size_t>(p.task)][it->second] = f;
    }
  }
  for (std::size_t l = 0; l < idx.layers.size(); ++l) {
    if (idx.shared[l] == SIZE_MAX) throw MissingFactorError("shared", idx.layers[l]);
    for (int t = 0; t < tasks; ++t) {
      if (idx.expert[static_cast<std::size_t>(t)][l] == SIZE_MAX) {
        throw MissingFactorError(component_name(t), idx.layers[l]);
      }
    }
  }
  return idx;
}

double reg_term(const FactorSet& factors, double reg_lambda, const RegTargets* reg) {
  if (reg_lambda <= 0.0 || reg == nullptr) return 0.0;
  double acc = 0.0;
  for (const auto& f : factors.factors) {
    auto it = reg->anchor.find({f.task, f.layer});
    if (it == reg->anchor.end()) continue;
    acc += (f.product() - it->second).squaredNorm();
  }
  return reg_lambda * acc;
}

}  // namespace

double refine_loss(const FactorSet& factors, const TaskVectorSet& targets, double reg_lambda,
                   const RegTargets* reg) {
  targets.validate();
  const FactorIndex idx = build_index(factors, targets);
  const int tasks = targets.task_count();
  double acc = 0.0;
  for (int t = 0; t < tasks; ++t) {
    for (std::size_t l = 0; l < idx.layers.size(); ++l) {
      const Matrix recon = factors.factors[idx.shared[l]].product() +
                           factors.factors[idx.expert[static_cast<std::size_t>(t)][l]].product();
      acc += (recon - targets.tasks[static_cast<std::size_t>(t)].layers.at(idx.layers[l]).data)
                 .squaredNorm();
    }
  }
  return acc / static_cast<double>(tasks) + reg_term(factors, reg_lambda, reg);
}

FactorGrads grad_factors(const FactorSet& factors, const TaskVectorSet& targets,
                         std::span<const double> task_weights, double reg_lambda,
                         const RegTargets* reg) {
  targets.validate();
  const FactorIndex idx = build_index(factors, targets);
  const int tasks = targets.task_count();
  const std::size_t layer_count = idx.layers.size();
  if (!task_weights.empty() && task_weights.size() != static_cast<std::size_t>(tasks)) {
    throw Error("task_weights length does not match task count");
  }

  FactorGrads grads;
  grads.dA.resize(factors.factors.size());
  grads.dB.resize(factors.factors.size());
  for (std::size_t f = 0; f < factors.factors.size(); ++f) {
    grads.dA[f] = Matrix::Zero(factors.factors[f].A.rows(), factors.factors[f].A.cols());
    grads.dB[f] = Matrix::Zero(factors.factors[f].B.rows(), factors.factors[f].B.cols());
  }

  std::vector<Matrix> products(factors.factors.size());
  double flops = 0.0;
  for (const auto& f : factors.factors) {
    flops += 2.0 * static_cast<double>(f.A.rows()) * f.B.cols() * std::max<Eigen::Index>(f.rank(), 1);
  }
  const bool parallel = flops > 1e6;
  detail::parallel_for(factors.factors.size(),
                       [&](std::size_t f) { products[f] = factors.factors[f].product(); }, parallel);

  const std::size_t pairs = static_cast<std::size_t>(tasks) * layer_count;
  std::vector<Matrix> gA_exp(pairs), gB_exp(pairs), gA_sh(pairs), gB_sh(pairs);
  detail::parallel_for(pairs, [&](std::size_t j) {
    const std::size_t t = j / layer_count;
    const std::size_t l = j % layer_count;
    const std::size_t fs = idx.shared[l];
    const std::size_t fe = idx.expert[t][l];
    const double w = task_weights.empty() ? 1.0 : task_weights[t];
    const double c = 2.0 / static_cast<double>(tasks) * w;
    const Matrix residual =
        products[fs] + products[fe] - targets.tasks[t].layers.at(idx.layers[l]).data;
    gA_exp[j] = c * residual * factors.factors[fe].B.transpose();
    gB_exp[j] = c * factors.factors[fe].A.transpose() * residual;
    gA_sh[j] = c * residual * factors.factors[fs].B.transpose();
    gB_sh[j] = c * factors.factors[fs].A.transpose() * residual;
  }, parallel);
  for (std::size_t j = 0; j < pairs; ++j) {  // fixed order: deterministic sums
    const std::size_t t = j / layer_count;
    const std::size_t l = j % layer_count;
    grads.dA[idx.expert[t][l]] += gA_exp[j];
    grads.dB[idx.expert[t][l]] += gB_exp[j];
    grads.dA[idx.shared[l]] += gA_sh[j];
    grads.dB[idx.shared[l]] += gB_sh[j];
  }

  if (reg_lambda > 0.0 && reg != nullptr) {
    for (std::size_t f = 0; f < factors.factors.size(); ++f) {
      auto it = reg->anchor.find({factors.factors[f].task, factors.factors[f].layer});
      if (it == reg->anchor.end()) continue;
      const Matrix d = 2.0 * reg_lambda * (products[f] - it->second);
      grads.dA[f] += d * factors.factors[f].B.transpose();
      grads.dB[f] += factors.factors[f].A.transpose() * d;
    }
  }
  return grads;
}

RefineResult refine(FactorSet init, const TaskVectorSet& targets, const RefineConfig& config,
                    const RegTargets* reg_override) {
  config.validate();
  targets.validate();
  const int tasks = targets.task_count();
  const FactorIndex idx = build_index(init, targets);
  const std::size_t layer_count = idx.layers.size();
  const std::size_t pairs = static_cast<std::size_t>(tasks) * layer_count;

  // Regularizer anchors default to the factor products at entry (the
  // truncated init). Callers hold the pre-truncation matrices, so that
  // variant arrives through reg_override.
  RegTargets reg;
  const RegTargets* reg_ptr = nullptr;
  if (config.reg_lambda > 0.0) {
    if (reg_override != nullptr) {
      reg_ptr = reg_override;
    } else {
      for (const auto& f : init.factors) {
        reg.anchor[{f.task, f.layer}] = f.product();
      }
      reg_ptr = &reg;
    }
  }

  FactorSet current = std::move(init);
  std::vector<Matrix> mA(current.factors.size()), vA(current.factors.size());
  std::vector<Matrix> mB(current.factors.size()), vB(current.factors.size());
  for (std::size_t f = 0; f < current.factors.size(); ++f) {
    mA[f] = Matrix::Zero(current.factors[f].A.rows(), current.factors[f].A.cols());
    vA[f] = mA[f];
    mB[f] = Matrix::Zero(current.factors[f].B.rows(), current.factors[f].B.cols());
    vB[f] = mB[f];
  }

  RefineResult result;
  std::vector<double> per_task(static_cast<std::size_t>(tasks), 0.0);
  std::vector<double> part(pairs, 0.0);
  std::vector<Matrix> products(current.factors.size());
  double eval_flops = 0.0;
  for (const auto& f : current.factors) {
    eval_flops +=
        2.0 * static_cast<double>(f.A.rows()) * f.B.cols() * std::max<Eigen::Index>(f.rank(), 1);
  }
  const bool parallel = eval_flops > 1e6;

  auto evaluate = [&](int iter) {
    detail::parallel_for(current.factors.size(),
                         [&](std::size_t f) { products[f] = current.factors[f].product(); },
                         parallel);
    detail::parallel_for(pairs, [&](std::size_t j) {
      const std::size_t t = j / layer_count;
      const std::size_t l = j % layer_count;
      part[j] = (products[idx.shared[l]] + products[idx.expert[t][l]] -
                 targets.tasks[t].layers.at(idx.layers[l]).data)
                    .squaredNorm();
    }, parallel);
    std::fill(per_task.begin(), per_task.end(), 0.0);
    for (std::size_t j = 0; j < pairs; ++j) per_task[j / layer_count] += part[j];
    double l_task = 0.0;
    for (double v : per_task) l_task += v;
    l_task /= static_cast<double>(tasks);
    const double total = l_task + reg_term(current, config.reg_lambda, reg_ptr);
    if (!std::isfinite(total)) throw NonFiniteError(iter);
    result.trace.push_back({iter, per_task, total});
    return total;
  };

  double best_loss = evaluate(0);
  result.initial_loss = best_loss;
  FactorSet best = current;

  std::vector<double> weights(static_cast<std::size_t>(tasks), 1.0);
  double prev_total = best_loss;
  int stable = 0;
  int iter = 0;
  for (; iter < config.max_iters; ++iter) {
    if (config.weighting == WeightingKind::temperature) {
      // w_t = T * softmax(l_t / (mean(l) * tau)): struggling tasks get more
      // pull; uniform is the tau -> infinity limit.
      double mean = 0.0;
      for (double v : per_task) mean += v;
      mean /= static_cast<double>(tasks);
      if (mean > 0.0) {
        double max_arg = -std::numeric_limits<double>::infinity();
        for (double v : per_task) max_arg = std::max(max_arg, v / (mean * config.tau));
        double z = 0.0;
        for (int t = 0; t < tasks; ++t) {
          weights[static_cast<std::size_t>(t)] =
              std::exp(per_task[static_cast<std::size_t>(t)] / (mean * config.tau) - max_arg);
          z += weights[static_cast<std::size_t>(t)];
        }
        for (double& w : weights) w = w / z * static_cast<double>(tasks);
      } else {
        std::fill(weights.begin(), weights.end(), 1.0);
      }
    }

    FactorGrads grads = grad_factors(current, targets, weights, config.reg_lambda, reg_ptr);

    const double b1 = config.adam_beta1, b2 = config.adam_beta2;
    const double bc1 = 1.0 - std::pow(b1, iter + 1);
    const double bc2 = 1.0 - std::pow(b2, iter + 1);
    for (std::size_t f = 0; f < current.factors.size(); ++f) {
      mA[f] = b1 * mA[f] + (1.0 - b1) * grads.dA[f];
      vA[f] = b2 * vA[f] + (1.0 - b2) * grads.dA[f].cwiseProduct(grads.dA[f]);
      Matrix denomA = (vA[f] / bc2).cwiseSqrt();
      denomA.array() += config.adam_eps;
      current.factors[f].A -= config.lr2 * (mA[f] / bc1).cwiseQuotient(denomA);

      mB[f] = b1 * mB[f] + (1.0 - b1) * grads.dB[f];
      vB[f] = b2 * vB[f] + (1.0 - b2) * grads.dB[f].cwiseProduct(grads.dB[f]);
      Matrix denomB = (vB[f] / bc2).cwiseSqrt();
      denomB.array() += config.adam_eps;
      current.factors[f].B -= config.lr2 * (mB[f] / bc1).cwiseQuotient(denomB);
    }

    const double total = evaluate(iter + 1);
    if (total < best_loss) {
      best_loss = total;
      best = current;
    }
    const double rel = std::abs(total - prev_total) / std::max(total, 1e-300);
    if (rel < config.early_stop_rel_tol) {
      if (++stable >= config.early_stop_window) {
        ++iter;
        break;
      }
    } else {
      stable = 0;
    }
    prev_total = total;
  }

  result.iterations = iter;
  result.final_loss = best_loss;
  result.factors = std::move(best);
  return result;
}

void write_refine_trace_csv(const std::filesystem::path& path,
                            std::span<const RefineTracePoint> trace) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << "iter";
  if (!trace.empty()) {
    for (std::size_t t = 0; t < trace.front().per_task.size(); ++t) out << ",task_" << t;
  }
  out << ",total\n";
  out.precision(17);
  for (const auto& p : trace) {
    out << p.iter;
    for (double v : p.per_task) out << ',' << v;
    out << ',' << p.total << '\n';
  }
}

}  // namespace slimmerge
