#include "slimmerge/decompose.hpp"

#include <Eigen/SVD>

#include "parallel.hpp"

namespace slimmerge {

SvdTriple svd(const Matrix& m) {
  if (!m.allFinite()) throw Error("SVD input contains NaN/Inf");

  // One orientation only: wide inputs are transposed to tall, factors swapped
  // back afterwards.
  const bool wide = m.rows() < m.cols();
  Eigen::BDCSVD<Matrix> solver;
  if (wide) {
    solver.compute(Matrix(m.transpose()), Eigen::ComputeThinU | Eigen::ComputeThinV);
  } else {
    solver.compute(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  }
  if (solver.info() != Eigen::Success) {
    throw ConvergenceError("SVD backend did not converge");
  }

  SvdTriple triple;
  triple.S = solver.singularValues();
  if (wide) {
    triple.U = solver.matrixV();
    triple.V = solver.matrixU();
  } else {
    triple.U = solver.matrixU();
    triple.V = solver.matrixV();
  }

  // Fixed sign convention: first nonzero entry of each U column nonnegative.
  for (Eigen::Index c = 0; c < triple.U.cols(); ++c) {
    for (Eigen::Index r = 0; r < triple.U.rows(); ++r) {
      const double v = triple.U(r, c);
      if (v != 0.0) {
        if (v < 0.0) {
          triple.U.col(c) = -triple.U.col(c);
          triple.V.col(c) = -triple.V.col(c);
        }
        break;
      }
    }
  }
  return triple;
}

SvdTriple svd(const LayerMatrix& m) { return svd(m.data); }

Matrix hard_truncate(const SvdTriple& triple, Eigen::Index r) {
  const Eigen::Index k = triple.max_rank();
  if (r < 0 || r > k) throw RankOutOfRangeError(r, k);
  if (r == 0) return Matrix::Zero(triple.U.rows(), triple.V.rows());
  return triple.U.leftCols(r) * triple.S.head(r).asDiagonal() * triple.V.leftCols(r).transpose();
}

LayerMap shared_merge(const TaskVectorSet& set, std::span<const double> coefficients) {
  if (set.tasks.empty()) throw Error("cannot merge an empty task vector set");
  const std::size_t tasks = set.tasks.size();
  if (!coefficients.empty() && coefficients.size() != tasks) {
    throw CoeffLenMismatchError(coefficients.size(), tasks);
  }
  const double uniform = 1.0 / static_cast<double>(tasks);

  LayerMap shared;
  for (const auto& layer : set.tasks.front().layers) {
    Matrix acc = Matrix::Zero(layer.rows(), layer.cols());
    for (std::size_t t = 0; t < tasks; ++t) {
      const LayerMatrix& lm = set.tasks[t].layers.at(layer.name);
      if (lm.rows() != layer.rows() || lm.cols() != layer.cols()) {
        throw DimMismatchError(layer.name, "across tasks");
      }
      acc += (coefficients.empty() ? uniform : coefficients[t]) * lm.data;
    }
    shared.insert({layer.name, layer.kind, std::move(acc)});
  }
  return shared;
}

std::vector<TaskEntry> expert_residual(const TaskVectorSet& set, const LayerMap& shared) {
  std::vector<TaskEntry> experts;
  experts.reserve(set.tasks.size());
  for (const auto& task : set.tasks) {
    TaskEntry expert;
    expert.task_id = task.task_id;
    for (const auto& layer : shared) {
      const LayerMatrix& tau = task.layers.at(layer.name);
      if (tau.rows() != layer.rows() || tau.cols() != layer.cols()) {
        throw DimMismatchError(layer.name, "task vs shared");
      }
      expert.layers.insert({layer.name, layer.kind, tau.data - layer.data});
    }
    experts.push_back(std::move(expert));
  }
  return experts;
}

Decomposition decompose(const TaskVectorSet& set, std::span<const double> coefficients) {
  Decomposition d;
  d.shared = shared_merge(set, coefficients);
  d.experts = expert_residual(set, d.shared);
  d.base_meta = set.base_meta;
  return d;
}

Matrix Decomposition::target(int task, const std::string& layer) const {
  return shared.at(layer).data + experts.at(static_cast<std::size_t>(task)).layers.at(layer).data;
}

DecompositionSvd svd_all(const Decomposition& decomp) {
  struct Job {
    const Matrix* input;
    int task;  // kSharedTask-style: -1 for shared
    const std::string* layer;
  };
  std::vector<Job> jobs;
  for (const auto& layer : decomp.shared) jobs.push_back({&layer.data, -1, &layer.name});
  for (std::size_t t = 0; t < decomp.experts.size(); ++t) {
    for (const auto& layer : decomp.experts[t].layers) {
      jobs.push_back({&layer.data, static_cast<int>(t), &layer.name});
    }
  }

  std::vector<SvdTriple> results(jobs.size());
  detail::parallel_for(jobs.size(), [&](std::size_t i) { results[i] = svd(*jobs[i].input); });

  DecompositionSvd out;
  out.experts.resize(decomp.experts.size());
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (jobs[i].task < 0) {
      out.shared.emplace(*jobs[i].layer, std::move(results[i]));
    } else {
      out.experts[static_cast<std::size_t>(jobs[i].task)].emplace(*jobs[i].layer,
                                                                  std::move(results[i]));
    }
  }
  return out;
}

}  // namespace slimmerge
