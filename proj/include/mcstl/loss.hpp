#pragma once

#include "mcstl/clustering.hpp"
#include "mcstl/dataset.hpp"
#include "mcstl/model.hpp"
#include "mcstl/types.hpp"

#include <span>
#include <vector>

namespace mcstl {

struct LossConfig {
  double lambda1 = 0.0;    // weight of the per-cluster KL term
  double lambda2 = 0.0;    // weight of the value-embedding L2 term
  double sharpness = 1e4;  // l, soft-threshold steepness
  double eps = 1e-6;       // smoothing for all log arguments
};

/// Term values are already lambda-weighted, so total = ce + kl + l2.
struct LossBreakdown {
  double ce = 0.0;
  double kl = 0.0;
  double l2 = 0.0;
  double total = 0.0;
};

/// A training mini-batch in matrix form. `groups` holds S_ij per row and is
/// all-empty for the no-cluster baseline variants.
struct Batch {
  Matrix x;    // B x d
  Matrix x_b;  // B x d, preference second sides (0x0 otherwise)
  std::vector<int> labels;
  std::vector<std::vector<int>> groups;

  int size() const { return static_cast<int>(labels.size()); }
};

/// Gathers the given record indices into a Batch. Pass a null assignment for
/// the baseline variants (empty S_ij everywhere).
Batch make_batch(const Dataset& ds, const ClusterAssignment* assignments,
                 std::span<const int> indices);

/// Binary cross-entropy with the prediction clamped into [eps, 1-eps].
double ce_loss(int y, double p, double eps = 1e-6);

/// Soft-thresholded mean (1/2n) * sum(1 + tanh(l * (p - ybar))) over the
/// cluster's batch members. Unclamped; callers clamp before the KL.
double soft_threshold_mean(std::span<const double> preds, double ybar, double sharpness);

/// n * [ybar ln(ybar/p') + (1-ybar) ln((1-ybar)/(1-p'))], with both rates
/// smoothed into [eps, 1-eps].
double binomial_kl(double n, double ybar, double pprime, double eps = 1e-6);

/// Per-cluster, per-sub-task soft-threshold aggregates over one batch.
struct ClusterAggregates {
  Matrix tanh_sum;                // K x subtasks, sum of tanh(l*(p - ybar))
  Matrix pprime;                  // K x subtasks, unclamped soft means
  std::vector<long> batch_count;  // K, batch members per cluster
};

/// `preds` is B x subtasks (column s = sub-task s predictions).
ClusterAggregates compute_aggregates(const Matrix& preds, const Batch& batch,
                                     const ClusterStats& stats, double sharpness);

/// Shared forward state for one batch; the trainer backpropagates through it
/// and the composite losses read their terms off it, so both always agree.
struct TaskForward {
  TrunkCache cache;    // item side (binary/ordinal) or side A (preference)
  TrunkCache cache_b;  // preference side B
  Matrix raw;          // B x subtasks, pre-sigmoid head inputs
  Matrix preds;        // B x subtasks, head probabilities
  Vector temps;        // B, preference cluster temperatures
};

TaskForward forward_batch(const Batch& batch, const ModelParams& params);

/// Assembles the composite loss from a forward pass. When `agg_out` is given
/// the (binary/ordinal) cluster aggregates used by the KL term are exported.
LossBreakdown loss_from_forward(const TaskForward& fwd, const Batch& batch,
                                const ModelParams& params, const ClusterModel* clusters,
                                const LossConfig& cfg, ClusterAggregates* agg_out = nullptr);

LossBreakdown composite_loss_binary(const Batch& batch, const ModelParams& params,
                                    const ClusterModel* clusters, const LossConfig& cfg);
LossBreakdown composite_loss_ordinal(const Batch& batch, const ModelParams& params,
                                     const ClusterModel* clusters, const LossConfig& cfg);
LossBreakdown composite_loss_preference(const Batch& batch, const ModelParams& params,
                                        const ClusterModel* clusters, const LossConfig& cfg);

/// Dispatch on params.task.
LossBreakdown composite_loss(const Batch& batch, const ModelParams& params,
                             const ClusterModel* clusters, const LossConfig& cfg);

}  // namespace mcstl
