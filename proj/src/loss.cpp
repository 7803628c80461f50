#include "mcstl/loss.hpp"

#include <cmath>

namespace mcstl {

namespace {

double clamp_unit(double v, double eps) {
  return v < eps ? eps : (v > 1.0 - eps ? 1.0 - eps : v);
}

void require_assigned(const Batch& batch, const ModelParams& params) {
  if (params.dims.k == 0) return;
  for (int r = 0; r < batch.size(); ++r) {
    if (batch.groups[r].empty()) {
      throw std::runtime_error("unassigned annotation at batch row " + std::to_string(r));
    }
  }
}

// lambda1 * sum_k alpha_k * sum_s KL(P_ks || Q_ks) over clusters with batch
// members; Q is the clamped soft-threshold mean, P the cluster's frozen train
// label mean. The binomial count is the number of batch members, which in
// full-batch mode equals the cluster population n_k.
double kl_term(const ClusterAggregates& agg, const ClusterStats& stats, const LossConfig& cfg) {
  double kl = 0.0;
  const int k = static_cast<int>(agg.batch_count.size());
  const int subtasks = static_cast<int>(agg.pprime.cols());
  for (int c = 0; c < k; ++c) {
    if (agg.batch_count[c] == 0 || stats.n[c] == 0) continue;
    double cluster_kl = 0.0;
    for (int s = 0; s < subtasks; ++s) {
      const double q = clamp_unit(agg.pprime(c, s), cfg.eps);
      cluster_kl += binomial_kl(static_cast<double>(agg.batch_count[c]), stats.ybar(c, s), q,
                                cfg.eps);
    }
    kl += stats.alpha[c] * cluster_kl;
  }
  return cfg.lambda1 * kl;
}

}  // namespace

Batch make_batch(const Dataset& ds, const ClusterAssignment* assignments,
                 std::span<const int> indices) {
  const int b = static_cast<int>(indices.size());
  Batch batch;
  batch.x.resize(b, ds.embed_dim);
  if (ds.task == Task::Preference) batch.x_b.resize(b, ds.embed_dim);
  batch.labels.resize(b);
  batch.groups.resize(b);
  for (int r = 0; r < b; ++r) {
    const AnnotationRecord& rec = ds.records[indices[r]];
    batch.x.row(r) = rec.embedding;
    if (ds.task == Task::Preference) batch.x_b.row(r) = rec.embedding_b;
    batch.labels[r] = rec.label;
    if (assignments) batch.groups[r] = (*assignments)[indices[r]];
  }
  return batch;
}

double ce_loss(int y, double p, double eps) {
  const double pc = clamp_unit(p, eps);
  return -(y * std::log(pc) + (1 - y) * std::log(1.0 - pc));
}

double soft_threshold_mean(std::span<const double> preds, double ybar, double sharpness) {
  if (preds.empty()) throw std::invalid_argument("soft_threshold_mean: empty member list");
  double acc = 0.0;
  for (double p : preds) acc += 1.0 + std::tanh(sharpness * (p - ybar));
  return 0.5 * acc / static_cast<double>(preds.size());
}

double binomial_kl(double n, double ybar, double pprime, double eps) {
  const double y = clamp_unit(ybar, eps);
  const double q = clamp_unit(pprime, eps);
  return n * (y * std::log(y / q) + (1.0 - y) * std::log((1.0 - y) / (1.0 - q)));
}

ClusterAggregates compute_aggregates(const Matrix& preds, const Batch& batch,
                                     const ClusterStats& stats, double sharpness) {
  const int k = static_cast<int>(stats.n.size());
  const int subtasks = static_cast<int>(preds.cols());
  ClusterAggregates agg;
  agg.tanh_sum = Matrix::Zero(k, subtasks);
  agg.batch_count.assign(k, 0);
  for (int r = 0; r < batch.size(); ++r) {
    for (int c : batch.groups[r]) {
      ++agg.batch_count[c];
      for (int s = 0; s < subtasks; ++s) {
        agg.tanh_sum(c, s) += std::tanh(sharpness * (preds(r, s) - stats.ybar(c, s)));
      }
    }
  }
  agg.pprime = Matrix::Zero(k, subtasks);
  for (int c = 0; c < k; ++c) {
    if (agg.batch_count[c] == 0) continue;
    for (int s = 0; s < subtasks; ++s) {
      agg.pprime(c, s) =
          0.5 * (1.0 + agg.tanh_sum(c, s) / static_cast<double>(agg.batch_count[c]));
    }
  }
  return agg;
}

TaskForward forward_batch(const Batch& batch, const ModelParams& params) {
  require_assigned(batch, params);
  const int b = batch.size();

  TaskForward fwd;
  switch (params.task) {
    case Task::Binary: {
      fwd.cache = trunk_forward(fuse_inputs(batch.x, batch.groups, params), params);
      fwd.raw.resize(b, 1);
      fwd.preds.resize(b, 1);
      for (int r = 0; r < b; ++r) {
        fwd.raw(r, 0) = fwd.cache.g[r] + params.head[0];
        fwd.preds(r, 0) = sigmoid(fwd.raw(r, 0));
      }
      break;
    }
    case Task::Ordinal3: {
      fwd.cache = trunk_forward(fuse_inputs(batch.x, batch.groups, params), params);
      const double bias1 = params.head[0];
      const double bias2 = bias1 - std::exp(params.head[1]);
      fwd.raw.resize(b, 2);
      fwd.preds.resize(b, 2);
      for (int r = 0; r < b; ++r) {
        fwd.raw(r, 0) = fwd.cache.g[r] + bias1;
        fwd.raw(r, 1) = fwd.cache.g[r] + bias2;
        fwd.preds(r, 0) = sigmoid(fwd.raw(r, 0));
        fwd.preds(r, 1) = sigmoid(fwd.raw(r, 1));
      }
      break;
    }
    case Task::Preference: {
      fwd.cache = trunk_forward(fuse_inputs(batch.x, batch.groups, params), params);
      fwd.cache_b = trunk_forward(fuse_inputs(batch.x_b, batch.groups, params), params);
      fwd.raw.resize(b, 1);
      fwd.preds.resize(b, 1);
      fwd.temps.resize(b);
      for (int r = 0; r < b; ++r) {
        fwd.temps[r] = cluster_temperature(batch.groups[r], params);
        fwd.raw(r, 0) = (fwd.cache.g[r] - fwd.cache_b.g[r]) / fwd.temps[r];
        fwd.preds(r, 0) = sigmoid(fwd.raw(r, 0));
      }
      break;
    }
  }
  return fwd;
}

LossBreakdown loss_from_forward(const TaskForward& fwd, const Batch& batch,
                                const ModelParams& params, const ClusterModel* clusters,
                                const LossConfig& cfg, ClusterAggregates* agg_out) {
  LossBreakdown out;
  const int b = batch.size();
  for (int r = 0; r < b; ++r) {
    if (params.task == Task::Ordinal3) {
      out.ce += ce_loss(subtask_label(batch.labels[r], 0), fwd.preds(r, 0), cfg.eps);
      out.ce += ce_loss(subtask_label(batch.labels[r], 1), fwd.preds(r, 1), cfg.eps);
    } else {
      out.ce += ce_loss(batch.labels[r], fwd.preds(r, 0), cfg.eps);
    }
  }
  // The preference loss carries no multicalibration KL term.
  if (params.task != Task::Preference && clusters && params.dims.k > 0) {
    ClusterAggregates agg = compute_aggregates(fwd.preds, batch, clusters->stats, cfg.sharpness);
    out.kl = kl_term(agg, clusters->stats, cfg);
    if (agg_out) *agg_out = std::move(agg);
  }
  if (params.dims.k > 0) out.l2 = cfg.lambda2 * params.value_table.squaredNorm();
  out.total = out.ce + out.kl + out.l2;
  return out;
}

LossBreakdown composite_loss_binary(const Batch& batch, const ModelParams& params,
                                    const ClusterModel* clusters, const LossConfig& cfg) {
  if (params.task != Task::Binary) throw std::invalid_argument("composite_loss_binary: wrong task");
  return loss_from_forward(forward_batch(batch, params), batch, params, clusters, cfg);
}

LossBreakdown composite_loss_ordinal(const Batch& batch, const ModelParams& params,
                                     const ClusterModel* clusters, const LossConfig& cfg) {
  if (params.task != Task::Ordinal3) {
    throw std::invalid_argument("composite_loss_ordinal: wrong task");
  }
  return loss_from_forward(forward_batch(batch, params), batch, params, clusters, cfg);
}

LossBreakdown composite_loss_preference(const Batch& batch, const ModelParams& params,
                                        const ClusterModel* clusters, const LossConfig& cfg) {
  if (params.task != Task::Preference) {
    throw std::invalid_argument("composite_loss_preference: wrong task");
  }
  return loss_from_forward(forward_batch(batch, params), batch, params, clusters, cfg);
}

LossBreakdown composite_loss(const Batch& batch, const ModelParams& params,
                             const ClusterModel* clusters, const LossConfig& cfg) {
  return loss_from_forward(forward_batch(batch, params), batch, params, clusters, cfg);
}

}  // namespace mcstl
