#pragma once

#include "mcstl/clustering.hpp"
#include "mcstl/dataset.hpp"
#include "mcstl/loss.hpp"
#include "mcstl/metrics.hpp"
#include "mcstl/model.hpp"

#include <functional>
#include <string>
#include <vector>

namespace mcstl {

enum class Variant { Mcstl, Phi, Majority };

std::string variant_name(Variant v);
Variant parse_variant(std::string_view s);

struct TrainConfig {
  Task task = Task::Binary;
  Variant variant = Variant::Mcstl;
  int epochs = 300;
  int batch_size = 256;
  int hidden = 64;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_opt = 1e-8;
  uint64_t seed = 0;
  LossConfig loss;          // loss.lambda1 < 0 selects the 1/(7.4*mbar) default
  int eval_every = 0;       // 0 disables metric snapshots
};

/// Gradient structure mirroring ModelParams.
struct Gradients {
  Matrix w1;
  Vector c1;
  Vector w2;
  Matrix value_table;
  Vector head;
  Vector log_temps;
};

Gradients zero_gradients(const ModelParams& params);

/// Exact reverse-mode gradients of the configured composite loss, together
/// with the loss value it differentiates. Value-table rows for clusters
/// absent from the batch receive only the L2 gradient.
std::pair<Gradients, LossBreakdown> compute_gradients(const ModelParams& params,
                                                      const Batch& batch,
                                                      const ClusterModel* clusters,
                                                      const LossConfig& cfg);

struct EpochRecord {
  int epoch = 0;
  double total = 0.0;
  double ce = 0.0;
  double kl = 0.0;
  double l2 = 0.0;
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochRecord> log;
  std::vector<std::pair<int, EvalReport>> snapshots;
  double lambda1 = 0.0;  // resolved value actually used
  bool diverged = false;
  std::string message;
};

/// Trains the requested variant. Mcstl assigns `train_ds` under `clusters`
/// and freezes the per-cluster stats from it; Phi and Majority train the
/// same trunk with K = 0 (Majority first applies the Maj(Y) filter).
/// Deterministic given the seed. Optional eval_ds enables periodic
/// EvalReport snapshots (grouped under `clusters`).
TrainResult train(const Dataset& train_ds, const ClusterModel* clusters, const TrainConfig& cfg,
                  const Dataset* eval_ds = nullptr);

void write_train_log(const TrainResult& result, const std::string& path);

struct BlockCheck {
  std::string name;
  long size = 0;
  double max_rel_err = 0.0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<BlockCheck> blocks;
  bool all_pass = true;
};

using GradFn = std::function<std::pair<Gradients, LossBreakdown>(
    const ModelParams&, const Batch&, const ClusterModel*, const LossConfig&)>;

/// Central finite differences against the analytic gradients, reported per
/// parameter block. Relative error per coordinate is
/// |analytic - numeric| / max(1, |analytic|, |numeric|). `fn` exists so
/// tests can inject a deliberately corrupted gradient.
GradCheckReport grad_check(const ModelParams& params, const Batch& batch,
                           const ClusterModel* clusters, const LossConfig& cfg,
                           double step = 1e-5, double tolerance = 1e-4,
                           const GradFn& fn = compute_gradients);

struct GradCheckFixture {
  ModelParams params;
  Batch batch;
  ClusterModel clusters;
};

/// Random (params, batch, cluster stats) draw for gradient verification:
/// every parameter block is perturbed away from its init (so the value table
/// is nonzero), labels/cluster sets are random, and the cluster stats carry
/// random rates and weights. Deterministic in seed.
GradCheckFixture make_gradcheck_fixture(Task task, int d, int h, int k, int batch_size,
                                        uint64_t seed);

}  // namespace mcstl
