#pragma once

#include "mcstl/types.hpp"

#include <span>
#include <string>
#include <vector>

namespace mcstl {

struct ModelDims {
  int d = 0;  // item embedding width
  int h = 0;  // hidden width
  int k = 0;  // value clusters (0 for the no-cluster baselines)
};

/// All learnable state. The trunk is one tanh hidden layer; its output layer
/// carries no bias (the task heads add theirs). `head` holds [b] for binary,
/// [b1, log_delta] for ordinal (b2 = b1 - exp(log_delta), so the CORAL bias
/// ordering b1 >= b2 holds for any parameter value). Preference mode has no
/// head bias; it owns per-cluster log temperatures instead.
struct ModelParams {
  Task task = Task::Binary;
  ModelDims dims;
  Matrix w1;           // h x d
  Vector c1;           // h
  Vector w2;           // h
  Matrix value_table;  // k x d, rows v_k
  Vector head;
  Vector log_temps;    // k (preference only)
  std::vector<std::string> cluster_ids;  // matching the cluster model, may be empty
};

/// Glorot-uniform trunk, zero value table, zero biases, delta = 1, unit
/// temperatures. Deterministic in seed.
ModelParams init_params(int d, int h, int k, Task task, uint64_t seed);

struct OrdinalPrediction {
  double p1 = 0.0;  // P(y > Low)
  double p2 = 0.0;  // P(y > Neutral)
  Eigen::Vector3d classes;  // (P_Low, P_Neutral, P_High)
};

/// V(S) = sum of the value-table rows in S. Errors on empty S or an
/// out-of-range index.
Vector value_embedding_sum(std::span<const int> S, const ModelParams& params);

/// o(e(x) + V(S)): the bias-free trunk logit. An empty S (baseline variants)
/// contributes a zero value embedding.
double trunk_logit(const Vector& x_emb, std::span<const int> S, const ModelParams& params);

double forward_binary(const Vector& x_emb, std::span<const int> S, const ModelParams& params);

OrdinalPrediction forward_ordinal(const Vector& x_emb, std::span<const int> S,
                                  const ModelParams& params);

double forward_preference(const Vector& x_emb_a, const Vector& x_emb_b, std::span<const int> S,
                          const ModelParams& params);

/// CORAL class recovery: (1 - p1, p1 - p2, p2).
Eigen::Vector3d recover_ordinal_classes(double p1, double p2);

/// Mean of exp(log_temp_k) over S; 1 when S is empty.
double cluster_temperature(std::span<const int> S, const ModelParams& params);

double ordinal_delta(const ModelParams& params);

// --- batched trunk (used by the loss and the trainer) ---

struct TrunkCache {
  Matrix z;  // B x d, fused inputs x + V(S)
  Matrix u;  // B x h, tanh activations
  Vector g;  // B, trunk logits
};

/// Forward over a batch of fused inputs (rows already include V(S)).
TrunkCache trunk_forward(const Matrix& fused, const ModelParams& params);

/// Backprop dL/dg into trunk parameter gradients; returns dL/dZ (B x d) so
/// the caller can scatter value-table gradients by cluster membership.
Matrix trunk_backward(const TrunkCache& cache, const Vector& dg, const ModelParams& params,
                      Matrix& dw1, Vector& dc1, Vector& dw2);

/// Stacks x rows plus their value-embedding sums into the fused input matrix.
Matrix fuse_inputs(const Matrix& x, const std::vector<std::vector<int>>& groups,
                   const ModelParams& params);

void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

}  // namespace mcstl
