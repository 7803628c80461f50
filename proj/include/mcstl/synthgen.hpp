#pragma once

#include "mcstl/dataset.hpp"
#include "mcstl/types.hpp"

#include <array>
#include <vector>

namespace mcstl {

/// Generator spec for synthetic value-heterogeneous datasets with known
/// per-cluster label rates. Labels depend on the annotation's cluster and on
/// a per-item latent score z = w . x (standard normal under the fixed random
/// direction w), so the task is learnable and cluster conditioning is
/// informative. With beta = 2.5 * latent_strength:
///   binary      logit P(y=1 | item, k) = logit(theta_k) + beta z
///   ordinal     cumulative logits of pi_k shifted by beta z
///   preference  logit P(A preferred | k) =
///               beta (2 theta_k - 1) (z_a - z_b) / sqrt(2); theta_k sets
///               how strongly the cluster's taste follows the latent quality
///               score (0.5 = indifferent, < 0.5 = contrarian)
/// Cluster offsets shift label distributions while the latent effect is
/// shared, so empirical per-cluster rates stay close to theta_k at the
/// default latent_strength. Rationale embeddings are placed at per-cluster
/// anchors (scaled coordinate axes, `separation` apart) plus sigma = 0.5
/// Gaussian noise so k-means can recover the planted partition.
struct SynthSpec {
  Task task = Task::Binary;
  int k = 3;
  int items = 2000;
  int per_item = 6;
  std::vector<double> rates;                 // theta_k, binary/preference
  std::vector<std::array<double, 3>> pis;    // pi_k, ordinal
  int dim = 16;
  int rationale_dim = 8;
  double separation = 4.0;
  double mixed_prob = 0.0;   // chance an annotation carries a second cluster
  double latent_strength = 0.35;
  uint64_t seed = 0;
};

/// Fully deterministic in spec.seed. Records carry the item embedding(s), a
/// rationale embedding near the primary cluster's anchor, the ground-truth
/// cluster ids ("c0"...), and a matching "group" attribute.
Dataset generate(const SynthSpec& spec);

}  // namespace mcstl
