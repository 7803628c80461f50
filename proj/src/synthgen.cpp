#include "mcstl/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace mcstl {

namespace {

constexpr double kRationaleNoise = 0.5;
constexpr double kLatentScale = 2.5;  // logit shift per unit latent_strength

double logit(double p) { return std::log(p / (1.0 - p)); }

double clamp_prob(double p) { return std::clamp(p, 0.01, 0.99); }

void validate(const SynthSpec& spec) {
  if (spec.k < 1) throw std::invalid_argument("synth: K must be >= 1");
  if (spec.items < 1 || spec.per_item < 1) {
    throw std::invalid_argument("synth: items and per_item must be >= 1");
  }
  if (spec.dim < 1 || spec.rationale_dim < 1) {
    throw std::invalid_argument("synth: embedding dimensions must be >= 1");
  }
  if (spec.mixed_prob < 0.0 || spec.mixed_prob > 1.0) {
    throw std::invalid_argument("synth: mixed_prob must be in [0, 1]");
  }
  if (spec.task == Task::Ordinal3) {
    if (static_cast<int>(spec.pis.size()) != spec.k) {
      throw std::invalid_argument("synth: need one pi triple per cluster");
    }
    for (const auto& pi : spec.pis) {
      double sum = 0.0;
      for (double p : pi) {
        if (p < 0.0) throw std::invalid_argument("synth: pi components must be >= 0");
        sum += p;
      }
      if (std::abs(sum - 1.0) > 1e-9) {
        throw std::invalid_argument("synth: each pi triple must sum to 1");
      }
    }
  } else {
    if (static_cast<int>(spec.rates.size()) != spec.k) {
      throw std::invalid_argument("synth: need one rate per cluster");
    }
    for (double t : spec.rates) {
      if (t <= 0.0 || t >= 1.0) throw std::invalid_argument("synth: rates must be in (0, 1)");
    }
  }
}

}  // namespace

Dataset generate(const SynthSpec& spec) {
  validate(spec);

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> pick_cluster(0, spec.k - 1);

  // Fixed latent direction; z = w . x is the item's standard-normal score.
  Vector w(spec.dim);
  for (int i = 0; i < spec.dim; ++i) w[i] = gauss(rng);
  w /= w.norm();

  // Cluster anchors for the rationale space: scaled coordinate axes while
  // they last, random directions beyond that.
  Matrix anchors(spec.k, spec.rationale_dim);
  anchors.setZero();
  for (int c = 0; c < spec.k; ++c) {
    if (c < spec.rationale_dim) {
      anchors(c, c) = spec.separation;
    } else {
      Vector dir(spec.rationale_dim);
      for (int i = 0; i < spec.rationale_dim; ++i) dir[i] = gauss(rng);
      anchors.row(c) = spec.separation * dir.transpose() / dir.norm();
    }
  }

  // Per-cluster label-logit offsets. The item latent score shifts every
  // cluster's logit by the same beta * z, so a shared trunk plus per-cluster
  // offsets can represent the truth exactly. Preference clusters instead
  // scale how strongly the pair's score gap drives the preference, which is
  // the per-cluster-temperature geometry.
  const double beta = kLatentScale * spec.latent_strength;
  std::vector<double> l0(spec.k, 0.0);                   // binary logit offsets
  std::vector<double> l1(spec.k, 0.0), l2(spec.k, 0.0);  // ordinal cumulative logits
  if (spec.task == Task::Ordinal3) {
    for (int c = 0; c < spec.k; ++c) {
      l1[c] = logit(clamp_prob(spec.pis[c][1] + spec.pis[c][2]));  // P(y > Low)
      l2[c] = logit(clamp_prob(spec.pis[c][2]));                   // P(y > Neutral)
    }
  } else if (spec.task == Task::Binary) {
    for (int c = 0; c < spec.k; ++c) l0[c] = logit(spec.rates[c]);
  }

  const auto cluster_prob = [&](int c, double z, double z_b) {
    switch (spec.task) {
      case Task::Binary:
        return sigmoid(l0[c] + beta * z);
      case Task::Preference:
        // theta_k sets the cluster's alignment with the latent quality score
        // (0.5 = indifferent, above = prefers higher-quality items).
        return sigmoid(beta * (2.0 * spec.rates[c] - 1.0) * (z - z_b) / std::numbers::sqrt2);
      default:
        throw std::logic_error("cluster_prob: ordinal handled separately");
    }
  };

  Dataset ds;
  ds.task = spec.task;
  ds.records.reserve(static_cast<size_t>(spec.items) * spec.per_item);

  for (int i = 0; i < spec.items; ++i) {
    Vector x(spec.dim);
    for (int d = 0; d < spec.dim; ++d) x[d] = gauss(rng);
    const double z = w.dot(x);

    Vector xb;
    double zb = 0.0;
    if (spec.task == Task::Preference) {
      xb.resize(spec.dim);
      for (int d = 0; d < spec.dim; ++d) xb[d] = gauss(rng);
      zb = w.dot(xb);
    }

    for (int j = 0; j < spec.per_item; ++j) {
      const int primary = pick_cluster(rng);
      int secondary = -1;
      if (spec.mixed_prob > 0.0 && unit(rng) < spec.mixed_prob && spec.k > 1) {
        secondary = pick_cluster(rng);
        while (secondary == primary) secondary = pick_cluster(rng);
      }

      AnnotationRecord rec;
      rec.item_id = (spec.task == Task::Preference ? "p" : "i") + std::to_string(i);
      rec.embedding = x;
      if (spec.task == Task::Preference) rec.embedding_b = xb;

      if (spec.task == Task::Ordinal3) {
        // Mixed annotations blend the cumulative probabilities, which keeps
        // q1 >= q2 and hence a valid category distribution.
        double q1 = sigmoid(l1[primary] + beta * z);
        double q2 = sigmoid(l2[primary] + beta * z);
        if (secondary >= 0) {
          q1 = 0.5 * (q1 + sigmoid(l1[secondary] + beta * z));
          q2 = 0.5 * (q2 + sigmoid(l2[secondary] + beta * z));
        }
        const double u = unit(rng);
        rec.label = u < q2 ? 2 : (u < q1 ? 1 : 0);
      } else {
        double p = cluster_prob(primary, z, zb);
        if (secondary >= 0) p = 0.5 * (p + cluster_prob(secondary, z, zb));
        rec.label = unit(rng) < p ? 1 : 0;
      }

      rec.rationale_embedding.resize(spec.rationale_dim);
      for (int d = 0; d < spec.rationale_dim; ++d) {
        rec.rationale_embedding[d] = anchors(primary, d) + kRationaleNoise * gauss(rng);
      }

      std::vector<std::string> cs{"c" + std::to_string(primary)};
      if (secondary >= 0) cs.push_back("c" + std::to_string(secondary));
      rec.clusters = std::move(cs);
      rec.attributes = std::map<std::string, std::string>{
          {"group", "g" + std::to_string(primary)}};

      ds.records.push_back(std::move(rec));
    }
  }

  finalize_dataset(ds);
  return ds;
}

}  // namespace mcstl
