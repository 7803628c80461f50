#include "mcstl/synthgen.hpp"

#include "mcstl/clustering.hpp"

#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <sstream>

using namespace mcstl;

namespace {

int planted_cluster(const AnnotationRecord& r) {
  return std::stoi(r.clusters->front().substr(1));
}

// best agreement over all relabelings of the fitted clusters
double best_agreement(const std::vector<int>& fitted, const std::vector<int>& truth, int k) {
  std::vector<int> perm(k);
  std::iota(perm.begin(), perm.end(), 0);
  double best = 0.0;
  do {
    long hits = 0;
    for (size_t i = 0; i < fitted.size(); ++i) hits += perm[fitted[i]] == truth[i];
    best = std::max(best, static_cast<double>(hits) / fitted.size());
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

}  // namespace

TEST_CASE("per-cluster label rates stay near theta at default strength") {
  SynthSpec spec;
  spec.task = Task::Binary;
  spec.k = 2;
  spec.items = 200;
  spec.per_item = 10;
  spec.rates = {0.2, 0.8};
  spec.dim = 6;
  spec.seed = 123;
  const Dataset ds = generate(spec);
  CHECK(ds.record_count() == 2000);

  double sum[2] = {0, 0};
  long count[2] = {0, 0};
  for (const auto& r : ds.records) {
    const int c = planted_cluster(r);
    sum[c] += r.label;
    ++count[c];
  }
  CHECK(sum[0] / count[0] == doctest::Approx(0.2).epsilon(0.25));
  CHECK(std::abs(sum[0] / count[0] - 0.2) < 0.05);
  CHECK(std::abs(sum[1] / count[1] - 0.8) < 0.05);
}

TEST_CASE("generation is deterministic, byte for byte") {
  SynthSpec spec;
  spec.task = Task::Ordinal3;
  spec.k = 3;
  spec.items = 50;
  spec.per_item = 4;
  spec.pis = {{0.6, 0.3, 0.1}, {0.3, 0.4, 0.3}, {0.1, 0.3, 0.6}};
  spec.dim = 5;
  spec.seed = 9;
  const Dataset a = generate(spec);
  const Dataset b = generate(spec);
  CHECK(a == b);

  std::ostringstream sa, sb;
  write_dataset(a, sa);
  write_dataset(b, sb);
  CHECK(sa.str() == sb.str());

  SynthSpec other = spec;
  other.seed = 10;
  CHECK_FALSE(generate(other) == a);
}

TEST_CASE("mixed membership obeys the probability switch") {
  SynthSpec spec;
  spec.task = Task::Binary;
  spec.k = 3;
  spec.items = 80;
  spec.per_item = 3;
  spec.rates = {0.2, 0.5, 0.8};
  spec.dim = 4;
  spec.seed = 4;

  spec.mixed_prob = 0.0;
  for (const auto& r : generate(spec).records) CHECK(r.clusters->size() == 1);

  spec.mixed_prob = 0.6;
  long pairs = 0;
  const Dataset mixed = generate(spec);
  for (const auto& r : mixed.records) {
    CHECK(r.clusters->size() >= 1);
    CHECK(r.clusters->size() <= 2);
    pairs += r.clusters->size() == 2;
    if (r.clusters->size() == 2) CHECK(r.clusters->at(0) != r.clusters->at(1));
  }
  CHECK(pairs > 60);  // roughly 60% of 240
}

TEST_CASE("generated datasets pass corpus validation and round-trip") {
  SynthSpec spec;
  spec.task = Task::Preference;
  spec.k = 2;
  spec.items = 40;
  spec.per_item = 3;
  spec.rates = {0.6, 0.8};
  spec.dim = 4;
  spec.seed = 6;
  const Dataset ds = generate(spec);
  for (const auto& r : ds.records) {
    CHECK(r.embedding_b.size() == 4);
    CHECK((r.label == 0 || r.label == 1));
    CHECK(r.attributes->count("group") == 1);
  }
  std::ostringstream out;
  write_dataset(ds, out);
  std::istringstream in(out.str());
  CHECK(read_dataset(in, Task::Preference) == ds);
}

TEST_CASE("kmeans recovers the planted partition at default separation") {
  SynthSpec spec;
  spec.task = Task::Binary;
  spec.k = 3;
  spec.items = 300;
  spec.per_item = 3;
  spec.rates = {0.2, 0.5, 0.8};
  spec.dim = 4;
  spec.seed = 15;
  const Dataset ds = generate(spec);

  Matrix emb(ds.record_count(), ds.rationale_dim);
  std::vector<int> truth(ds.record_count());
  for (int r = 0; r < ds.record_count(); ++r) {
    emb.row(r) = ds.records[r].rationale_embedding;
    truth[r] = planted_cluster(ds.records[r]);
  }
  KMeansTrace trace;
  (void)kmeans_fit(emb, 3, 2, {}, &trace);
  CHECK(best_agreement(trace.labels, truth, 3) >= 0.95);
}

TEST_CASE("spec validation errors") {
  SynthSpec spec;
  spec.task = Task::Binary;
  spec.k = 2;
  spec.rates = {0.5};  // wrong arity
  CHECK_THROWS_AS((void)generate(spec), std::invalid_argument);

  spec.rates = {0.5, 1.5};
  CHECK_THROWS_AS((void)generate(spec), std::invalid_argument);

  SynthSpec ord;
  ord.task = Task::Ordinal3;
  ord.k = 1;
  ord.pis = {{0.5, 0.2, 0.2}};  // does not sum to 1
  CHECK_THROWS_AS((void)generate(ord), std::invalid_argument);

  SynthSpec bad;
  bad.k = 0;
  CHECK_THROWS_AS((void)generate(bad), std::invalid_argument);
}
