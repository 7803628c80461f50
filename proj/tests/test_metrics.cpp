#include "mcstl/metrics.hpp"

#include "mcstl/synthgen.hpp"
#include "mcstl/trainer.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

using namespace mcstl;

namespace {

// O(n^2) pairwise-counting oracle for the Mann-Whitney AUC.
double auc_brute(std::span<const double> scores, std::span<const int> labels) {
  double num = 0.0;
  long pairs = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j]) num += 1.0;
      else if (scores[i] == scores[j]) num += 0.5;
    }
  }
  return pairs ? num / static_cast<double>(pairs)
               : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

TEST_CASE("auc basics") {
  const std::vector<double> sep{0.1, 0.2, 0.8, 0.9};
  const std::vector<int> lab{0, 0, 1, 1};
  CHECK(auc(sep, lab) == 1.0);

  const std::vector<double> same{0.5, 0.5, 0.5, 0.5};
  CHECK(auc(same, lab) == 0.5);

  const std::vector<double> hand{0.1, 0.4, 0.35, 0.8};
  CHECK(auc(hand, lab) == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(auc(hand, lab) == auc_brute(hand, lab));

  const std::vector<int> single{1, 1, 1, 1};
  CHECK(std::isnan(auc(sep, single)));
}

TEST_CASE("auc equals exhaustive pairwise counting on tie-heavy data") {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> grid(0, 5);
  std::uniform_int_distribution<int> coin(0, 1);
  std::uniform_int_distribution<int> len(2, 12);
  int checked = 0;
  while (checked < 1000) {
    const int n = len(rng);
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    for (int i = 0; i < n; ++i) {
      scores[i] = grid(rng) / 5.0;
      labels[i] = coin(rng);
    }
    const double brute = auc_brute(scores, labels);
    if (std::isnan(brute)) continue;
    CHECK(auc(scores, labels) == doctest::Approx(brute).epsilon(1e-15));
    ++checked;
  }
}

TEST_CASE("auc is invariant under strictly increasing transforms") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g;
  std::uniform_int_distribution<int> coin(0, 1);
  std::vector<double> scores(40), warped(40);
  std::vector<int> labels(40);
  for (int i = 0; i < 40; ++i) {
    scores[i] = g(rng);
    warped[i] = std::exp(scores[i]) + std::atan(scores[i]);
    labels[i] = coin(rng);
  }
  CHECK(auc(scores, labels) == auc(warped, labels));
}

TEST_CASE("macro ordinal auc averages one-vs-rest and skips absent classes") {
  Matrix probs(4, 3);
  probs << 0.8, 0.15, 0.05, 0.6, 0.3, 0.1, 0.1, 0.3, 0.6, 0.05, 0.25, 0.7;
  const std::vector<int> labels{0, 0, 2, 2};  // class 1 absent
  std::vector<double> c0{0.8, 0.6, 0.1, 0.05}, c2{0.05, 0.1, 0.6, 0.7};
  const std::vector<int> l0{1, 1, 0, 0}, l2{0, 0, 1, 1};
  const double expect = 0.5 * (auc_brute(c0, l0) + auc_brute(c2, l2));
  CHECK(macro_auc_ordinal(probs, labels) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("pairwise accuracy with the pessimistic tie rule") {
  const std::vector<double> perfect{0.9, 0.2, 0.7};
  const std::vector<int> labels{1, 0, 1};
  CHECK(pairwise_accuracy(perfect, labels) == 1.0);

  const std::vector<double> ties{0.5, 0.5, 0.5};
  CHECK(pairwise_accuracy(ties, labels) == 0.0);

  // exhaustive count: 0.9 vs 1 correct, 0.6 vs 0 wrong, 0.5 tie counts wrong
  const std::vector<double> mixed{0.9, 0.6, 0.5};
  CHECK(pairwise_accuracy(mixed, labels) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("calibration_fit recovers the diagonal and flat lines") {
  std::vector<double> preds;
  std::vector<int> labels;
  // bins at 0.35/0.45/0.65/0.85 with exactly matching label rates
  const std::vector<std::pair<double, int>> bins{{0.35, 7}, {0.45, 9}, {0.65, 13}, {0.85, 17}};
  for (const auto& [v, ones] : bins) {
    for (int i = 0; i < 20; ++i) {
      preds.push_back(v);
      labels.push_back(i < ones ? 1 : 0);
    }
  }
  const auto fit = calibration_fit(preds, labels);
  REQUIRE(fit.has_value());
  CHECK(fit->slope == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(fit->bias == doctest::Approx(0.0).scale(1.0).epsilon(1e-10));
  CHECK(fit->bins.size() == 4);

  SUBCASE("constant labels give slope 0 at the label rate") {
    std::vector<double> p2;
    std::vector<int> l2;
    for (const double v : {0.25, 0.45, 0.75}) {
      for (int i = 0; i < 20; ++i) {
        p2.push_back(v);
        l2.push_back(i < 6 ? 1 : 0);  // 0.3 everywhere
      }
    }
    const auto flat = calibration_fit(p2, l2);
    REQUIRE(flat.has_value());
    CHECK(flat->slope == doctest::Approx(0.0).scale(1.0).epsilon(1e-10));
    CHECK(flat->bias == doctest::Approx(0.3).epsilon(1e-10));
  }

  SUBCASE("fewer than two populated bins yields no fit") {
    const std::vector<double> narrow{0.41, 0.42, 0.43};
    const std::vector<int> l{0, 1, 0};
    CHECK_FALSE(calibration_fit(narrow, l).has_value());
  }

  SUBCASE("matches a closed-form OLS oracle on random bins") {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<double> p3;
    std::vector<int> l3;
    for (int i = 0; i < 500; ++i) {
      p3.push_back(unit(rng));
      l3.push_back(unit(rng) < p3.back() * 0.6 + 0.2 ? 1 : 0);
    }
    const auto f3 = calibration_fit(p3, l3);
    REQUIRE(f3.has_value());
    // recompute OLS over the reported bin points
    double sx = 0, sy = 0;
    for (const auto& b : f3->bins) {
      sx += b.mean_pred;
      sy += b.mean_label;
    }
    const double mx = sx / f3->bins.size(), my = sy / f3->bins.size();
    double num = 0, den = 0;
    for (const auto& b : f3->bins) {
      num += (b.mean_pred - mx) * (b.mean_label - my);
      den += (b.mean_pred - mx) * (b.mean_pred - mx);
    }
    CHECK(f3->slope == doctest::Approx(num / den).epsilon(1e-12));
    CHECK(f3->bias == doctest::Approx(my - (num / den) * mx).epsilon(1e-12));
  }
}

TEST_CASE("emd worked examples and properties") {
  CHECK(emd(Vector{{0.2, 0.5, 0.3}}, 1) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(emd(Vector{{0.7, 0.3}}, 1) == doctest::Approx(0.7).epsilon(1e-12));
  CHECK(emd(Vector{{0.0, 1.0, 0.0}}, 1) == 0.0);

  CHECK_THROWS_WITH_AS((void)emd(Vector{{0.5, 0.2, 0.1}}, 0), doctest::Contains("non-normalized"),
                       std::invalid_argument);
  CHECK_THROWS_AS((void)emd(Vector{{1.0}}, 0), std::invalid_argument);

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int t = 0; t < 500; ++t) {
    // binary EMD reduces to |p - y|
    const double p = unit(rng);
    const int y = t % 2;
    CHECK(emd(Vector{{1.0 - p, p}}, y) == doctest::Approx(std::abs(p - y)).epsilon(1e-12));

    // 3-class: equals the point-mass transport cost and is reversal-symmetric
    Vector q(3);
    q << unit(rng), unit(rng), unit(rng);
    q /= q.sum();
    const int label = static_cast<int>(3 * unit(rng)) % 3;
    double transport = 0.0;
    for (int j = 0; j < 3; ++j) transport += q[j] * std::abs(j - label);
    CHECK(emd(q, label) == doctest::Approx(transport).epsilon(1e-12));
    CHECK(emd(q, label) == doctest::Approx(emd(q.reverse(), 2 - label)).epsilon(1e-12));

    // zero distance only for the exact one-hot
    if (std::abs(q[label] - 1.0) > 1e-9) CHECK(emd(q, label) > 0.0);
  }
}

TEST_CASE("minority score over a hand-enumerated fixture") {
  Dataset ds;
  ds.task = Task::Binary;
  const auto add = [&](const std::string& item, int label) {
    AnnotationRecord r;
    r.item_id = item;
    r.label = label;
    r.embedding = Vector::Zero(2);
    ds.records.push_back(std::move(r));
  };
  // item a: labels 1,1,0 -> minority is the 0; item b: tie, excluded;
  // item c: labels 0,0 -> no minority
  add("a", 1);
  add("a", 1);
  add("a", 0);
  add("b", 0);
  add("b", 1);
  add("c", 0);
  add("c", 0);
  finalize_dataset(ds);

  Matrix dists(7, 2);
  dists << 0.2, 0.8, 0.1, 0.9, 0.7, 0.3,  // minority row 2: pred [0.7, 0.3], label 0
      0.5, 0.5, 0.5, 0.5, 0.9, 0.1, 0.8, 0.2;
  const MinorityScore ms = minority_score(ds, dists);
  CHECK(ms.minority_count == 1);
  // EMD([0.7,0.3], class 0) = 0.3, normalized by L-1 = 1
  CHECK(ms.score == doctest::Approx(1.0 - 0.3).epsilon(1e-12));

  SUBCASE("paper-style binary case: pred [0.7,0.3] against label 1 scores 0.3") {
    Matrix d2 = dists;
    d2.row(2) << 0.3, 0.7;  // flip so the minority label 0 is poorly predicted
    const MinorityScore worse = minority_score(ds, d2);
    CHECK(worse.score == doctest::Approx(1.0 - 0.7).epsilon(1e-12));
  }

  SUBCASE("no minority annotations reports 1.0 with a flag") {
    Dataset uni;
    uni.task = Task::Binary;
    uni.records = {ds.records[5], ds.records[6]};
    finalize_dataset(uni);
    const MinorityScore none = minority_score(uni, Matrix::Constant(2, 2, 0.5));
    CHECK(none.no_minority);
    CHECK(none.score == 1.0);
  }
}

TEST_CASE("minority score stays within [0, 1] on random inputs") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> label(0, 2);
  std::uniform_int_distribution<int> m(1, 5);
  Dataset ds;
  ds.task = Task::Ordinal3;
  for (int i = 0; i < 40; ++i) {
    const int mi = m(rng);
    for (int j = 0; j < mi; ++j) {
      AnnotationRecord r;
      r.item_id = "i" + std::to_string(i);
      r.label = label(rng);
      r.embedding = Vector::Zero(1);
      ds.records.push_back(std::move(r));
    }
  }
  finalize_dataset(ds);
  Matrix dists(ds.record_count(), 3);
  for (int r = 0; r < ds.record_count(); ++r) {
    Vector q(3);
    q << unit(rng), unit(rng), unit(rng);
    dists.row(r) = (q / q.sum()).transpose();
  }
  const MinorityScore ms = minority_score(ds, dists);
  CHECK(ms.score >= 0.0);
  CHECK(ms.score <= 1.0);
}

TEST_CASE("evaluate assembles per-group metrics and counts") {
  SynthSpec spec;
  spec.task = Task::Binary;
  spec.k = 2;
  spec.items = 120;
  spec.per_item = 4;
  spec.rates = {0.25, 0.75};
  spec.dim = 4;
  spec.latent_strength = 0.8;
  spec.seed = 77;
  const Dataset ds = generate(spec);

  ClusterModel clusters = build_categorical_model(ds, ClusterMode::Taxonomy);
  compute_stats(ds, assign_dataset(ds, clusters), clusters);

  TrainConfig cfg;
  cfg.task = Task::Binary;
  cfg.variant = Variant::Mcstl;
  cfg.epochs = 40;
  cfg.batch_size = 1024;
  cfg.hidden = 8;
  cfg.learning_rate = 0.01;
  cfg.seed = 5;
  cfg.loss.lambda2 = 1e-4;
  const TrainResult trained = train(ds, &clusters, cfg);

  const EvalReport report = evaluate(ds, trained.params, clusters);
  CHECK(report.n_items == 120);
  CHECK(report.n_annotations == 480);
  CHECK(report.per_group.size() == 2);
  CHECK(report.group_counts.at("c0") + report.group_counts.at("c1") >= 480);
  CHECK(report.overall > 0.5);  // cluster separation alone guarantees signal
  CHECK(report.one_minus_emd >= 0.0);
  CHECK(report.one_minus_emd <= 1.0);

  SUBCASE("single group covering everything matches the overall metric") {
    Dataset one = ds;
    for (auto& r : one.records) r.clusters = std::vector<std::string>{"all"};
    finalize_dataset(one);
    ClusterModel whole = build_categorical_model(one, ClusterMode::Taxonomy);
    compute_stats(one, assign_dataset(one, whole), whole);
    TrainConfig pcfg = cfg;
    pcfg.variant = Variant::Phi;
    const TrainResult phi = train(one, nullptr, pcfg);
    const EvalReport rep = evaluate(one, phi.params, whole);
    CHECK(rep.group_mean == doctest::Approx(rep.overall).epsilon(1e-12));
    CHECK(rep.group_std == doctest::Approx(0.0));
  }

  SUBCASE("task mismatches are rejected") {
    ClusterModel wrong = clusters;
    wrong.task = Task::Ordinal3;
    CHECK_THROWS_AS((void)evaluate(ds, trained.params, wrong), std::invalid_argument);
  }

  SUBCASE("report files are written") {
    save_report(report, "/tmp/mcstl_test_report.json");
    save_calibration_csv(report, "/tmp/mcstl_test_cal.csv");
    std::ifstream json("/tmp/mcstl_test_report.json");
    std::string first;
    std::getline(json, first);
    CHECK(first == "{");
    std::ifstream csv("/tmp/mcstl_test_cal.csv");
    std::getline(csv, first);
    CHECK(first == "group,subtask,bin,mean_pred,mean_label,count");
  }
}
