#include "mcstl/trainer.hpp"

#include "mcstl/synthgen.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

using namespace mcstl;

namespace {

void axpy(ModelParams& p, const Gradients& g, double step) {
  p.w1 -= step * g.w1;
  p.c1 -= step * g.c1;
  p.w2 -= step * g.w2;
  p.value_table -= step * g.value_table;
  p.head -= step * g.head;
  p.log_temps -= step * g.log_temps;
}

bool params_equal(const ModelParams& a, const ModelParams& b) {
  const auto eq = [](const auto& x, const auto& y) {
    return x.size() == y.size() && (x.size() == 0 || (x.array() == y.array()).all());
  };
  return eq(a.w1, b.w1) && eq(a.c1, b.c1) && eq(a.w2, b.w2) &&
         eq(a.value_table, b.value_table) && eq(a.head, b.head) && eq(a.log_temps, b.log_temps);
}

}  // namespace

TEST_CASE("single-annotation CE gradient matches the sigmoid chain rule") {
  GradCheckFixture fx = make_gradcheck_fixture(Task::Binary, 3, 4, 2, 1, 5);
  const LossConfig cfg{};  // lambda1 = lambda2 = 0
  const auto [g, lb] = compute_gradients(fx.params, fx.batch, &fx.clusters, cfg);

  const Vector x = fx.batch.x.row(0).transpose();
  const auto& s = fx.batch.groups[0];
  const double p = forward_binary(x, s, fx.params);
  const double dt = p - fx.batch.labels[0];

  // head gradient is exactly (p - y)
  CHECK(g.head[0] == doctest::Approx(dt).epsilon(1e-12));

  // trunk chain: dw2 = dt * tanh(W1 z + c1)
  const Vector z = x + value_embedding_sum(s, fx.params);
  const Vector u = ((fx.params.w1 * z) + fx.params.c1).array().tanh();
  CHECK((g.w2 - dt * u).cwiseAbs().maxCoeff() < 1e-12);

  // dW1 = dt * (w2 .* (1 - u^2)) z^T
  const Vector da = dt * (fx.params.w2.array() * (1.0 - u.array().square())).matrix();
  CHECK((g.w1 - da * z.transpose()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((g.c1 - da).cwiseAbs().maxCoeff() < 1e-12);

  // value rows in S get dz, others zero (lambda2 = 0)
  const Vector dz = fx.params.w1.transpose() * da;
  for (int c = 0; c < fx.params.dims.k; ++c) {
    const bool in_s = std::find(s.begin(), s.end(), c) != s.end();
    if (in_s) {
      CHECK((g.value_table.row(c).transpose() - dz).cwiseAbs().maxCoeff() < 1e-12);
    } else {
      CHECK(g.value_table.row(c).cwiseAbs().maxCoeff() == 0.0);
    }
  }
}

TEST_CASE("zero value table has zero L2 gradient") {
  GradCheckFixture fx = make_gradcheck_fixture(Task::Binary, 3, 4, 3, 4, 6);
  fx.params.value_table.setZero();
  LossConfig cfg;
  cfg.lambda2 = 2.5;
  const auto [g, lb] = compute_gradients(fx.params, fx.batch, &fx.clusters, cfg);
  // rows of clusters absent from the batch carry only the L2 part, here zero
  std::vector<bool> present(3, false);
  for (const auto& s : fx.batch.groups) {
    for (int c : s) present[c] = true;
  }
  for (int c = 0; c < 3; ++c) {
    if (!present[c]) CHECK(g.value_table.row(c).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("analytic gradients match finite differences for all tasks") {
  const double sharpness[3] = {5.0, 25.0, 80.0};
  for (const Task task : {Task::Binary, Task::Ordinal3, Task::Preference}) {
    CAPTURE(task_name(task));
    for (int draw = 0; draw < 3; ++draw) {
      const GradCheckFixture fx =
          make_gradcheck_fixture(task, 4, 5, 3, 6, 700 + 10 * static_cast<int>(task) + draw);
      LossConfig cfg;
      cfg.lambda1 = 0.3;
      cfg.lambda2 = 0.05;
      cfg.sharpness = sharpness[draw];
      const GradCheckReport rep = grad_check(fx.params, fx.batch, &fx.clusters, cfg);
      for (const BlockCheck& b : rep.blocks) {
        CAPTURE(b.name);
        CHECK(b.max_rel_err < 1e-4);
      }
      CHECK(rep.all_pass);
    }
  }
}

TEST_CASE("grad_check flags a corrupted gradient in the right block") {
  const GradCheckFixture fx = make_gradcheck_fixture(Task::Binary, 3, 4, 2, 5, 17);
  LossConfig cfg;
  cfg.lambda1 = 0.2;
  cfg.lambda2 = 0.1;
  cfg.sharpness = 20.0;
  const GradFn corrupt = [](const ModelParams& p, const Batch& b, const ClusterModel* cm,
                            const LossConfig& c) {
    auto out = compute_gradients(p, b, cm, c);
    out.first.head[0] += 0.5;
    return out;
  };
  const GradCheckReport rep = grad_check(fx.params, fx.batch, &fx.clusters, cfg, 1e-5, 1e-4,
                                         corrupt);
  CHECK_FALSE(rep.all_pass);
  for (const BlockCheck& b : rep.blocks) {
    if (b.name == "head") {
      CHECK_FALSE(b.pass);
    } else {
      CHECK(b.pass);
    }
  }
}

TEST_CASE("grad_check skips parameter blocks that do not exist") {
  // K = 0 baseline params: no value table, no temperatures
  const ModelParams p = init_params(3, 4, 0, Task::Binary, 2);
  Batch batch;
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  batch.x = Matrix::NullaryExpr(4, 3, [&]() { return g(rng); });
  batch.labels = {0, 1, 1, 0};
  batch.groups.resize(4);
  const GradCheckReport rep = grad_check(p, batch, nullptr, {});
  CHECK(rep.all_pass);
  for (const BlockCheck& b : rep.blocks) CHECK(b.name != std::string("value_table"));
  CHECK(rep.blocks.size() == 4);  // w1, c1, w2, head
}

TEST_CASE("one full-batch descent step decreases the loss (20 seeds)") {
  for (const Task task : {Task::Binary, Task::Ordinal3}) {
    CAPTURE(task_name(task));
    for (uint64_t seed = 0; seed < 10; ++seed) {
      GradCheckFixture fx = make_gradcheck_fixture(task, 4, 6, 2, 32, 900 + seed);
      LossConfig cfg;
      cfg.lambda1 = 0.1;
      cfg.lambda2 = 0.05;
      cfg.sharpness = 30.0;
      const auto [g, before] = compute_gradients(fx.params, fx.batch, &fx.clusters, cfg);
      axpy(fx.params, g, 1e-4);
      const LossBreakdown after = composite_loss(fx.batch, fx.params, &fx.clusters, cfg);
      CHECK(after.total < before.total);
    }
  }
}

TEST_CASE("train is deterministic and honors variants") {
  SynthSpec spec;
  spec.task = Task::Binary;
  spec.k = 2;
  spec.items = 60;
  spec.per_item = 3;
  spec.rates = {0.25, 0.75};
  spec.dim = 4;
  spec.seed = 31;
  const Dataset ds = generate(spec);

  Matrix emb(ds.record_count(), ds.rationale_dim);
  for (int r = 0; r < ds.record_count(); ++r) emb.row(r) = ds.records[r].rationale_embedding;
  ClusterModel clusters = kmeans_fit(emb, 2, 3);
  clusters.task = Task::Binary;

  TrainConfig cfg;
  cfg.task = Task::Binary;
  cfg.variant = Variant::Mcstl;
  cfg.epochs = 5;
  cfg.batch_size = 64;
  cfg.hidden = 8;
  cfg.seed = 11;
  cfg.loss.lambda1 = -1.0;  // auto
  cfg.loss.lambda2 = 1e-4;

  const TrainResult a = train(ds, &clusters, cfg);
  const TrainResult b = train(ds, &clusters, cfg);
  CHECK(params_equal(a.params, b.params));
  CHECK_FALSE(a.diverged);
  CHECK(a.log.size() == 5);
  CHECK(a.lambda1 == doctest::Approx(1.0 / (7.4 * 3.0)));

  SUBCASE("phi variant trains without a value table") {
    cfg.variant = Variant::Phi;
    const TrainResult phi = train(ds, nullptr, cfg);
    CHECK(phi.params.dims.k == 0);
    CHECK(phi.params.value_table.rows() == 0);
    CHECK(phi.params.cluster_ids.empty());
  }

  SUBCASE("majority variant filters ties before training") {
    cfg.variant = Variant::Majority;
    const TrainResult maj = train(ds, nullptr, cfg);
    CHECK(maj.params.dims.k == 0);
    CHECK_FALSE(maj.diverged);
  }

  SUBCASE("mcstl without clusters is rejected") {
    CHECK_THROWS_AS((void)train(ds, nullptr, cfg), std::invalid_argument);
  }

  SUBCASE("snapshots appear on the eval_every cadence") {
    cfg.eval_every = 2;
    cfg.epochs = 5;
    const TrainResult snap = train(ds, &clusters, cfg, &ds);
    REQUIRE(snap.snapshots.size() == 2);
    CHECK(snap.snapshots[0].first == 2);
    CHECK(snap.snapshots[1].first == 4);
  }
}

TEST_CASE("a separable toy problem trains to low CE") {
  // 60 items, one annotation each, label = sign of the first coordinate
  Dataset ds;
  ds.task = Task::Binary;
  std::mt19937_64 rng(21);
  std::normal_distribution<double> g;
  for (int i = 0; i < 60; ++i) {
    AnnotationRecord r;
    r.item_id = "i" + std::to_string(i);
    r.embedding = Vector::NullaryExpr(2, [&]() { return g(rng); });
    if (std::abs(r.embedding[0]) < 0.2) r.embedding[0] += r.embedding[0] < 0 ? -0.2 : 0.2;
    r.label = r.embedding[0] > 0 ? 1 : 0;
    ds.records.push_back(std::move(r));
  }
  finalize_dataset(ds);

  TrainConfig cfg;
  cfg.task = Task::Binary;
  cfg.variant = Variant::Phi;
  cfg.epochs = 200;
  cfg.batch_size = 60;
  cfg.hidden = 8;
  cfg.learning_rate = 0.05;
  cfg.seed = 2;
  const TrainResult result = train(ds, nullptr, cfg);
  CHECK_FALSE(result.diverged);
  CHECK(result.log.back().ce / 60.0 < 0.05);
}

TEST_CASE("divergence aborts with the last good parameters") {
  SynthSpec spec;
  spec.task = Task::Binary;
  spec.k = 2;
  spec.items = 30;
  spec.per_item = 2;
  spec.rates = {0.3, 0.7};
  spec.dim = 3;
  spec.seed = 5;
  const Dataset ds = generate(spec);
  const ClusterModel clusters = [&] {
    Matrix emb(ds.record_count(), ds.rationale_dim);
    for (int r = 0; r < ds.record_count(); ++r) emb.row(r) = ds.records[r].rationale_embedding;
    ClusterModel m = kmeans_fit(emb, 2, 1);
    m.task = Task::Binary;
    return m;
  }();

  TrainConfig cfg;
  cfg.task = Task::Binary;
  cfg.variant = Variant::Mcstl;
  cfg.epochs = 4;
  cfg.batch_size = 64;
  cfg.hidden = 4;
  cfg.learning_rate = 1e155;  // first step blows the L2 term to infinity
  cfg.seed = 3;
  cfg.loss.lambda1 = 0.0;
  cfg.loss.lambda2 = 1e-4;
  const TrainResult result = train(ds, &clusters, cfg);
  CHECK(result.diverged);
  CHECK_FALSE(result.message.empty());
  CHECK(result.params.w1.allFinite());
  CHECK(result.params.value_table.allFinite());
  const double p = forward_binary(ds.records[0].embedding, std::vector<int>{0}, result.params);
  CHECK(std::isfinite(p));
}

TEST_CASE("trained checkpoint round-trips to bitwise-equal predictions") {
  SynthSpec spec;
  spec.task = Task::Ordinal3;
  spec.k = 2;
  spec.items = 40;
  spec.per_item = 2;
  spec.pis = {{0.5, 0.3, 0.2}, {0.2, 0.3, 0.5}};
  spec.dim = 3;
  spec.seed = 9;
  const Dataset ds = generate(spec);
  ClusterModel clusters = build_categorical_model(ds, ClusterMode::Taxonomy);

  TrainConfig cfg;
  cfg.task = Task::Ordinal3;
  cfg.variant = Variant::Mcstl;
  cfg.epochs = 3;
  cfg.hidden = 6;
  cfg.seed = 8;
  cfg.loss.lambda1 = -1.0;  // auto, halved for ordinal: 1/(2 * 7.4 * mbar)
  cfg.loss.lambda2 = 1e-4;
  const TrainResult result = train(ds, &clusters, cfg);
  CHECK(result.lambda1 == doctest::Approx(1.0 / (2.0 * 7.4 * 2.0)));

  const std::string path = "/tmp/mcstl_test_trained_ckpt.json";
  save_checkpoint(result.params, path);
  const ModelParams back = load_checkpoint(path);
  compute_stats(ds, assign_dataset(ds, clusters), clusters);
  const Predictions p1 = predict_dataset(ds, result.params, assign_dataset(ds, clusters));
  const Predictions p2 = predict_dataset(ds, back, assign_dataset(ds, clusters));
  CHECK((p1.dists.array() == p2.dists.array()).all());
  CHECK((p1.scores.array() == p2.scores.array()).all());
}

TEST_CASE("train log serialization is readable line-delimited json") {
  SynthSpec spec;
  spec.task = Task::Binary;
  spec.k = 2;
  spec.items = 20;
  spec.per_item = 2;
  spec.rates = {0.3, 0.7};
  spec.dim = 2;
  spec.seed = 2;
  const Dataset ds = generate(spec);
  TrainConfig cfg;
  cfg.task = Task::Binary;
  cfg.variant = Variant::Phi;
  cfg.epochs = 3;
  cfg.hidden = 4;
  const TrainResult result = train(ds, nullptr, cfg);
  const std::string path = "/tmp/mcstl_test_train_log.jsonl";
  write_train_log(result, path);
  std::ifstream in(path);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    ++lines;
    CHECK(line.find("\"epoch\":") != std::string::npos);
  }
  CHECK(lines == 3);
}
