#include "mcstl/trainer.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

namespace mcstl {

using nlohmann::json;

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::Mcstl: return "mcstl";
    case Variant::Phi: return "phi";
    case Variant::Majority: return "majority";
  }
  throw std::logic_error("unknown variant");
}

Variant parse_variant(std::string_view s) {
  if (s == "mcstl") return Variant::Mcstl;
  if (s == "phi") return Variant::Phi;
  if (s == "majority") return Variant::Majority;
  throw std::invalid_argument("unknown variant '" + std::string(s) +
                              "' (expected mcstl|phi|majority)");
}

Gradients zero_gradients(const ModelParams& params) {
  Gradients g;
  g.w1 = Matrix::Zero(params.w1.rows(), params.w1.cols());
  g.c1 = Vector::Zero(params.c1.size());
  g.w2 = Vector::Zero(params.w2.size());
  g.value_table = Matrix::Zero(params.value_table.rows(), params.value_table.cols());
  g.head = Vector::Zero(params.head.size());
  g.log_temps = Vector::Zero(params.log_temps.size());
  return g;
}

namespace {

// d(clamped CE)/d(logit): (p - y) while the prediction is strictly inside the
// smoothing interval, 0 once the clamp binds (the loss is flat there).
double ce_logit_grad(int y, double p, double eps) {
  if (p <= eps || p >= 1.0 - eps) return 0.0;
  return p - static_cast<double>(y);
}

// lambda1 * alpha_k * batch_count_k * dKL/dq per (cluster, sub-task); zero
// when the soft mean is clamped or the cluster has no batch members.
Matrix kl_coefficients(const ClusterAggregates& agg, const ClusterStats& stats,
                       const LossConfig& cfg) {
  const int k = static_cast<int>(agg.batch_count.size());
  const int subtasks = static_cast<int>(agg.pprime.cols());
  Matrix coef = Matrix::Zero(k, subtasks);
  for (int c = 0; c < k; ++c) {
    if (agg.batch_count[c] == 0 || stats.n[c] == 0) continue;
    for (int s = 0; s < subtasks; ++s) {
      const double q = agg.pprime(c, s);
      if (q <= cfg.eps || q >= 1.0 - cfg.eps) continue;
      const double yb = std::clamp(stats.ybar(c, s), cfg.eps, 1.0 - cfg.eps);
      coef(c, s) = cfg.lambda1 * stats.alpha[c] * static_cast<double>(agg.batch_count[c]) *
                   (-(yb / q) + (1.0 - yb) / (1.0 - q));
    }
  }
  return coef;
}

void scatter_value_grads(const Matrix& dz, const Batch& batch, Gradients& g) {
  for (int r = 0; r < batch.size(); ++r) {
    for (int c : batch.groups[r]) g.value_table.row(c) += dz.row(r);
  }
}

void check_finite(const Gradients& g) {
  const auto bad = [](const auto& m) { return m.size() > 0 && !m.allFinite(); };
  if (bad(g.w1)) throw std::runtime_error("non-finite gradient in block w1");
  if (bad(g.c1)) throw std::runtime_error("non-finite gradient in block c1");
  if (bad(g.w2)) throw std::runtime_error("non-finite gradient in block w2");
  if (bad(g.value_table)) throw std::runtime_error("non-finite gradient in block value_table");
  if (bad(g.head)) throw std::runtime_error("non-finite gradient in block head");
  if (bad(g.log_temps)) throw std::runtime_error("non-finite gradient in block log_temps");
}

}  // namespace

std::pair<Gradients, LossBreakdown> compute_gradients(const ModelParams& params,
                                                      const Batch& batch,
                                                      const ClusterModel* clusters,
                                                      const LossConfig& cfg) {
  const TaskForward fwd = forward_batch(batch, params);
  ClusterAggregates agg;
  const LossBreakdown breakdown = loss_from_forward(fwd, batch, params, clusters, cfg, &agg);

  Gradients g = zero_gradients(params);
  const int b = batch.size();
  const bool kl_active = params.task != Task::Preference && clusters && params.dims.k > 0 &&
                         cfg.lambda1 != 0.0 && !agg.batch_count.empty();
  Matrix kl_coef;
  if (kl_active) kl_coef = kl_coefficients(agg, clusters->stats, cfg);

  // dL/dp through the soft-threshold KL path for annotation r, sub-task s.
  const auto kl_pred_grad = [&](int r, int s) {
    if (!kl_active) return 0.0;
    const ClusterStats& st = clusters->stats;
    double acc = 0.0;
    for (int c : batch.groups[r]) {
      if (kl_coef(c, s) == 0.0) continue;
      const double th = std::tanh(cfg.sharpness * (fwd.preds(r, s) - st.ybar(c, s)));
      acc += kl_coef(c, s) * cfg.sharpness * (1.0 - th * th) /
             (2.0 * static_cast<double>(agg.batch_count[c]));
    }
    return acc;
  };

  switch (params.task) {
    case Task::Binary: {
      Vector dg(b);
      for (int r = 0; r < b; ++r) {
        const double p = fwd.preds(r, 0);
        double dt = ce_logit_grad(batch.labels[r], p, cfg.eps);
        dt += kl_pred_grad(r, 0) * p * (1.0 - p);
        dg[r] = dt;
      }
      g.head[0] = dg.sum();
      const Matrix dz = trunk_backward(fwd.cache, dg, params, g.w1, g.c1, g.w2);
      scatter_value_grads(dz, batch, g);
      break;
    }
    case Task::Ordinal3: {
      const double delta = std::exp(params.head[1]);
      Vector dg(b);
      double db1 = 0.0, dlog_delta = 0.0;
      for (int r = 0; r < b; ++r) {
        const double p1 = fwd.preds(r, 0);
        const double p2 = fwd.preds(r, 1);
        double dt1 = ce_logit_grad(subtask_label(batch.labels[r], 0), p1, cfg.eps);
        dt1 += kl_pred_grad(r, 0) * p1 * (1.0 - p1);
        double dt2 = ce_logit_grad(subtask_label(batch.labels[r], 1), p2, cfg.eps);
        dt2 += kl_pred_grad(r, 1) * p2 * (1.0 - p2);
        dg[r] = dt1 + dt2;
        db1 += dt1 + dt2;         // b2 = b1 - delta, so b1 feeds both heads
        dlog_delta += -delta * dt2;
      }
      g.head[0] = db1;
      g.head[1] = dlog_delta;
      const Matrix dz = trunk_backward(fwd.cache, dg, params, g.w1, g.c1, g.w2);
      scatter_value_grads(dz, batch, g);
      break;
    }
    case Task::Preference: {
      Vector dga(b), dgb(b);
      for (int r = 0; r < b; ++r) {
        const double p = fwd.preds(r, 0);
        const double dts = ce_logit_grad(batch.labels[r], p, cfg.eps);
        const double t = fwd.temps[r];
        dga[r] = dts / t;
        dgb[r] = -dts / t;
        if (!batch.groups[r].empty() && dts != 0.0) {
          // s = (ra - rb)/T with T the mean temperature over S_ij.
          const double dT = -dts * fwd.raw(r, 0) / t;
          const double inv = 1.0 / static_cast<double>(batch.groups[r].size());
          for (int c : batch.groups[r]) {
            g.log_temps[c] += dT * std::exp(params.log_temps[c]) * inv;
          }
        }
      }
      const Matrix dza = trunk_backward(fwd.cache, dga, params, g.w1, g.c1, g.w2);
      const Matrix dzb = trunk_backward(fwd.cache_b, dgb, params, g.w1, g.c1, g.w2);
      scatter_value_grads(dza, batch, g);
      scatter_value_grads(dzb, batch, g);
      break;
    }
  }

  if (params.dims.k > 0 && cfg.lambda2 != 0.0) {
    g.value_table += 2.0 * cfg.lambda2 * params.value_table;
  }
  check_finite(g);
  return {std::move(g), breakdown};
}

namespace {

struct AdamState {
  Gradients m;
  Gradients v;
  long t = 0;
};

void adam_step(ModelParams& params, const Gradients& g, AdamState& st, const TrainConfig& cfg) {
  ++st.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  const auto step = [&](auto& p, const auto& grad, auto& m, auto& v) {
    if (p.size() == 0) return;
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
    v.array() = cfg.beta2 * v.array() + (1.0 - cfg.beta2) * grad.array().square();
    p.array() -=
        cfg.learning_rate * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.eps_opt);
  };
  step(params.w1, g.w1, st.m.w1, st.v.w1);
  step(params.c1, g.c1, st.m.c1, st.v.c1);
  step(params.w2, g.w2, st.m.w2, st.v.w2);
  step(params.value_table, g.value_table, st.m.value_table, st.v.value_table);
  step(params.head, g.head, st.m.head, st.v.head);
  step(params.log_temps, g.log_temps, st.m.log_temps, st.v.log_temps);
}

}  // namespace

TrainResult train(const Dataset& train_ds, const ClusterModel* clusters, const TrainConfig& cfg,
                  const Dataset* eval_ds) {
  if (train_ds.task != cfg.task) {
    throw std::invalid_argument("train: dataset task does not match config task");
  }

  Dataset filtered;
  const Dataset* ds = &train_ds;
  if (cfg.variant == Variant::Majority) {
    filtered = majority_filter(train_ds);
    ds = &filtered;
  }
  if (ds->record_count() == 0) throw std::invalid_argument("train: empty training set");

  // Mcstl freezes cluster statistics from its own training split so the KL
  // targets always describe the data actually being fit.
  ClusterModel local;
  const ClusterModel* cm = nullptr;
  ClusterAssignment assignments;
  int k = 0;
  if (cfg.variant == Variant::Mcstl) {
    if (!clusters) throw std::invalid_argument("train: mcstl variant requires a cluster model");
    local = *clusters;
    assignments = assign_dataset(*ds, local);
    compute_stats(*ds, assignments, local, cfg.loss.eps);
    cm = &local;
    k = local.k;
  }

  LossConfig loss = cfg.loss;
  if (cfg.variant != Variant::Mcstl) {
    loss.lambda1 = 0.0;
  } else if (loss.lambda1 < 0.0) {
    const double mbar =
        static_cast<double>(ds->record_count()) / static_cast<double>(ds->item_count());
    loss.lambda1 = 1.0 / (7.4 * mbar);
    if (cfg.task == Task::Ordinal3) loss.lambda1 *= 0.5;
  }

  ModelParams params = init_params(ds->embed_dim, cfg.hidden, k, cfg.task, cfg.seed);
  if (cm) params.cluster_ids = cm->cluster_ids;

  AdamState adam;
  adam.m = zero_gradients(params);
  adam.v = zero_gradients(params);

  std::mt19937_64 rng(cfg.seed);
  std::vector<int> order(ds->record_count());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  result.lambda1 = loss.lambda1;
  ModelParams prev = params;

  const int n = ds->record_count();
  const int bs = std::max(1, std::min(cfg.batch_size, n));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochRecord rec;
    rec.epoch = epoch + 1;

    for (int start = 0; start < n; start += bs) {
      const int len = std::min(bs, n - start);
      const Batch batch =
          make_batch(*ds, cm ? &assignments : nullptr, std::span(order).subspan(start, len));

      Gradients grads;
      LossBreakdown breakdown;
      try {
        std::tie(grads, breakdown) = compute_gradients(params, batch, cm, loss);
      } catch (const std::runtime_error& e) {
        result.diverged = true;
        result.message = std::string("training aborted: ") + e.what();
        params = prev;
        break;
      }
      if (!std::isfinite(breakdown.total)) {
        result.diverged = true;
        result.message = "training aborted: non-finite loss at epoch " + std::to_string(epoch + 1);
        params = prev;
        break;
      }
      rec.total += breakdown.total;
      rec.ce += breakdown.ce;
      rec.kl += breakdown.kl;
      rec.l2 += breakdown.l2;

      prev = params;
      adam_step(params, grads, adam, cfg);
    }

    result.log.push_back(rec);
    if (result.diverged) break;

    if (eval_ds && clusters && cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0) {
      result.snapshots.emplace_back(epoch + 1, evaluate(*eval_ds, params, *clusters));
    }
  }

  result.params = std::move(params);
  return result;
}

void write_train_log(const TrainResult& result, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write train log: " + path);
  size_t snap = 0;
  for (const EpochRecord& rec : result.log) {
    json j;
    j["epoch"] = rec.epoch;
    j["total"] = rec.total;
    j["ce"] = rec.ce;
    j["kl"] = rec.kl;
    j["l2"] = rec.l2;
    out << j.dump() << '\n';
    while (snap < result.snapshots.size() && result.snapshots[snap].first == rec.epoch) {
      const EvalReport& r = result.snapshots[snap].second;
      json e;
      e["epoch"] = rec.epoch;
      e["eval"] = {{"overall", r.overall},
                   {"group_mean", r.group_mean},
                   {"calibration_mean_slope", r.calibration_mean_slope},
                   {"calibration_mean_bias", r.calibration_mean_bias},
                   {"one_minus_emd", r.one_minus_emd}};
      out << e.dump() << '\n';
      ++snap;
    }
  }
  if (result.diverged) {
    json j;
    j["aborted"] = result.message;
    out << j.dump() << '\n';
  }
}

GradCheckFixture make_gradcheck_fixture(Task task, int d, int h, int k, int batch_size,
                                        uint64_t seed) {
  if (k < 1) throw std::invalid_argument("make_gradcheck_fixture: k must be >= 1");
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> pick(0, k - 1);

  GradCheckFixture fx;
  fx.params = init_params(d, h, k, task, seed);
  const auto jiggle = [&](auto& m, double scale) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += scale * gauss(rng);
  };
  jiggle(fx.params.w1, 0.3);
  jiggle(fx.params.c1, 0.3);
  jiggle(fx.params.w2, 0.3);
  jiggle(fx.params.value_table, 0.4);
  jiggle(fx.params.head, 0.3);
  jiggle(fx.params.log_temps, 0.3);

  fx.batch.x = Matrix::NullaryExpr(batch_size, d, [&]() { return gauss(rng); });
  if (task == Task::Preference) {
    fx.batch.x_b = Matrix::NullaryExpr(batch_size, d, [&]() { return gauss(rng); });
  }
  std::uniform_int_distribution<int> pick_label(0, label_count(task) - 1);
  fx.batch.labels.resize(batch_size);
  fx.batch.groups.resize(batch_size);
  for (int r = 0; r < batch_size; ++r) {
    fx.batch.labels[r] = pick_label(rng);
    fx.batch.groups[r].push_back(pick(rng));
    if (k > 1 && unit(rng) < 0.4) {
      int second = pick(rng);
      while (second == fx.batch.groups[r][0]) second = pick(rng);
      fx.batch.groups[r].push_back(second);
      std::sort(fx.batch.groups[r].begin(), fx.batch.groups[r].end());
    }
  }

  fx.clusters.mode = ClusterMode::Taxonomy;
  fx.clusters.task = task;
  fx.clusters.k = k;
  const int subtasks = subtask_count(task);
  ClusterStats st;
  st.label_counts = Matrix::Zero(k, label_count(task));
  st.ybar = Matrix::Zero(k, subtasks);
  st.global_rate = Vector::Constant(subtasks, 0.5);
  st.alpha = Vector::Zero(k);
  st.n.assign(k, 0);
  std::uniform_int_distribution<int> pick_n(3, 30);
  for (int c = 0; c < k; ++c) {
    fx.clusters.cluster_ids.push_back("c" + std::to_string(c));
    st.n[c] = pick_n(rng);
    st.alpha[c] = 2.0 * unit(rng);
    for (int s = 0; s < subtasks; ++s) st.ybar(c, s) = 0.2 + 0.6 * unit(rng);
  }
  fx.clusters.stats = std::move(st);
  return fx;
}

GradCheckReport grad_check(const ModelParams& params, const Batch& batch,
                           const ClusterModel* clusters, const LossConfig& cfg, double step,
                           double tolerance, const GradFn& fn) {
  const auto [analytic, baseline] = fn(params, batch, clusters, cfg);
  ModelParams work = params;

  struct BlockRef {
    const char* name;
    double* p;
    const double* g;
    long size;
  };
  std::vector<BlockRef> blocks;
  const auto add = [&](const char* name, auto& pm, const auto& gm) {
    if (pm.size() > 0) blocks.push_back({name, pm.data(), gm.data(), pm.size()});
  };
  add("w1", work.w1, analytic.w1);
  add("c1", work.c1, analytic.c1);
  add("w2", work.w2, analytic.w2);
  add("value_table", work.value_table, analytic.value_table);
  add("head", work.head, analytic.head);
  add("log_temps", work.log_temps, analytic.log_temps);

  GradCheckReport report;
  for (const BlockRef& blk : blocks) {
    BlockCheck check;
    check.name = blk.name;
    check.size = blk.size;
    for (long i = 0; i < blk.size; ++i) {
      const double orig = blk.p[i];
      blk.p[i] = orig + step;
      const double up = composite_loss(batch, work, clusters, cfg).total;
      blk.p[i] = orig - step;
      const double down = composite_loss(batch, work, clusters, cfg).total;
      blk.p[i] = orig;
      const double fd = (up - down) / (2.0 * step);
      const double rel =
          std::abs(blk.g[i] - fd) / std::max({1.0, std::abs(blk.g[i]), std::abs(fd)});
      check.max_rel_err = std::max(check.max_rel_err, rel);
    }
    check.pass = check.max_rel_err < tolerance;
    report.all_pass = report.all_pass && check.pass;
    report.blocks.push_back(std::move(check));
  }
  return report;
}

}  // namespace mcstl
