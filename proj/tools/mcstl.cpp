// Command-line front end wiring corpus -> clustering -> training -> eval,
// plus the synthetic-data and gradient-check utilities.

#include "mcstl/clustering.hpp"
#include "mcstl/dataset.hpp"
#include "mcstl/metrics.hpp"
#include "mcstl/model.hpp"
#include "mcstl/synthgen.hpp"
#include "mcstl/trainer.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <sstream>

namespace {

using namespace mcstl;

std::vector<std::array<double, 3>> parse_pis(const std::vector<std::string>& triples) {
  std::vector<std::array<double, 3>> out;
  for (const std::string& tok : triples) {
    std::array<double, 3> pi{};
    std::stringstream ts(tok);
    std::string part;
    int i = 0;
    while (std::getline(ts, part, ':') && i < 3) pi[i++] = std::stod(part);
    if (i != 3) throw std::invalid_argument("pis must be colon-separated triples");
    out.push_back(pi);
  }
  return out;
}

struct SplitFlags {
  double holdout_fraction = 0.0;
  uint64_t split_seed = 0;
  int text_dim = 64;
};

void add_split_flags(CLI::App* cmd, SplitFlags& f) {
  cmd->add_option("--holdout-fraction", f.holdout_fraction,
                  "Reserve this item fraction as a held-out test side via the deterministic "
                  "stratified split (0 = use the whole file)")
      ->check(CLI::Range(0.0, 0.999));
  cmd->add_option("--split-seed", f.split_seed, "Seed for the stratified split");
  cmd->add_option("--text-dim", f.text_dim, "Featurizer width for raw-text records");
}

// Loads the dataset and applies the holdout split; returns (selected, other).
std::pair<Dataset, Dataset> load_side(const std::string& path, Task task, const SplitFlags& f,
                                      bool want_test) {
  Dataset ds = load_dataset(path, task, {f.text_dim});
  if (f.holdout_fraction <= 0.0) {
    if (want_test) return {std::move(ds), Dataset{}};
    return {std::move(ds), Dataset{}};
  }
  auto [train, test] = stratified_split(ds, f.holdout_fraction, f.split_seed);
  if (want_test) return {std::move(test), std::move(train)};
  return {std::move(train), std::move(test)};
}

int run_synth(const std::string& out_path, const SynthSpec& spec) {
  save_dataset(generate(spec), out_path);
  return 0;
}

int run_cluster(const std::string& data, Task task, const SplitFlags& split, ClusterMode mode,
                int k, uint64_t seed, const KMeansOptions& opts, const std::string& out) {
  auto [train, rest] = load_side(data, task, split, false);

  ClusterModel model;
  if (mode == ClusterMode::RationaleKMeans) {
    if (train.rationale_dim <= 0) {
      throw std::runtime_error("rationale mode needs rationale embeddings in the dataset");
    }
    Matrix emb(train.record_count(), train.rationale_dim);
    for (int r = 0; r < train.record_count(); ++r) {
      if (train.records[r].rationale_embedding.size() == 0) {
        throw std::runtime_error("record '" + train.records[r].item_id +
                                 "' has no rationale embedding (rationale mode)");
      }
      emb.row(r) = train.records[r].rationale_embedding;
    }
    model = kmeans_fit(emb, k, seed, opts);
  } else {
    model = build_categorical_model(train, mode);
  }
  const ClusterAssignment assignments = assign_dataset(train, model);
  compute_stats(train, assignments, model);
  for (int c : model.stats.empty_clusters) {
    std::cerr << "warning: cluster " << model.cluster_ids[c] << " has no training members\n";
  }
  save_cluster_model(model, out);
  std::cout << "wrote cluster model (" << cluster_mode_name(model.mode) << ", K=" << model.k
            << ") to " << out << "\n";
  return 0;
}

int run_train(const std::string& data, const SplitFlags& split, TrainConfig cfg,
              const std::string& clusters_path, const std::string& checkpoint_out,
              const std::string& log_out) {
  auto [train_ds, test_ds] = load_side(data, cfg.task, split, false);

  ClusterModel clusters;
  const ClusterModel* cm = nullptr;
  if (!clusters_path.empty()) {
    clusters = load_cluster_model(clusters_path);
    if (clusters.task != cfg.task) {
      throw std::runtime_error("cluster model task (" + task_name(clusters.task) +
                               ") does not match --task " + task_name(cfg.task));
    }
    cm = &clusters;
  }
  if (cfg.variant == Variant::Mcstl && !cm) {
    throw std::runtime_error("--variant mcstl requires --clusters");
  }

  const Dataset* eval_ds = test_ds.record_count() > 0 ? &test_ds : nullptr;
  const TrainResult result = train(train_ds, cm, cfg, eval_ds);

  save_checkpoint(result.params, checkpoint_out);
  if (!log_out.empty()) write_train_log(result, log_out);
  if (result.diverged) {
    std::cerr << "error: " << result.message << " (last good checkpoint written)\n";
    return 1;
  }
  std::cout << "trained " << variant_name(cfg.variant) << " for " << cfg.epochs
            << " epochs (lambda1=" << result.lambda1 << "); final loss "
            << (result.log.empty() ? 0.0 : result.log.back().total) << "\n";
  std::cout << "wrote checkpoint to " << checkpoint_out << "\n";
  return 0;
}

int run_eval(const std::string& data, Task task, const SplitFlags& split,
             const std::string& checkpoint_path, const std::string& clusters_path,
             const std::string& report_out, const std::string& calibration_csv) {
  auto [test_ds, rest] = load_side(data, task, split, true);

  const ModelParams params = load_checkpoint(checkpoint_path);
  if (params.task != task) {
    throw std::runtime_error("checkpoint task (" + task_name(params.task) +
                             ") does not match --task " + task_name(task));
  }
  const ClusterModel clusters = load_cluster_model(clusters_path);
  const EvalReport report = evaluate(test_ds, params, clusters);

  std::cout << render_report(report);
  if (!report_out.empty()) save_report(report, report_out);
  if (!calibration_csv.empty()) save_calibration_csv(report, calibration_csv);
  return 0;
}

int run_gradcheck(Task task, int draws, int d, int h, int k, int batch, uint64_t seed,
                  double step, double tolerance, const LossConfig& loss) {
  bool all_pass = true;
  for (int i = 0; i < draws; ++i) {
    const GradCheckFixture fx = make_gradcheck_fixture(task, d, h, k, batch, seed + i);
    const GradCheckReport rep = grad_check(fx.params, fx.batch, &fx.clusters, loss, step,
                                           tolerance);
    std::cout << "draw " << i << ":";
    for (const BlockCheck& b : rep.blocks) {
      std::printf(" %s=%.3e", b.name.c_str(), b.max_rel_err);
    }
    std::cout << (rep.all_pass ? "  ok" : "  FAIL") << "\n";
    all_pass = all_pass && rep.all_pass;
  }
  std::cout << (all_pass ? "gradcheck passed" : "gradcheck FAILED") << " (" << draws
            << " draws, step " << step << ", tolerance " << tolerance << ")\n";
  return all_pass ? 0 : 1;
}

int run_inspect_k(const std::string& data, Task task, const SplitFlags& split, int kmin, int kmax,
                  uint64_t seed, const KMeansOptions& opts) {
  auto [train, rest] = load_side(data, task, split, false);
  if (train.rationale_dim <= 0) {
    throw std::runtime_error("inspect-k needs rationale embeddings in the dataset");
  }
  Matrix emb(train.record_count(), train.rationale_dim);
  for (int r = 0; r < train.record_count(); ++r) {
    emb.row(r) = train.records[r].rationale_embedding;
  }
  std::cout << "k\tsse\tsilhouette\n";
  for (int k = kmin; k <= kmax; ++k) {
    KMeansTrace trace;
    try {
      const Matrix centroids = kmeans_lloyd(emb, k, seed, opts, &trace);
      std::printf("%d\t%.6f\t%.6f\n", k, trace.sse.back(),
                  silhouette_score(emb, trace.labels, k, seed));
    } catch (const std::invalid_argument& e) {
      std::cout << k << "\t-\t-\t(" << e.what() << ")\n";
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MC-STL: multicalibrated subjective task learner"};
  app.require_subcommand(1);
  app.set_config("--config")->envname("MCSTL_CONFIG");
  app.get_config_formatter_base()->comment('#');

  std::string task_str = "binary";
  const auto add_task = [&task_str](CLI::App* cmd) {
    cmd->add_option("--task", task_str, "Task kind: binary|ordinal3|preference")
        ->capture_default_str();
  };

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  SynthSpec spec;
  std::string synth_out;
  std::vector<double> rates{0.2, 0.5, 0.8};
  std::vector<std::string> pi_triples;
  add_task(synth);
  synth->add_option("--out", synth_out, "Output dataset file")->required();
  synth->add_option("--k", spec.k, "Number of value clusters")->capture_default_str();
  synth->add_option("--items", spec.items, "Number of items")->capture_default_str();
  synth->add_option("--per-item", spec.per_item, "Annotations per item")->capture_default_str();
  synth->add_option("--rates", rates, "Per-cluster rates, e.g. 0.2,0.5,0.8")
      ->delimiter(',')
      ->capture_default_str();
  synth->add_option("--pis", pi_triples, "Per-cluster ordinal triples, e.g. 0.6:0.3:0.1,...")
      ->delimiter(',');
  synth->add_option("--dim", spec.dim, "Item embedding dim")->capture_default_str();
  synth->add_option("--rationale-dim", spec.rationale_dim, "Rationale embedding dim")
      ->capture_default_str();
  synth->add_option("--separation", spec.separation, "Cluster anchor separation")
      ->capture_default_str();
  synth->add_option("--mixed-prob", spec.mixed_prob, "Mixed-membership probability")
      ->capture_default_str();
  synth->add_option("--latent-strength", spec.latent_strength, "Item latent logit-shift strength")
      ->capture_default_str();
  synth->add_option("--seed", spec.seed, "RNG seed");

  // cluster
  auto* cluster = app.add_subcommand("cluster", "Fit or collect a value-cluster model");
  std::string cluster_data, cluster_mode = "rationale", cluster_out;
  int cluster_k = 3;
  uint64_t cluster_seed = 0;
  KMeansOptions kopts;
  SplitFlags cluster_split;
  add_task(cluster);
  cluster->add_option("--data", cluster_data, "Dataset file")->required();
  cluster->add_option("--mode", cluster_mode, "rationale|taxonomy|sociocultural")
      ->capture_default_str();
  cluster->add_option("--k", cluster_k, "Number of k-means clusters")->capture_default_str();
  cluster->add_option("--seed", cluster_seed, "k-means seed");
  cluster->add_option("--max-iters", kopts.max_iters, "k-means iteration cap")
      ->capture_default_str();
  cluster->add_option("--tol", kopts.tol, "k-means centroid-shift tolerance")
      ->capture_default_str();
  cluster->add_option("--out", cluster_out, "Output cluster model file")->required();
  add_split_flags(cluster, cluster_split);

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a model variant");
  std::string train_data, train_variant = "mcstl", train_clusters, checkpoint_out, log_out;
  TrainConfig tcfg;
  tcfg.loss.lambda1 = -1.0;  // auto
  tcfg.loss.lambda2 = 1e-4;
  SplitFlags train_split;
  add_task(train_cmd);
  train_cmd->add_option("--data", train_data, "Training dataset file")->required();
  train_cmd->add_option("--variant", train_variant, "mcstl|phi|majority")->capture_default_str();
  train_cmd->add_option("--clusters", train_clusters, "Cluster model file (mcstl)");
  train_cmd->add_option("--epochs", tcfg.epochs, "Training epochs")->capture_default_str();
  train_cmd->add_option("--batch-size", tcfg.batch_size, "Mini-batch size")
      ->capture_default_str();
  train_cmd->add_option("--hidden", tcfg.hidden, "Trunk hidden width")->capture_default_str();
  train_cmd->add_option("--lr", tcfg.learning_rate, "Adam learning rate")->capture_default_str();
  train_cmd->add_option("--beta1", tcfg.beta1, "Adam beta1")->capture_default_str();
  train_cmd->add_option("--beta2", tcfg.beta2, "Adam beta2")->capture_default_str();
  train_cmd->add_option("--eps-opt", tcfg.eps_opt, "Adam epsilon")->capture_default_str();
  train_cmd->add_option("--seed", tcfg.seed, "Training seed");
  train_cmd
      ->add_option("--lambda1", tcfg.loss.lambda1,
                   "KL term weight; negative selects 1/(7.4*mbar), halved for ordinal")
      ->capture_default_str();
  train_cmd->add_option("--lambda2", tcfg.loss.lambda2, "Value-embedding L2 weight")
      ->capture_default_str();
  train_cmd->add_option("--sharpness", tcfg.loss.sharpness, "Soft-threshold sharpness l")
      ->capture_default_str();
  train_cmd->add_option("--eval-every", tcfg.eval_every,
                        "Snapshot eval cadence in epochs (needs a holdout)");
  train_cmd->add_option("--checkpoint-out", checkpoint_out, "Output checkpoint file")
      ->required();
  train_cmd->add_option("--log-out", log_out, "Training log file (line-delimited records)");
  add_split_flags(train_cmd, train_split);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string eval_data, eval_checkpoint, eval_clusters, report_out, calibration_csv;
  SplitFlags eval_split;
  add_task(eval_cmd);
  eval_cmd->add_option("--data", eval_data, "Dataset file")->required();
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--clusters", eval_clusters, "Cluster model file")->required();
  eval_cmd->add_option("--report-out", report_out, "Machine-readable report file");
  eval_cmd->add_option("--dump-calibration", calibration_csv,
                       "Write per-group calibration bin points as CSV");
  add_split_flags(eval_cmd, eval_split);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  int gc_draws = 20, gc_d = 5, gc_h = 7, gc_k = 3, gc_batch = 8;
  uint64_t gc_seed = 0;
  double gc_step = 1e-5, gc_tol = 1e-4;
  LossConfig gc_loss;
  gc_loss.lambda1 = 0.3;
  gc_loss.lambda2 = 0.05;
  gc_loss.sharpness = 25.0;  // keeps the tanh path finite-difference friendly
  add_task(gc);
  gc->add_option("--draws", gc_draws, "Random draws")->capture_default_str();
  gc->add_option("--dim", gc_d, "Embedding dim")->capture_default_str();
  gc->add_option("--hidden", gc_h, "Hidden width")->capture_default_str();
  gc->add_option("--k", gc_k, "Clusters")->capture_default_str();
  gc->add_option("--batch", gc_batch, "Batch size")->capture_default_str();
  gc->add_option("--seed", gc_seed, "Base seed");
  gc->add_option("--step", gc_step, "Finite-difference step")->capture_default_str();
  gc->add_option("--tolerance", gc_tol, "Max relative error")->capture_default_str();
  gc->add_option("--lambda1", gc_loss.lambda1, "KL weight")->capture_default_str();
  gc->add_option("--lambda2", gc_loss.lambda2, "L2 weight")->capture_default_str();
  gc->add_option("--sharpness", gc_loss.sharpness, "Soft-threshold sharpness")
      ->capture_default_str();

  // inspect-k
  auto* ik = app.add_subcommand("inspect-k", "Print SSE/silhouette per K for human selection");
  std::string ik_data;
  int ik_kmin = 2, ik_kmax = 6;
  uint64_t ik_seed = 0;
  KMeansOptions ik_opts;
  SplitFlags ik_split;
  add_task(ik);
  ik->add_option("--data", ik_data, "Dataset file")->required();
  ik->add_option("--kmin", ik_kmin, "Smallest K")->capture_default_str();
  ik->add_option("--kmax", ik_kmax, "Largest K")->capture_default_str();
  ik->add_option("--seed", ik_seed, "k-means seed");
  ik->add_option("--max-iters", ik_opts.max_iters, "k-means iteration cap")
      ->capture_default_str();
  ik->add_option("--tol", ik_opts.tol, "k-means tolerance")->capture_default_str();
  add_split_flags(ik, ik_split);

  for (CLI::App* sub : app.get_subcommands({})) sub->configurable();

  CLI11_PARSE(app, argc, argv);

  try {
    const Task task = parse_task(task_str);
    if (synth->parsed()) {
      spec.task = task;
      if (spec.task == Task::Ordinal3) {
        if (pi_triples.empty()) {
          throw std::runtime_error("synth --task ordinal3 requires --pis");
        }
        spec.pis = parse_pis(pi_triples);
      } else {
        spec.rates = rates;
      }
      return run_synth(synth_out, spec);
    }
    if (cluster->parsed()) {
      return run_cluster(cluster_data, task, cluster_split, parse_cluster_mode(cluster_mode),
                         cluster_k, cluster_seed, kopts, cluster_out);
    }
    if (train_cmd->parsed()) {
      tcfg.task = task;
      tcfg.variant = parse_variant(train_variant);
      return run_train(train_data, train_split, tcfg, train_clusters, checkpoint_out, log_out);
    }
    if (eval_cmd->parsed()) {
      return run_eval(eval_data, task, eval_split, eval_checkpoint, eval_clusters, report_out,
                      calibration_csv);
    }
    if (gc->parsed()) {
      return run_gradcheck(task, gc_draws, gc_d, gc_h, gc_k, gc_batch, gc_seed, gc_step, gc_tol,
                           gc_loss);
    }
    if (ik->parsed()) {
      return run_inspect_k(ik_data, task, ik_split, ik_kmin, ik_kmax, ik_seed, ik_opts);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
