#include "mcstl/metrics.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace mcstl {

using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct MeanStd {
  double mean = kNaN;
  double std = kNaN;
  long count = 0;
};

MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd out;
  out.count = static_cast<long>(xs.size());
  if (xs.empty()) return out;
  out.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - out.mean) * (x - out.mean);
  out.std = std::sqrt(var / static_cast<double>(xs.size()));
  return out;
}

}  // namespace

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auc: size mismatch");
  const int n = static_cast<int>(scores.size());
  long n_pos = 0;
  for (int l : labels) n_pos += (l == 1);
  const long n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return kNaN;

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return scores[a] < scores[b]; });

  // Average ranks across ties, then the Mann-Whitney U statistic.
  double rank_sum_pos = 0.0;
  int i = 0;
  while (i < n) {
    int j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks are 1-based
    for (int t = i; t < j; ++t) {
      if (labels[order[t]] == 1) rank_sum_pos += avg_rank;
    }
    i = j;
  }
  const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) * (n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double macro_auc_ordinal(const Matrix& class_probs, std::span<const int> labels) {
  const int classes = static_cast<int>(class_probs.cols());
  std::vector<double> per_class;
  std::vector<double> scores(labels.size());
  std::vector<int> onevsrest(labels.size());
  for (int c = 0; c < classes; ++c) {
    for (size_t r = 0; r < labels.size(); ++r) {
      scores[r] = class_probs(static_cast<Eigen::Index>(r), c);
      onevsrest[r] = labels[r] == c ? 1 : 0;
    }
    const double a = auc(scores, onevsrest);
    if (!std::isnan(a)) per_class.push_back(a);
  }
  if (per_class.empty()) return kNaN;
  return std::accumulate(per_class.begin(), per_class.end(), 0.0) /
         static_cast<double>(per_class.size());
}

double pairwise_accuracy(std::span<const double> preds, std::span<const int> labels) {
  if (preds.empty()) throw std::invalid_argument("pairwise_accuracy: empty input");
  long correct = 0;
  for (size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] == 0.5) continue;  // exact tie counts incorrect
    correct += ((preds[i] > 0.5) == (labels[i] == 1));
  }
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

std::optional<CalibrationFit> calibration_fit(std::span<const double> preds,
                                              std::span<const int> labels) {
  if (preds.size() != labels.size()) throw std::invalid_argument("calibration_fit: size mismatch");
  constexpr int kBins = 10;
  std::array<double, kBins> pred_sum{}, label_sum{};
  std::array<long, kBins> counts{};
  for (size_t i = 0; i < preds.size(); ++i) {
    int b = static_cast<int>(preds[i] * kBins);
    b = std::clamp(b, 0, kBins - 1);  // 1.0 falls into the last bin
    pred_sum[b] += preds[i];
    label_sum[b] += labels[i];
    ++counts[b];
  }

  CalibrationFit fit;
  for (int b = 0; b < kBins; ++b) {
    if (counts[b] == 0) continue;
    fit.bins.push_back({b, pred_sum[b] / static_cast<double>(counts[b]),
                        label_sum[b] / static_cast<double>(counts[b]), counts[b]});
  }
  if (fit.bins.size() < 2) return std::nullopt;

  double mx = 0.0, my = 0.0;
  for (const auto& p : fit.bins) {
    mx += p.mean_pred;
    my += p.mean_label;
  }
  mx /= static_cast<double>(fit.bins.size());
  my /= static_cast<double>(fit.bins.size());
  double sxy = 0.0, sxx = 0.0;
  for (const auto& p : fit.bins) {
    sxy += (p.mean_pred - mx) * (p.mean_label - my);
    sxx += (p.mean_pred - mx) * (p.mean_pred - mx);
  }
  fit.slope = sxy / sxx;
  fit.bias = my - fit.slope * mx;
  return fit;
}

double emd(const Vector& pred_dist, int label_class) {
  const int classes = static_cast<int>(pred_dist.size());
  if (classes < 2 || classes > 3) throw std::invalid_argument("emd: L must be 2 or 3");
  if (label_class < 0 || label_class >= classes) {
    throw std::invalid_argument("emd: label class out of range");
  }
  if (std::abs(pred_dist.sum() - 1.0) > 1e-9) {
    throw std::invalid_argument("emd: non-normalized prediction distribution");
  }
  double cdf_pred = 0.0;
  double total = 0.0;
  for (int l = 0; l < classes; ++l) {
    cdf_pred += pred_dist[l];
    const double cdf_label = l >= label_class ? 1.0 : 0.0;
    total += std::abs(cdf_pred - cdf_label);
  }
  return total;
}

MinorityScore minority_score(const Dataset& ds, const Matrix& pred_dists) {
  if (pred_dists.rows() != ds.record_count()) {
    throw std::invalid_argument("minority_score: missing predictions");
  }
  const int classes = label_count(ds.task);
  if (pred_dists.cols() != classes) {
    throw std::invalid_argument("minority_score: prediction width mismatch");
  }

  double total = 0.0;
  long count = 0;
  for (int i = 0; i < ds.item_count(); ++i) {
    const auto labels = ds.item_labels(i);
    const auto maj = majority_label(labels);
    if (!maj) continue;  // tied items are excluded
    for (int r : ds.item_records[i]) {
      if (ds.records[r].label == *maj) continue;
      total += emd(pred_dists.row(r).transpose(), ds.records[r].label);
      ++count;
    }
  }

  MinorityScore out;
  out.minority_count = count;
  if (count == 0) {
    out.no_minority = true;
    out.score = 1.0;
    return out;
  }
  out.score = 1.0 - total / (static_cast<double>(classes - 1) * static_cast<double>(count));
  return out;
}

Predictions predict_dataset(const Dataset& ds, const ModelParams& params,
                            const ClusterAssignment& assignments) {
  const int n = ds.record_count();
  const int classes = label_count(ds.task);

  // Baseline checkpoints (k = 0) predict without any cluster conditioning.
  std::vector<std::vector<int>> groups(n);
  if (params.dims.k > 0) {
    if (static_cast<int>(assignments.size()) != n) {
      throw std::invalid_argument("predict_dataset: assignment/record count mismatch");
    }
    for (int r = 0; r < n; ++r) groups[r] = assignments[r];
  }

  Matrix x(n, ds.embed_dim);
  for (int r = 0; r < n; ++r) x.row(r) = ds.records[r].embedding;

  Predictions out;
  out.dists.resize(n, classes);
  switch (ds.task) {
    case Task::Binary: {
      const TrunkCache cache = trunk_forward(fuse_inputs(x, groups, params), params);
      out.scores.resize(n, 1);
      for (int r = 0; r < n; ++r) {
        const double p = sigmoid(cache.g[r] + params.head[0]);
        out.scores(r, 0) = p;
        out.dists(r, 0) = 1.0 - p;
        out.dists(r, 1) = p;
      }
      break;
    }
    case Task::Ordinal3: {
      const TrunkCache cache = trunk_forward(fuse_inputs(x, groups, params), params);
      const double bias1 = params.head[0];
      const double bias2 = bias1 - std::exp(params.head[1]);
      out.scores.resize(n, 2);
      for (int r = 0; r < n; ++r) {
        const double p1 = sigmoid(cache.g[r] + bias1);
        const double p2 = sigmoid(cache.g[r] + bias2);
        out.scores(r, 0) = p1;
        out.scores(r, 1) = p2;
        out.dists.row(r) = recover_ordinal_classes(p1, p2).transpose();
      }
      break;
    }
    case Task::Preference: {
      Matrix xb(n, ds.embed_dim);
      for (int r = 0; r < n; ++r) xb.row(r) = ds.records[r].embedding_b;
      const TrunkCache ca = trunk_forward(fuse_inputs(x, groups, params), params);
      const TrunkCache cb = trunk_forward(fuse_inputs(xb, groups, params), params);
      out.scores.resize(n, 1);
      for (int r = 0; r < n; ++r) {
        const double t = cluster_temperature(groups[r], params);
        const double p = sigmoid((ca.g[r] - cb.g[r]) / t);
        out.scores(r, 0) = p;
        out.dists(r, 0) = 1.0 - p;
        out.dists(r, 1) = p;
      }
      break;
    }
  }
  return out;
}

EvalReport evaluate(const Dataset& test, const ModelParams& params, const ClusterModel& clusters) {
  if (params.task != test.task) {
    throw std::invalid_argument("evaluate: checkpoint task does not match dataset task");
  }
  if (clusters.task != test.task) {
    throw std::invalid_argument("evaluate: cluster model task does not match dataset task");
  }
  if (params.dims.k > 0 && params.dims.k != clusters.k) {
    throw std::invalid_argument("evaluate: checkpoint and cluster model disagree on K");
  }
  if (params.dims.k > 0 && !params.cluster_ids.empty() &&
      params.cluster_ids != clusters.cluster_ids) {
    throw std::invalid_argument("evaluate: checkpoint and cluster model cluster_ids differ");
  }

  const ClusterAssignment assignments = assign_dataset(test, clusters);
  const Predictions preds = predict_dataset(test, params, assignments);
  const int n = test.record_count();
  const int subtasks = subtask_count(test.task);

  EvalReport report;
  report.task = test.task;
  report.n_items = test.item_count();
  report.n_annotations = n;

  std::vector<int> labels(n);
  for (int r = 0; r < n; ++r) labels[r] = test.records[r].label;

  // Overall discrimination.
  switch (test.task) {
    case Task::Binary: {
      report.overall_metric = "macro_auc";
      std::vector<double> s(preds.scores.col(0).begin(), preds.scores.col(0).end());
      report.overall = auc(s, labels);
      break;
    }
    case Task::Ordinal3:
      report.overall_metric = "macro_auc";
      report.overall = macro_auc_ordinal(preds.dists, labels);
      break;
    case Task::Preference: {
      report.overall_metric = "pairwise_accuracy";
      std::vector<double> s(preds.scores.col(0).begin(), preds.scores.col(0).end());
      report.overall = pairwise_accuracy(s, labels);
      break;
    }
  }

  // Group membership of a test annotation is its S_ij.
  std::vector<std::vector<int>> members(clusters.k);
  for (int r = 0; r < n; ++r) {
    for (int c : assignments[r]) members[c].push_back(r);
  }

  std::vector<double> group_metrics;
  std::vector<double> slopes, biases;
  for (int c = 0; c < clusters.k; ++c) {
    const std::string& id = clusters.cluster_ids[c];
    report.group_counts[id] = static_cast<long>(members[c].size());
    if (members[c].empty()) {
      report.excluded_groups.push_back(id + ":empty");
      continue;
    }

    std::vector<int> glabels;
    glabels.reserve(members[c].size());
    for (int r : members[c]) glabels.push_back(labels[r]);

    double metric = kNaN;
    if (test.task == Task::Ordinal3) {
      Matrix probs(members[c].size(), 3);
      for (size_t i = 0; i < members[c].size(); ++i) probs.row(i) = preds.dists.row(members[c][i]);
      metric = macro_auc_ordinal(probs, glabels);
    } else {
      std::vector<double> gscores;
      gscores.reserve(members[c].size());
      for (int r : members[c]) gscores.push_back(preds.scores(r, 0));
      metric = test.task == Task::Preference ? pairwise_accuracy(gscores, glabels)
                                             : auc(gscores, glabels);
    }
    report.per_group[id] = metric;
    if (std::isnan(metric)) {
      report.excluded_groups.push_back(id + ":single_class");
    } else {
      group_metrics.push_back(metric);
    }

    for (int s = 0; s < subtasks; ++s) {
      std::vector<double> gp;
      std::vector<int> gy;
      gp.reserve(members[c].size());
      gy.reserve(members[c].size());
      for (int r : members[c]) {
        gp.push_back(preds.scores(r, s));
        gy.push_back(subtask_label(labels[r], s));
      }
      const auto fit = calibration_fit(gp, gy);
      if (!fit) {
        report.excluded_groups.push_back(id + ":calibration_subtask" + std::to_string(s + 1));
        continue;
      }
      report.calibration[id].push_back({s + 1, fit->slope, fit->bias, fit->bins});
      slopes.push_back(fit->slope);
      biases.push_back(fit->bias);
    }
  }

  const MeanStd gm = mean_std(group_metrics);
  report.group_mean = gm.mean;
  report.group_std = gm.std;
  const MeanStd sm = mean_std(slopes);
  report.calibration_mean_slope = sm.mean;
  report.calibration_std_slope = sm.std;
  const MeanStd bm = mean_std(biases);
  report.calibration_mean_bias = bm.mean;
  report.calibration_std_bias = bm.std;

  const MinorityScore ms = minority_score(test, preds.dists);
  report.one_minus_emd = ms.score;
  report.n_minority = ms.minority_count;
  if (ms.no_minority) {
    report.warnings.push_back("no minority annotations in the test set; 1-EMD reported as 1.0");
  }
  return report;
}

namespace {

json report_to_json(const EvalReport& r) {
  json j;
  j["task"] = task_name(r.task);
  j["overall_metric"] = r.overall_metric;
  j["overall"] = r.overall;
  j["per_group"] = r.per_group;
  j["group_mean"] = r.group_mean;
  j["group_std"] = r.group_std;
  json cal = json::object();
  for (const auto& [id, fits] : r.calibration) {
    json arr = json::array();
    for (const auto& f : fits) {
      json bins = json::array();
      for (const auto& b : f.bins) {
        bins.push_back({{"bin", b.bin},
                        {"mean_pred", b.mean_pred},
                        {"mean_label", b.mean_label},
                        {"count", b.count}});
      }
      arr.push_back(
          {{"subtask", f.subtask}, {"slope", f.slope}, {"bias", f.bias}, {"bins", bins}});
    }
    cal[id] = std::move(arr);
  }
  j["calibration"] = std::move(cal);
  j["calibration_mean_slope"] = r.calibration_mean_slope;
  j["calibration_std_slope"] = r.calibration_std_slope;
  j["calibration_mean_bias"] = r.calibration_mean_bias;
  j["calibration_std_bias"] = r.calibration_std_bias;
  j["one_minus_emd"] = r.one_minus_emd;
  j["counts"] = {{"items", r.n_items},
                 {"annotations", r.n_annotations},
                 {"minority_annotations", r.n_minority},
                 {"per_group", r.group_counts}};
  j["excluded_groups"] = r.excluded_groups;
  j["warnings"] = r.warnings;
  return j;
}

}  // namespace

std::string render_report(const EvalReport& r) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  os << "task: " << task_name(r.task) << "\n";
  os << "overall " << r.overall_metric << ": " << r.overall << "\n";
  os << "group " << r.overall_metric << ": " << r.group_mean << " +- " << r.group_std << "\n";
  os << "calibration slope: " << r.calibration_mean_slope << " +- " << r.calibration_std_slope
     << "\n";
  os << "calibration bias:  " << r.calibration_mean_bias << " +- " << r.calibration_std_bias
     << "\n";
  os << "minority 1-EMD: " << r.one_minus_emd << " (" << r.n_minority
     << " minority annotations)\n";
  os << "per group:\n";
  for (const auto& [id, metric] : r.per_group) {
    os << "  " << id << ": " << r.overall_metric << "=" << metric;
    auto it = r.calibration.find(id);
    if (it != r.calibration.end()) {
      for (const auto& f : it->second) {
        os << "  slope" << f.subtask << "=" << f.slope << " bias" << f.subtask << "=" << f.bias;
      }
    }
    os << "  n=" << r.group_counts.at(id) << "\n";
  }
  for (const auto& e : r.excluded_groups) os << "excluded: " << e << "\n";
  for (const auto& w : r.warnings) os << "warning: " << w << "\n";
  return os.str();
}

void save_report(const EvalReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write report: " + path);
  out << report_to_json(report).dump(2) << '\n';
}

void save_calibration_csv(const EvalReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write calibration csv: " + path);
  out << "group,subtask,bin,mean_pred,mean_label,count\n";
  out.precision(17);
  for (const auto& [id, fits] : report.calibration) {
    for (const auto& f : fits) {
      for (const auto& b : f.bins) {
        out << id << ',' << f.subtask << ',' << b.bin << ',' << b.mean_pred << ','
            << b.mean_label << ',' << b.count << '\n';
      }
    }
  }
}

}  // namespace mcstl
