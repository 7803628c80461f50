#pragma once

#include "mcstl/clustering.hpp"
#include "mcstl/dataset.hpp"
#include "mcstl/model.hpp"
#include "mcstl/types.hpp"

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mcstl {

/// Mann-Whitney AUC: probability a random positive outranks a random
/// negative, ties counted 1/2. NaN when only one class is present.
double auc(std::span<const double> scores, std::span<const int> labels);

/// Unweighted mean of one-vs-rest AUCs over the ordinal classes, scored by
/// the recovered class probabilities (column c of `class_probs`). Classes
/// with a single-class label vector are skipped; NaN if none remain.
double macro_auc_ordinal(const Matrix& class_probs, std::span<const int> labels);

/// Fraction with (p > 0.5) matching the label; p == 0.5 counts incorrect.
double pairwise_accuracy(std::span<const double> preds, std::span<const int> labels);

struct CalibrationBin {
  int bin = 0;
  double mean_pred = 0.0;
  double mean_label = 0.0;
  long count = 0;
};

struct CalibrationFit {
  double slope = 0.0;
  double bias = 0.0;
  std::vector<CalibrationBin> bins;
};

/// Fixed-width decile bins on [0,1]; OLS line over the non-empty bins'
/// (mean prediction, mean label) points. nullopt when fewer than two bins
/// are populated.
std::optional<CalibrationFit> calibration_fit(std::span<const double> preds,
                                              std::span<const int> labels);

/// Closed-form 1-D earth mover's distance between a predicted class
/// distribution and a one-hot label: the L1 distance of their CDFs.
double emd(const Vector& pred_dist, int label_class);

struct MinorityScore {
  double score = 1.0;
  long minority_count = 0;
  bool no_minority = false;
};

/// 1 - normalized EMD over annotations that disagree with their item's
/// majority label. Tied-majority items contribute nothing; score is 1.0
/// (flagged) when no minority annotations exist.
MinorityScore minority_score(const Dataset& ds, const Matrix& pred_dists);

struct GroupCalibration {
  int subtask = 0;
  double slope = 0.0;
  double bias = 0.0;
  std::vector<CalibrationBin> bins;
};

struct EvalReport {
  Task task = Task::Binary;
  std::string overall_metric;  // "macro_auc" or "pairwise_accuracy"
  double overall = 0.0;
  std::map<std::string, double> per_group;
  double group_mean = 0.0;
  double group_std = 0.0;
  std::map<std::string, std::vector<GroupCalibration>> calibration;
  double calibration_mean_slope = 0.0;
  double calibration_std_slope = 0.0;
  double calibration_mean_bias = 0.0;
  double calibration_std_bias = 0.0;
  double one_minus_emd = 1.0;
  long n_items = 0;
  long n_annotations = 0;
  long n_minority = 0;
  std::map<std::string, long> group_counts;
  std::vector<std::string> excluded_groups;  // single-class or <2 calibration bins
  std::vector<std::string> warnings;
};

/// Per-annotation model predictions for a dataset, one row per record:
/// binary/preference -> [1-p, p]; ordinal -> the recovered class triple.
/// `scores` carries the raw head outputs (p, or p1/p2 for ordinal).
struct Predictions {
  Matrix dists;   // n x L
  Matrix scores;  // n x subtasks
};

Predictions predict_dataset(const Dataset& ds, const ModelParams& params,
                            const ClusterAssignment& assignments);

/// Full evaluation: overall metric, per-group metrics and calibration with
/// mean +- std, and the minority 1-EMD score. Test annotations are grouped
/// by their S_ij under `clusters` (nearest centroid in rationale mode).
EvalReport evaluate(const Dataset& test, const ModelParams& params, const ClusterModel& clusters);

std::string render_report(const EvalReport& report);
void save_report(const EvalReport& report, const std::string& path);
void save_calibration_csv(const EvalReport& report, const std::string& path);

}  // namespace mcstl
