#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace mcstl {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Task { Binary, Ordinal3, Preference };

inline std::string task_name(Task t) {
  switch (t) {
    case Task::Binary: return "binary";
    case Task::Ordinal3: return "ordinal3";
    case Task::Preference: return "preference";
  }
  throw std::logic_error("unknown task");
}

inline Task parse_task(std::string_view s) {
  if (s == "binary") return Task::Binary;
  if (s == "ordinal3") return Task::Ordinal3;
  if (s == "preference") return Task::Preference;
  throw std::invalid_argument("unknown task '" + std::string(s) +
                              "' (expected binary|ordinal3|preference)");
}

/// Number of label classes L for the task.
inline int label_count(Task t) { return t == Task::Ordinal3 ? 3 : 2; }

/// Number of binary sub-tasks the loss decomposes into (2 for ordinal).
inline int subtask_count(Task t) { return t == Task::Ordinal3 ? 2 : 1; }

/// Sub-task indicator: y(0) = 1[label > Low], y(1) = 1[label > Neutral].
/// For binary/preference only sub-task 0 exists and equals the label.
inline int subtask_label(int label, int subtask) { return label > subtask ? 1 : 0; }

inline double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// KL divergence between Bernoulli(p) and Bernoulli(q); both rates are
/// smoothed into [eps, 1-eps] before any log.
inline double bernoulli_kl(double p, double q, double eps) {
  const auto clamp01 = [eps](double v) {
    return v < eps ? eps : (v > 1.0 - eps ? 1.0 - eps : v);
  };
  const double ps = clamp01(p);
  const double qs = clamp01(q);
  return ps * std::log(ps / qs) + (1.0 - ps) * std::log((1.0 - ps) / (1.0 - qs));
}

}  // namespace mcstl
