#include "mcstl/model.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <random>

namespace mcstl {

using nlohmann::json;

ModelParams init_params(int d, int h, int k, Task task, uint64_t seed) {
  if (d < 1 || h < 1 || k < 0) throw std::invalid_argument("init_params: bad dimensions");

  ModelParams p;
  p.task = task;
  p.dims = {d, h, k};

  std::mt19937_64 rng(seed);
  const double b1 = std::sqrt(6.0 / static_cast<double>(d + h));
  std::uniform_real_distribution<double> u1(-b1, b1);
  p.w1 = Matrix::NullaryExpr(h, d, [&]() { return u1(rng); });
  p.c1 = Vector::Zero(h);
  const double b2 = std::sqrt(6.0 / static_cast<double>(h + 1));
  std::uniform_real_distribution<double> u2(-b2, b2);
  p.w2 = Vector::NullaryExpr(h, [&]() { return u2(rng); });
  p.value_table = Matrix::Zero(k, d);

  switch (task) {
    case Task::Binary:
      p.head = Vector::Zero(1);
      break;
    case Task::Ordinal3:
      p.head = Vector::Zero(2);  // [b1, log_delta]; exp(0) = 1 so b1 - b2 = 1
      break;
    case Task::Preference:
      p.head = Vector();
      p.log_temps = Vector::Zero(k);
      break;
  }
  return p;
}

namespace {

Vector value_sum_or_zero(std::span<const int> S, const ModelParams& params) {
  Vector v = Vector::Zero(params.dims.d);
  for (int c : S) {
    if (c < 0 || c >= params.dims.k) {
      throw std::out_of_range("cluster index " + std::to_string(c) + " out of range");
    }
    v += params.value_table.row(c);
  }
  return v;
}

}  // namespace

Vector value_embedding_sum(std::span<const int> S, const ModelParams& params) {
  if (S.empty()) throw std::invalid_argument("value_embedding_sum: empty cluster set");
  return value_sum_or_zero(S, params);
}

double trunk_logit(const Vector& x_emb, std::span<const int> S, const ModelParams& params) {
  if (x_emb.size() != params.dims.d) {
    throw std::invalid_argument("trunk_logit: embedding dimension mismatch");
  }
  const Vector z = x_emb + value_sum_or_zero(S, params);
  const Vector u = ((params.w1 * z) + params.c1).array().tanh();
  return params.w2.dot(u);
}

double forward_binary(const Vector& x_emb, std::span<const int> S, const ModelParams& params) {
  if (params.task != Task::Binary) throw std::invalid_argument("forward_binary: wrong task");
  return sigmoid(trunk_logit(x_emb, S, params) + params.head[0]);
}

Eigen::Vector3d recover_ordinal_classes(double p1, double p2) {
  return {1.0 - p1, p1 - p2, p2};
}

double ordinal_delta(const ModelParams& params) {
  if (params.task != Task::Ordinal3) throw std::invalid_argument("ordinal_delta: wrong task");
  return std::exp(params.head[1]);
}

OrdinalPrediction forward_ordinal(const Vector& x_emb, std::span<const int> S,
                                  const ModelParams& params) {
  if (params.task != Task::Ordinal3) throw std::invalid_argument("forward_ordinal: wrong task");
  const double g = trunk_logit(x_emb, S, params);
  const double bias1 = params.head[0];
  const double bias2 = bias1 - std::exp(params.head[1]);
  OrdinalPrediction pred;
  pred.p1 = sigmoid(g + bias1);
  pred.p2 = sigmoid(g + bias2);
  pred.classes = recover_ordinal_classes(pred.p1, pred.p2);
  return pred;
}

double cluster_temperature(std::span<const int> S, const ModelParams& params) {
  if (S.empty()) return 1.0;
  double t = 0.0;
  for (int c : S) {
    if (c < 0 || c >= params.dims.k) {
      throw std::out_of_range("cluster index " + std::to_string(c) + " out of range");
    }
    t += std::exp(params.log_temps[c]);
  }
  return t / static_cast<double>(S.size());
}

double forward_preference(const Vector& x_emb_a, const Vector& x_emb_b, std::span<const int> S,
                          const ModelParams& params) {
  if (params.task != Task::Preference) {
    throw std::invalid_argument("forward_preference: wrong task");
  }
  const double ra = trunk_logit(x_emb_a, S, params);
  const double rb = trunk_logit(x_emb_b, S, params);
  return sigmoid((ra - rb) / cluster_temperature(S, params));
}

TrunkCache trunk_forward(const Matrix& fused, const ModelParams& params) {
  TrunkCache cache;
  cache.z = fused;
  cache.u = ((fused * params.w1.transpose()).rowwise() + params.c1.transpose()).array().tanh();
  cache.g = cache.u * params.w2;
  return cache;
}

Matrix trunk_backward(const TrunkCache& cache, const Vector& dg, const ModelParams& params,
                      Matrix& dw1, Vector& dc1, Vector& dw2) {
  dw2.noalias() += cache.u.transpose() * dg;
  const Matrix da =
      (dg * params.w2.transpose()).array() * (1.0 - cache.u.array().square());
  dw1.noalias() += da.transpose() * cache.z;
  dc1.noalias() += da.colwise().sum().transpose();
  return da * params.w1;
}

Matrix fuse_inputs(const Matrix& x, const std::vector<std::vector<int>>& groups,
                   const ModelParams& params) {
  if (static_cast<size_t>(x.rows()) != groups.size()) {
    throw std::invalid_argument("fuse_inputs: row/group count mismatch");
  }
  Matrix fused = x;
  for (Eigen::Index r = 0; r < fused.rows(); ++r) {
    for (int c : groups[r]) {
      if (c < 0 || c >= params.dims.k) {
        throw std::out_of_range("cluster index " + std::to_string(c) + " out of range");
      }
      fused.row(r) += params.value_table.row(c);
    }
  }
  return fused;
}

namespace {

json matrix_rows(const Matrix& m) {
  json rows = json::array();
  for (int r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (int c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix rows_to_matrix(const json& rows, int expect_rows, int expect_cols, const char* name) {
  Matrix m(expect_rows, expect_cols);
  if (static_cast<int>(rows.size()) != expect_rows) {
    throw std::runtime_error(std::string("checkpoint: bad row count for ") + name);
  }
  for (int r = 0; r < expect_rows; ++r) {
    if (static_cast<int>(rows[r].size()) != expect_cols) {
      throw std::runtime_error(std::string("checkpoint: bad column count for ") + name);
    }
    for (int c = 0; c < expect_cols; ++c) m(r, c) = rows[r][c].get<double>();
  }
  return m;
}

Vector json_vec(const json& arr, int expect, const char* name) {
  if (static_cast<int>(arr.size()) != expect) {
    throw std::runtime_error(std::string("checkpoint: bad length for ") + name);
  }
  Vector v(expect);
  for (int i = 0; i < expect; ++i) v[i] = arr[i].get<double>();
  return v;
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::string& path) {
  json j;
  j["format_version"] = 1;
  j["kind"] = "checkpoint";
  j["task"] = task_name(params.task);
  j["dims"] = {{"d", params.dims.d}, {"h", params.dims.h}, {"k", params.dims.k}};
  j["cluster_ids"] = params.cluster_ids;
  j["w1"] = matrix_rows(params.w1);
  j["c1"] = std::vector<double>(params.c1.begin(), params.c1.end());
  j["w2"] = std::vector<double>(params.w2.begin(), params.w2.end());
  if (params.dims.k > 0) j["value_table"] = matrix_rows(params.value_table);
  switch (params.task) {
    case Task::Binary:
      j["head"] = {{"b", params.head[0]}};
      break;
    case Task::Ordinal3:
      j["head"] = {{"b1", params.head[0]}, {"log_delta", params.head[1]}};
      break;
    case Task::Preference:
      if (params.dims.k > 0) {
        j["log_temps"] = std::vector<double>(params.log_temps.begin(), params.log_temps.end());
      }
      break;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out << j.dump(2) << '\n';
}

ModelParams load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path + ": malformed checkpoint: " + e.what());
  }
  if (!j.contains("kind") || j["kind"] != "checkpoint") {
    throw std::runtime_error(path + ": not a checkpoint file");
  }

  ModelParams p;
  p.task = parse_task(j.at("task").get<std::string>());
  p.dims.d = j.at("dims").at("d").get<int>();
  p.dims.h = j.at("dims").at("h").get<int>();
  p.dims.k = j.at("dims").at("k").get<int>();
  p.cluster_ids = j.at("cluster_ids").get<std::vector<std::string>>();
  p.w1 = rows_to_matrix(j.at("w1"), p.dims.h, p.dims.d, "w1");
  p.c1 = json_vec(j.at("c1"), p.dims.h, "c1");
  p.w2 = json_vec(j.at("w2"), p.dims.h, "w2");
  p.value_table = p.dims.k > 0 ? rows_to_matrix(j.at("value_table"), p.dims.k, p.dims.d,
                                                "value_table")
                               : Matrix(0, p.dims.d);
  switch (p.task) {
    case Task::Binary:
      p.head = Vector::Constant(1, j.at("head").at("b").get<double>());
      break;
    case Task::Ordinal3:
      p.head = Vector(2);
      p.head[0] = j.at("head").at("b1").get<double>();
      p.head[1] = j.at("head").at("log_delta").get<double>();
      break;
    case Task::Preference:
      p.log_temps = p.dims.k > 0 ? json_vec(j.at("log_temps"), p.dims.k, "log_temps") : Vector();
      break;
  }
  return p;
}

}  // namespace mcstl
