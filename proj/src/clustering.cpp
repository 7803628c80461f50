#include "mcstl/clustering.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <unordered_map>

namespace mcstl {

using nlohmann::json;

std::string cluster_mode_name(ClusterMode m) {
  switch (m) {
    case ClusterMode::RationaleKMeans: return "rationale_kmeans";
    case ClusterMode::Taxonomy: return "taxonomy";
    case ClusterMode::Sociocultural: return "sociocultural";
  }
  throw std::logic_error("unknown cluster mode");
}

ClusterMode parse_cluster_mode(std::string_view s) {
  if (s == "rationale" || s == "rationale_kmeans") return ClusterMode::RationaleKMeans;
  if (s == "taxonomy") return ClusterMode::Taxonomy;
  if (s == "sociocultural") return ClusterMode::Sociocultural;
  throw std::invalid_argument("unknown cluster mode '" + std::string(s) + "'");
}

namespace {

int nearest_centroid(const Matrix& centroids, const Eigen::Ref<const Eigen::RowVectorXd>& p) {
  int best = 0;
  double best_d = (centroids.row(0) - p).squaredNorm();
  for (int c = 1; c < centroids.rows(); ++c) {
    const double d = (centroids.row(c) - p).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

long count_distinct_rows(const Matrix& points) {
  std::set<std::vector<double>> seen;
  for (int i = 0; i < points.rows(); ++i) {
    std::vector<double> row(points.row(i).begin(), points.row(i).end());
    seen.insert(std::move(row));
  }
  return static_cast<long>(seen.size());
}

}  // namespace

Matrix kmeans_lloyd(const Matrix& points, int k, uint64_t seed, const KMeansOptions& opts,
                    KMeansTrace* trace) {
  const int n = static_cast<int>(points.rows());
  const int d = static_cast<int>(points.cols());
  if (n == 0 || d == 0) throw std::invalid_argument("kmeans: zero-length embeddings");
  if (k < 1) throw std::invalid_argument("kmeans: K must be >= 1");
  if (opts.max_iters < 1) throw std::invalid_argument("kmeans: max_iters must be >= 1");
  if (k > count_distinct_rows(points)) {
    throw std::invalid_argument("kmeans: K exceeds the number of distinct points");
  }

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // k-means++ seeding.
  Matrix centroids(k, d);
  {
    std::uniform_int_distribution<int> first(0, n - 1);
    centroids.row(0) = points.row(first(rng));
    Vector d2(n);
    for (int i = 0; i < n; ++i) d2[i] = (points.row(i) - centroids.row(0)).squaredNorm();
    for (int c = 1; c < k; ++c) {
      const double total = d2.sum();
      int pick = 0;
      if (total > 0.0) {
        const double r = unit(rng) * total;
        double acc = 0.0;
        pick = n - 1;
        for (int i = 0; i < n; ++i) {
          acc += d2[i];
          if (acc >= r) {
            pick = i;
            break;
          }
        }
      } else {
        // all remaining mass zero: fall back to an unused distinct point
        std::uniform_int_distribution<int> any(0, n - 1);
        pick = any(rng);
      }
      centroids.row(c) = points.row(pick);
      for (int i = 0; i < n; ++i) {
        d2[i] = std::min(d2[i], (points.row(i) - centroids.row(c)).squaredNorm());
      }
    }
  }

  std::vector<int> labels(n, 0);
  if (trace) {
    trace->sse.clear();
    trace->iterations = 0;
  }

  int iter = 0;
  for (; iter < opts.max_iters; ++iter) {
    // Assignment step.
    double sse = 0.0;
    for (int i = 0; i < n; ++i) {
      labels[i] = nearest_centroid(centroids, points.row(i));
      sse += (points.row(i) - centroids.row(labels[i])).squaredNorm();
    }
    if (trace) trace->sse.push_back(sse);

    // Update step.
    Matrix next = Matrix::Zero(k, d);
    std::vector<long> counts(k, 0);
    for (int i = 0; i < n; ++i) {
      next.row(labels[i]) += points.row(i);
      ++counts[labels[i]];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        next.row(c) /= static_cast<double>(counts[c]);
      } else {
        // Re-seed an empty cluster from the point farthest from its centroid.
        int far = 0;
        double far_d = -1.0;
        for (int i = 0; i < n; ++i) {
          const double dd = (points.row(i) - centroids.row(labels[i])).squaredNorm();
          if (dd > far_d) {
            far_d = dd;
            far = i;
          }
        }
        next.row(c) = points.row(far);
        labels[far] = c;
      }
    }

    const double shift = (next - centroids).rowwise().norm().maxCoeff();
    centroids = next;
    if (shift < opts.tol) {
      ++iter;
      break;
    }
  }

  // Final assignment against the converged centroids.
  double sse = 0.0;
  for (int i = 0; i < n; ++i) {
    labels[i] = nearest_centroid(centroids, points.row(i));
    sse += (points.row(i) - centroids.row(labels[i])).squaredNorm();
  }
  if (trace) {
    trace->sse.push_back(sse);
    trace->labels = labels;
    trace->iterations = iter;
  }
  return centroids;
}

ClusterModel kmeans_fit(const Matrix& embeddings, int k, uint64_t seed,
                        const KMeansOptions& opts, KMeansTrace* trace) {
  ClusterModel model;
  model.mode = ClusterMode::RationaleKMeans;
  model.k = k;
  model.centroids = kmeans_lloyd(embeddings, k, seed, opts, trace);
  model.cluster_ids.reserve(k);
  for (int c = 0; c < k; ++c) model.cluster_ids.push_back("c" + std::to_string(c));
  return model;
}

double kmeans_sse(const Matrix& points, const Matrix& centroids) {
  double sse = 0.0;
  for (int i = 0; i < points.rows(); ++i) {
    sse += (points.row(i) - centroids.row(nearest_centroid(centroids, points.row(i))))
               .squaredNorm();
  }
  return sse;
}

double silhouette_score(const Matrix& points, const std::vector<int>& labels, int k,
                        uint64_t seed, int sample_cap) {
  const int n = static_cast<int>(points.rows());
  if (n != static_cast<int>(labels.size())) {
    throw std::invalid_argument("silhouette: points/labels size mismatch");
  }
  if (k < 2) return 0.0;

  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (n > sample_cap) {
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(sample_cap);
    std::sort(idx.begin(), idx.end());
  }

  double total = 0.0;
  long counted = 0;
  for (int i : idx) {
    std::vector<double> dist_sum(k, 0.0);
    std::vector<long> counts(k, 0);
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      dist_sum[labels[j]] += (points.row(i) - points.row(j)).norm();
      ++counts[labels[j]];
    }
    const int li = labels[i];
    if (counts[li] == 0) {
      ++counted;  // singleton cluster contributes 0
      continue;
    }
    const double a = dist_sum[li] / static_cast<double>(counts[li]);
    double b = std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c) {
      if (c == li || counts[c] == 0) continue;
      b = std::min(b, dist_sum[c] / static_cast<double>(counts[c]));
    }
    if (std::isfinite(b)) {
      total += (b - a) / std::max(a, b);
    }
    ++counted;
  }
  return counted > 0 ? total / static_cast<double>(counted) : 0.0;
}

int assign_rationale(const Vector& embedding, const ClusterModel& model) {
  if (model.mode != ClusterMode::RationaleKMeans) {
    throw std::invalid_argument("assign_rationale: model is not rationale_kmeans");
  }
  if (embedding.size() != model.centroids.cols()) {
    throw std::invalid_argument("assign_rationale: embedding dimension mismatch");
  }
  return nearest_centroid(model.centroids, embedding.transpose());
}

std::vector<int> assign_categorical(const AnnotationRecord& record, const ClusterModel& model) {
  std::unordered_map<std::string, int> index;
  for (size_t i = 0; i < model.cluster_ids.size(); ++i) {
    index[model.cluster_ids[i]] = static_cast<int>(i);
  }

  std::vector<int> out;
  if (model.mode == ClusterMode::Taxonomy) {
    if (!record.clusters || record.clusters->empty()) {
      throw std::runtime_error("record '" + record.item_id +
                               "' has no declared clusters (taxonomy mode)");
    }
    for (const std::string& c : *record.clusters) {
      auto it = index.find(c);
      if (it == index.end()) {
        throw std::runtime_error("unknown cluster id '" + c + "'");
      }
      out.push_back(it->second);
    }
  } else if (model.mode == ClusterMode::Sociocultural) {
    if (!record.attributes || record.attributes->empty()) {
      throw std::runtime_error("record '" + record.item_id +
                               "' has no annotator attributes (sociocultural mode)");
    }
    for (const auto& [key, value] : *record.attributes) {
      const std::string id = key + "=" + value;
      auto it = index.find(id);
      if (it == index.end()) {
        throw std::runtime_error("unknown cluster id '" + id + "'");
      }
      out.push_back(it->second);
    }
  } else {
    throw std::invalid_argument("assign_categorical: model is rationale_kmeans");
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

ClusterModel build_categorical_model(const Dataset& ds, ClusterMode mode) {
  if (mode == ClusterMode::RationaleKMeans) {
    throw std::invalid_argument("build_categorical_model: use kmeans_fit for rationale mode");
  }
  std::set<std::string> ids;
  for (const AnnotationRecord& rec : ds.records) {
    if (mode == ClusterMode::Taxonomy) {
      if (!rec.clusters || rec.clusters->empty()) {
        throw std::runtime_error("record '" + rec.item_id +
                                 "' has no declared clusters (taxonomy mode)");
      }
      for (const std::string& c : *rec.clusters) ids.insert(c);
    } else {
      if (!rec.attributes || rec.attributes->empty()) {
        throw std::runtime_error("record '" + rec.item_id +
                                 "' has no annotator attributes (sociocultural mode)");
      }
      for (const auto& [key, value] : *rec.attributes) ids.insert(key + "=" + value);
    }
  }
  ClusterModel model;
  model.mode = mode;
  model.task = ds.task;
  model.cluster_ids.assign(ids.begin(), ids.end());
  model.k = static_cast<int>(model.cluster_ids.size());
  return model;
}

ClusterAssignment assign_dataset(const Dataset& ds, const ClusterModel& model) {
  ClusterAssignment out;
  out.reserve(ds.records.size());
  for (const AnnotationRecord& rec : ds.records) {
    if (model.mode == ClusterMode::RationaleKMeans) {
      if (rec.rationale_embedding.size() == 0) {
        throw std::runtime_error("record '" + rec.item_id +
                                 "' has no rationale embedding (rationale mode)");
      }
      out.push_back({assign_rationale(rec.rationale_embedding, model)});
    } else {
      out.push_back(assign_categorical(rec, model));
    }
  }
  return out;
}

void compute_stats(const Dataset& train, const ClusterAssignment& assignments,
                   ClusterModel& model, double eps, double alpha_max) {
  if (assignments.size() != train.records.size()) {
    throw std::invalid_argument("compute_stats: assignment/record count mismatch");
  }
  const int k = model.k;
  const int subtasks = subtask_count(train.task);
  const int labels = label_count(train.task);

  ClusterStats st;
  st.n.assign(k, 0);
  st.label_counts = Matrix::Zero(k, labels);
  st.ybar = Matrix::Zero(k, subtasks);
  st.alpha = Vector::Zero(k);
  st.global_rate = Vector::Zero(subtasks);

  long total = 0;
  for (size_t r = 0; r < train.records.size(); ++r) {
    const int y = train.records[r].label;
    if (assignments[r].empty()) {
      throw std::runtime_error("compute_stats: record " + std::to_string(r) + " is unassigned");
    }
    ++total;
    for (int s = 0; s < subtasks; ++s) st.global_rate[s] += subtask_label(y, s);
    for (int c : assignments[r]) {
      if (c < 0 || c >= k) throw std::runtime_error("compute_stats: cluster index out of range");
      ++st.n[c];
      st.label_counts(c, y) += 1.0;
      for (int s = 0; s < subtasks; ++s) st.ybar(c, s) += subtask_label(y, s);
    }
  }
  if (total == 0) throw std::invalid_argument("compute_stats: empty training set");
  st.global_rate /= static_cast<double>(total);

  for (int c = 0; c < k; ++c) {
    if (st.n[c] == 0) {
      st.empty_clusters.push_back(c);
      continue;  // excluded from the KL term; alpha stays 0
    }
    double alpha = 0.0;
    for (int s = 0; s < subtasks; ++s) {
      st.ybar(c, s) /= static_cast<double>(st.n[c]);
      alpha += bernoulli_kl(st.ybar(c, s), st.global_rate[s], eps);
    }
    st.alpha[c] = std::min(alpha, alpha_max);
  }
  model.task = train.task;
  model.stats = std::move(st);
}

namespace {

json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (int r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (int c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const json& rows, int expected_cols = -1) {
  if (!rows.is_array()) throw std::runtime_error("expected array of arrays");
  const int nr = static_cast<int>(rows.size());
  if (nr == 0) return Matrix(0, std::max(expected_cols, 0));
  const int nc = static_cast<int>(rows[0].size());
  Matrix m(nr, nc);
  for (int r = 0; r < nr; ++r) {
    if (static_cast<int>(rows[r].size()) != nc) {
      throw std::runtime_error("ragged matrix rows");
    }
    for (int c = 0; c < nc; ++c) m(r, c) = rows[r][c].get<double>();
  }
  return m;
}

}  // namespace

void save_cluster_model(const ClusterModel& model, const std::string& path) {
  json j;
  j["format_version"] = 1;
  j["kind"] = "cluster_model";
  j["mode"] = cluster_mode_name(model.mode);
  j["task"] = task_name(model.task);
  j["k"] = model.k;
  j["cluster_ids"] = model.cluster_ids;
  if (model.mode == ClusterMode::RationaleKMeans) {
    j["centroids"] = matrix_to_json(model.centroids);
  }
  if (model.stats.ready()) {
    json st;
    st["n"] = model.stats.n;
    st["label_counts"] = matrix_to_json(model.stats.label_counts);
    st["ybar"] = matrix_to_json(model.stats.ybar);
    st["alpha"] = std::vector<double>(model.stats.alpha.begin(), model.stats.alpha.end());
    st["global_rate"] =
        std::vector<double>(model.stats.global_rate.begin(), model.stats.global_rate.end());
    st["empty_clusters"] = model.stats.empty_clusters;
    j["stats"] = std::move(st);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write cluster model: " + path);
  out << j.dump(2) << '\n';
}

ClusterModel load_cluster_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open cluster model: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path + ": malformed cluster model: " + e.what());
  }
  if (!j.contains("kind") || j["kind"] != "cluster_model") {
    throw std::runtime_error(path + ": not a cluster model file");
  }

  ClusterModel model;
  model.mode = parse_cluster_mode(j.at("mode").get<std::string>());
  model.task = parse_task(j.at("task").get<std::string>());
  model.k = j.at("k").get<int>();
  model.cluster_ids = j.at("cluster_ids").get<std::vector<std::string>>();
  if (static_cast<int>(model.cluster_ids.size()) != model.k) {
    throw std::runtime_error(path + ": cluster_ids/k mismatch");
  }
  if (model.mode == ClusterMode::RationaleKMeans) {
    model.centroids = matrix_from_json(j.at("centroids"));
    if (model.centroids.rows() != model.k) {
      throw std::runtime_error(path + ": centroid count does not match k");
    }
  }
  if (j.contains("stats")) {
    const json& st = j["stats"];
    ClusterStats s;
    s.n = st.at("n").get<std::vector<long>>();
    s.label_counts = matrix_from_json(st.at("label_counts"));
    s.ybar = matrix_from_json(st.at("ybar"));
    const auto alpha = st.at("alpha").get<std::vector<double>>();
    s.alpha = Eigen::Map<const Vector>(alpha.data(), static_cast<Eigen::Index>(alpha.size()));
    const auto gr = st.at("global_rate").get<std::vector<double>>();
    s.global_rate = Eigen::Map<const Vector>(gr.data(), static_cast<Eigen::Index>(gr.size()));
    s.empty_clusters = st.at("empty_clusters").get<std::vector<int>>();
    model.stats = std::move(s);
  }
  return model;
}

}  // namespace mcstl
