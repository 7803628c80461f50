#pragma once

#include "mcstl/dataset.hpp"
#include "mcstl/types.hpp"

#include <string>
#include <vector>

namespace mcstl {

enum class ClusterMode { RationaleKMeans, Taxonomy, Sociocultural };

std::string cluster_mode_name(ClusterMode m);
ClusterMode parse_cluster_mode(std::string_view s);

/// Per-cluster training statistics consumed by the multicalibration loss.
/// `ybar` and the global rates carry one column per binary sub-task
/// (1 for binary/preference, 2 for ordinal).
struct ClusterStats {
  std::vector<long> n;        // annotations per cluster
  Matrix label_counts;        // K x L histogram
  Matrix ybar;                // K x subtasks, cluster label means
  Vector alpha;               // K, KL weight vs the global label rate
  Vector global_rate;         // subtasks
  std::vector<int> empty_clusters;

  bool ready() const { return !n.empty(); }
};

struct ClusterModel {
  ClusterMode mode = ClusterMode::RationaleKMeans;
  Task task = Task::Binary;
  int k = 0;
  std::vector<std::string> cluster_ids;
  Matrix centroids;  // K x d_r, rationale mode only (0x0 otherwise)
  ClusterStats stats;
};

/// Per-annotation set S_ij of cluster indices, parallel to Dataset::records.
using ClusterAssignment = std::vector<std::vector<int>>;

struct KMeansOptions {
  int max_iters = 300;
  double tol = 1e-6;
};

struct KMeansTrace {
  std::vector<double> sse;  // within-cluster SSE after each assignment step
  std::vector<int> labels;  // final assignment of the input points
  int iterations = 0;
};

/// Lloyd's algorithm with k-means++ seeding over the rows of `points`.
/// Deterministic in `seed`; empty clusters are re-seeded from the point
/// farthest from its centroid. Stops when the max centroid shift < tol.
Matrix kmeans_lloyd(const Matrix& points, int k, uint64_t seed,
                    const KMeansOptions& opts = {}, KMeansTrace* trace = nullptr);

/// Fits a rationale-mode ClusterModel (cluster ids "c0".."c{K-1}"); stats are
/// filled later by compute_stats once assignments exist.
ClusterModel kmeans_fit(const Matrix& embeddings, int k, uint64_t seed,
                        const KMeansOptions& opts = {}, KMeansTrace* trace = nullptr);

double kmeans_sse(const Matrix& points, const Matrix& centroids);

/// Mean silhouette coefficient; points beyond `sample_cap` are subsampled
/// deterministically. Singleton-cluster points score 0.
double silhouette_score(const Matrix& points, const std::vector<int>& labels, int k,
                        uint64_t seed = 0, int sample_cap = 2000);

/// Index of the nearest centroid (Euclidean); ties break to the lowest index.
int assign_rationale(const Vector& embedding, const ClusterModel& model);

/// Taxonomy mode: the record's declared cluster set. Sociocultural mode: one
/// cluster per "key=value" annotator attribute. Mixed membership allowed.
std::vector<int> assign_categorical(const AnnotationRecord& record, const ClusterModel& model);

/// Collects the cluster universe of a categorical mode from a training set.
ClusterModel build_categorical_model(const Dataset& ds, ClusterMode mode);

/// Mode-dispatching assignment of every record in `ds`.
ClusterAssignment assign_dataset(const Dataset& ds, const ClusterModel& model);

/// Fills model.stats from a fully assigned training set: n_k, label counts,
/// per-sub-task cluster means, and the alpha_k KL weights (per-annotation
/// Bernoulli KL against the global rate, summed over sub-tasks, clamped to
/// [0, alpha_max]).
void compute_stats(const Dataset& train, const ClusterAssignment& assignments,
                   ClusterModel& model, double eps = 1e-6, double alpha_max = 10.0);

void save_cluster_model(const ClusterModel& model, const std::string& path);
ClusterModel load_cluster_model(const std::string& path);

}  // namespace mcstl
