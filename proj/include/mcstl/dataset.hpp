#pragma once

#include "mcstl/types.hpp"

#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mcstl {

/// One annotation: an item (as its embedding), a label, and the optional
/// value-grouping evidence attached to it. Preference records carry a second
/// item side in `embedding_b` and label 1 means side A is preferred.
inline bool vector_equal(const Vector& a, const Vector& b) {
  return a.size() == b.size() && (a.size() == 0 || (a.array() == b.array()).all());
}

struct AnnotationRecord {
  std::string item_id;
  int label = 0;
  Vector embedding;                                   // size d
  Vector embedding_b;                                 // size d, preference only
  Vector rationale_embedding;                         // size d_r, optional (size 0)
  std::optional<std::vector<std::string>> clusters;   // taxonomy membership
  std::optional<std::map<std::string, std::string>> attributes;  // sociocultural

  bool operator==(const AnnotationRecord& o) const {
    return item_id == o.item_id && label == o.label &&
           vector_equal(embedding, o.embedding) &&
           vector_equal(embedding_b, o.embedding_b) &&
           vector_equal(rationale_embedding, o.rationale_embedding) &&
           clusters == o.clusters && attributes == o.attributes;
  }
};

struct Dataset {
  Task task = Task::Binary;
  std::vector<AnnotationRecord> records;

  // Item grouping, first-appearance order. item_records[i] indexes `records`.
  std::vector<std::string> item_ids;
  std::vector<std::vector<int>> item_records;

  int embed_dim = -1;
  int rationale_dim = -1;  // -1 when no record carries a rationale embedding

  int item_count() const { return static_cast<int>(item_ids.size()); }
  int record_count() const { return static_cast<int>(records.size()); }

  /// Labels of all annotations of item `i`, in record order.
  std::vector<int> item_labels(int i) const;

  bool operator==(const Dataset& o) const {
    return task == o.task && records == o.records;
  }
};

struct LoadOptions {
  int text_dim = 64;  // featurizer dimension for raw-text records
};

/// Rebuilds the item grouping and checks every dataset invariant (label
/// ranges, consistent dimensions, one embedding source per side). Throws
/// std::runtime_error with a descriptive message on the first violation.
void finalize_dataset(Dataset& ds);

Dataset load_dataset(const std::string& path, Task task, const LoadOptions& opts = {});
Dataset read_dataset(std::istream& in, Task task, const LoadOptions& opts = {});

void save_dataset(const Dataset& ds, const std::string& path);
void write_dataset(const Dataset& ds, std::ostream& out);

/// Modal label, or nullopt when two or more labels share the maximal count.
std::optional<int> majority_label(std::span<const int> labels);

/// Maj(Y) baseline filter: per item keep only annotations equal to the
/// majority label; items with a tied majority are dropped entirely.
Dataset majority_filter(const Dataset& ds);

/// Item-level split stratified by each item's majority label (ties form
/// their own stratum). Test side gets round(test_fraction * N) items, with
/// per-stratum counts allocated by largest remainder. Deterministic in seed.
std::pair<Dataset, Dataset> stratified_split(const Dataset& ds, double test_fraction,
                                             uint64_t seed);

}  // namespace mcstl
