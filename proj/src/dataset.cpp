#include "mcstl/dataset.hpp"

#include "mcstl/featurize.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <unordered_map>

namespace mcstl {

using nlohmann::json;

namespace {

[[noreturn]] void line_error(size_t line, const std::string& what) {
  throw std::runtime_error("line " + std::to_string(line) + ": " + what);
}

Vector json_to_vector(const json& arr, size_t line, const char* field) {
  if (!arr.is_array()) line_error(line, std::string(field) + " must be a float array");
  Vector v(arr.size());
  for (size_t i = 0; i < arr.size(); ++i) {
    if (!arr[i].is_number()) line_error(line, std::string(field) + " must be a float array");
    v[static_cast<Eigen::Index>(i)] = arr[i].get<double>();
  }
  return v;
}

json vector_to_json(const Vector& v) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
  return arr;
}

// Resolves the (embedding | text) pair for one record side.
Vector resolve_side(const json& j, const char* emb_key, const char* text_key,
                    size_t line, const LoadOptions& opts) {
  const bool has_emb = j.contains(emb_key);
  const bool has_text = j.contains(text_key);
  if (has_emb == has_text) {
    line_error(line, std::string("record needs exactly one of '") + emb_key + "' or '" +
                         text_key + "'");
  }
  if (has_emb) return json_to_vector(j[emb_key], line, emb_key);
  if (!j[text_key].is_string()) line_error(line, std::string(text_key) + " must be a string");
  return text_embedding(j[text_key].get<std::string>(), opts.text_dim);
}

}  // namespace

std::vector<int> Dataset::item_labels(int i) const {
  std::vector<int> out;
  out.reserve(item_records[i].size());
  for (int r : item_records[i]) out.push_back(records[r].label);
  return out;
}

void finalize_dataset(Dataset& ds) {
  ds.item_ids.clear();
  ds.item_records.clear();
  ds.embed_dim = -1;
  ds.rationale_dim = -1;

  std::unordered_map<std::string, int> item_index;
  const int lmax = label_count(ds.task) - 1;

  for (size_t r = 0; r < ds.records.size(); ++r) {
    const AnnotationRecord& rec = ds.records[r];
    if (rec.item_id.empty()) throw std::runtime_error("record " + std::to_string(r) + ": empty item_id");
    if (rec.label < 0 || rec.label > lmax) {
      throw std::runtime_error("record " + std::to_string(r) + ": label out of range for task " +
                               task_name(ds.task));
    }
    if (rec.embedding.size() == 0) {
      throw std::runtime_error("record " + std::to_string(r) + ": missing item embedding");
    }
    if (ds.embed_dim < 0) ds.embed_dim = static_cast<int>(rec.embedding.size());
    if (rec.embedding.size() != ds.embed_dim) {
      throw std::runtime_error("record " + std::to_string(r) + ": inconsistent embedding dimension");
    }
    if (ds.task == Task::Preference) {
      if (rec.embedding_b.size() == 0) {
        throw std::runtime_error("record " + std::to_string(r) +
                                 ": preference record missing second item");
      }
      if (rec.embedding_b.size() != ds.embed_dim) {
        throw std::runtime_error("record " + std::to_string(r) +
                                 ": inconsistent embedding dimension");
      }
    } else if (rec.embedding_b.size() != 0) {
      throw std::runtime_error("record " + std::to_string(r) +
                               ": unexpected second item for task " + task_name(ds.task));
    }
    if (rec.rationale_embedding.size() != 0) {
      if (ds.rationale_dim < 0) ds.rationale_dim = static_cast<int>(rec.rationale_embedding.size());
      if (rec.rationale_embedding.size() != ds.rationale_dim) {
        throw std::runtime_error("record " + std::to_string(r) +
                                 ": inconsistent rationale embedding dimension");
      }
    }

    auto [it, inserted] = item_index.try_emplace(rec.item_id, static_cast<int>(ds.item_ids.size()));
    if (inserted) {
      ds.item_ids.push_back(rec.item_id);
      ds.item_records.emplace_back();
    }
    ds.item_records[it->second].push_back(static_cast<int>(r));
  }
}

Dataset read_dataset(std::istream& in, Task task, const LoadOptions& opts) {
  Dataset ds;
  ds.task = task;
  const int lmax = label_count(task) - 1;

  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;

    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      line_error(lineno, std::string("malformed record: ") + e.what());
    }
    if (!j.is_object()) line_error(lineno, "record must be an object");

    AnnotationRecord rec;
    if (!j.contains("item_id") || !j["item_id"].is_string()) {
      line_error(lineno, "missing string field 'item_id'");
    }
    rec.item_id = j["item_id"].get<std::string>();
    if (!j.contains("label") || !j["label"].is_number_integer()) {
      line_error(lineno, "missing integer field 'label'");
    }
    rec.label = j["label"].get<int>();
    if (rec.label < 0 || rec.label > lmax) {
      line_error(lineno, "label out of range for task " + task_name(task));
    }

    rec.embedding = resolve_side(j, "embedding", "text", lineno, opts);
    if (task == Task::Preference) {
      if (!j.contains("embedding_b") && !j.contains("text_b")) {
        line_error(lineno, "preference record missing second item");
      }
      rec.embedding_b = resolve_side(j, "embedding_b", "text_b", lineno, opts);
    } else if (j.contains("embedding_b") || j.contains("text_b")) {
      line_error(lineno, "unexpected second item for task " + task_name(task));
    }

    if (j.contains("rationale_embedding")) {
      rec.rationale_embedding =
          json_to_vector(j["rationale_embedding"], lineno, "rationale_embedding");
    }
    if (j.contains("clusters")) {
      if (!j["clusters"].is_array()) line_error(lineno, "clusters must be a string array");
      std::vector<std::string> cs;
      for (const auto& c : j["clusters"]) {
        if (!c.is_string()) line_error(lineno, "clusters must be a string array");
        cs.push_back(c.get<std::string>());
      }
      rec.clusters = std::move(cs);
    }
    if (j.contains("attributes")) {
      if (!j["attributes"].is_object()) line_error(lineno, "attributes must be an object");
      std::map<std::string, std::string> attrs;
      for (auto it = j["attributes"].begin(); it != j["attributes"].end(); ++it) {
        if (!it.value().is_string()) line_error(lineno, "attribute values must be strings");
        attrs[it.key()] = it.value().get<std::string>();
      }
      rec.attributes = std::move(attrs);
    }
    ds.records.push_back(std::move(rec));
  }

  finalize_dataset(ds);
  return ds;
}

Dataset load_dataset(const std::string& path, Task task, const LoadOptions& opts) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset file: " + path);
  try {
    return read_dataset(in, task, opts);
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

void write_dataset(const Dataset& ds, std::ostream& out) {
  for (const AnnotationRecord& rec : ds.records) {
    json j;
    j["item_id"] = rec.item_id;
    j["label"] = rec.label;
    j["embedding"] = vector_to_json(rec.embedding);
    if (rec.embedding_b.size() != 0) j["embedding_b"] = vector_to_json(rec.embedding_b);
    if (rec.rationale_embedding.size() != 0) {
      j["rationale_embedding"] = vector_to_json(rec.rationale_embedding);
    }
    if (rec.clusters) j["clusters"] = *rec.clusters;
    if (rec.attributes) j["attributes"] = *rec.attributes;
    out << j.dump() << '\n';
  }
}

void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write dataset file: " + path);
  write_dataset(ds, out);
}

std::optional<int> majority_label(std::span<const int> labels) {
  if (labels.empty()) throw std::invalid_argument("majority_label: empty label list");
  std::map<int, int> counts;
  for (int l : labels) ++counts[l];
  int best = -1, best_count = -1;
  bool tied = false;
  for (const auto& [label, count] : counts) {
    if (count > best_count) {
      best = label;
      best_count = count;
      tied = false;
    } else if (count == best_count) {
      tied = true;
    }
  }
  if (tied) return std::nullopt;
  return best;
}

Dataset majority_filter(const Dataset& ds) {
  // Per item: nullopt marks a tied majority, which drops the whole item.
  std::unordered_map<std::string, std::optional<int>> maj;
  maj.reserve(ds.item_ids.size());
  for (int i = 0; i < ds.item_count(); ++i) {
    const auto labels = ds.item_labels(i);
    maj[ds.item_ids[i]] = majority_label(labels);
  }

  Dataset out;
  out.task = ds.task;
  for (const AnnotationRecord& rec : ds.records) {
    const auto& m = maj.at(rec.item_id);
    if (m && rec.label == *m) out.records.push_back(rec);
  }
  finalize_dataset(out);
  return out;
}

std::pair<Dataset, Dataset> stratified_split(const Dataset& ds, double test_fraction,
                                             uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw std::invalid_argument("stratified_split: test_fraction must be in (0, 1)");
  }
  const int n_items = ds.item_count();

  // Strata keyed by each item's majority label; ties get key -1.
  std::map<int, std::vector<int>> strata;
  for (int i = 0; i < n_items; ++i) {
    const auto labels = ds.item_labels(i);
    const auto m = majority_label(labels);
    strata[m ? *m : -1].push_back(i);
  }
  for (const auto& [key, items] : strata) {
    if (items.size() < 2) {
      const std::string name = key < 0 ? "tie" : std::to_string(key);
      throw std::runtime_error("stratified_split: stratum '" + name + "' has " +
                               std::to_string(items.size()) +
                               " item(s); need at least 2 to split");
    }
  }

  const long target = std::lround(test_fraction * n_items);

  // Largest-remainder allocation of the test quota across strata.
  struct Alloc {
    int key;
    long base;
    double remainder;
  };
  std::vector<Alloc> allocs;
  long base_total = 0;
  for (const auto& [key, items] : strata) {
    const double quota = test_fraction * static_cast<double>(items.size());
    const long base = static_cast<long>(std::floor(quota));
    allocs.push_back({key, base, quota - static_cast<double>(base)});
    base_total += base;
  }
  long leftover = target - base_total;
  std::stable_sort(allocs.begin(), allocs.end(),
                   [](const Alloc& a, const Alloc& b) { return a.remainder > b.remainder; });
  std::map<int, long> test_counts;
  for (const Alloc& a : allocs) test_counts[a.key] = a.base;
  for (const Alloc& a : allocs) {
    if (leftover <= 0) break;
    if (a.base + 1 <= static_cast<long>(strata[a.key].size())) {
      ++test_counts[a.key];
      --leftover;
    }
  }

  std::mt19937_64 rng(seed);
  std::vector<char> in_test(n_items, 0);
  for (auto& [key, items] : strata) {
    std::shuffle(items.begin(), items.end(), rng);
    const long take = test_counts[key];
    for (long i = 0; i < take; ++i) in_test[items[i]] = 1;
  }

  std::unordered_map<std::string, char> item_side;
  item_side.reserve(n_items);
  for (int i = 0; i < n_items; ++i) item_side[ds.item_ids[i]] = in_test[i];

  Dataset train, test;
  train.task = ds.task;
  test.task = ds.task;
  for (const AnnotationRecord& rec : ds.records) {
    (item_side.at(rec.item_id) ? test : train).records.push_back(rec);
  }
  finalize_dataset(train);
  finalize_dataset(test);
  return {std::move(train), std::move(test)};
}

}  // namespace mcstl
