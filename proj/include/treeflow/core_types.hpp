#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "treeflow/errors.hpp"
#include "treeflow/rng.hpp"

namespace treeflow {

using json = nlohmann::json;

struct Predicate {
  int id = -1;
  std::string name;
};

// The event-type alphabet. Ids are dense 0..N-1 in declaration order; names
// are the canonical identity in files.
struct Vocabulary {
  std::vector<Predicate> predicates;
  std::vector<int> targets;  // sorted, subset of predicate ids

  int size() const { return static_cast<int>(predicates.size()); }

  bool is_target(int id) const {
    return std::binary_search(targets.begin(), targets.end(), id);
  }

  const std::string& name(int id) const { return predicates.at(id).name; }

  int id_of(const std::string& name) const {
    for (const auto& p : predicates)
      if (p.name == name) return p.id;
    return -1;
  }

  static Vocabulary from_names(const std::vector<std::string>& names,
                               std::vector<int> targets) {
    Vocabulary v;
    for (std::size_t i = 0; i < names.size(); ++i)
      v.predicates.push_back({static_cast<int>(i), names[i]});
    std::sort(targets.begin(), targets.end());
    v.targets = std::move(targets);
    return v;
  }
};

struct Event {
  double time = 0.0;
  int type = -1;

  friend bool operator==(const Event&, const Event&) = default;
};

enum class Split { none, train, dev, test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::dev: return "dev";
    case Split::test: return "test";
    default: return "none";
  }
}

// One observation: events over [0, horizon], plus the held-out next event
// type. Events are kept sorted by time.
struct EventSequence {
  std::vector<Event> events;
  double horizon = 0.0;
  int label = -1;
  Split split = Split::none;

  std::size_t size() const { return events.size(); }
};

struct Dataset {
  Vocabulary vocabulary;
  std::vector<EventSequence> sequences;

  std::vector<std::size_t> indices_of(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < sequences.size(); ++i)
      if (sequences[i].split == s) out.push_back(i);
    return out;
  }

  bool has_split_tags() const {
    return std::any_of(sequences.begin(), sequences.end(),
                       [](const EventSequence& s) { return s.split != Split::none; });
  }
};

namespace detail {

inline Split parse_split(const json& j, const std::string& where) {
  if (j.is_null()) return Split::none;
  const std::string s = j.get<std::string>();
  if (s == "train") return Split::train;
  if (s == "dev") return Split::dev;
  if (s == "test") return Split::test;
  throw DataError("bad-split", where, "expected train|dev|test|null, got '" + s + "'");
}

}  // namespace detail

// Parses a dataset document. Ids are reassigned densely by vocabulary order;
// event type references are remapped through the file's declared ids.
// Out-of-order events are sorted with a warning appended to `warnings`.
inline Dataset dataset_from_json(const json& doc,
                                 std::vector<std::string>* warnings = nullptr) {
  Dataset ds;
  if (!doc.is_object() || !doc.contains("vocabulary") || !doc.contains("sequences") ||
      !doc.contains("targets"))
    throw DataError("parse", "$", "document must have vocabulary, targets, sequences");

  std::unordered_map<long long, int> file_id_to_dense;
  std::unordered_map<std::string, int> seen_names;
  for (std::size_t i = 0; i < doc["vocabulary"].size(); ++i) {
    const auto& entry = doc["vocabulary"][i];
    const std::string where = "vocabulary[" + std::to_string(i) + "]";
    const std::string name = entry.at("name").get<std::string>();
    if (name.empty()) throw DataError("bad-predicate", where, "empty name");
    if (seen_names.count(name))
      throw DataError("bad-predicate", where, "duplicate name '" + name + "'");
    const long long file_id = entry.at("id").get<long long>();
    if (file_id_to_dense.count(file_id))
      throw DataError("bad-predicate", where, "duplicate id " + std::to_string(file_id));
    const int dense = static_cast<int>(ds.vocabulary.predicates.size());
    seen_names[name] = dense;
    file_id_to_dense[file_id] = dense;
    ds.vocabulary.predicates.push_back({dense, name});
  }
  if (ds.vocabulary.predicates.empty())
    throw DataError("bad-predicate", "vocabulary", "vocabulary is empty");

  auto map_type = [&](long long file_id, const std::string& where) {
    auto it = file_id_to_dense.find(file_id);
    if (it == file_id_to_dense.end())
      throw DataError("unknown-predicate", where,
                      "no vocabulary entry with id " + std::to_string(file_id));
    return it->second;
  };

  for (std::size_t i = 0; i < doc["targets"].size(); ++i)
    ds.vocabulary.targets.push_back(
        map_type(doc["targets"][i].get<long long>(), "targets[" + std::to_string(i) + "]"));
  std::sort(ds.vocabulary.targets.begin(), ds.vocabulary.targets.end());
  ds.vocabulary.targets.erase(
      std::unique(ds.vocabulary.targets.begin(), ds.vocabulary.targets.end()),
      ds.vocabulary.targets.end());
  if (ds.vocabulary.targets.empty())
    throw DataError("bad-targets", "targets", "at least one target predicate required");

  for (std::size_t i = 0; i < doc["sequences"].size(); ++i) {
    const auto& js = doc["sequences"][i];
    const std::string where = "sequences[" + std::to_string(i) + "]";
    EventSequence seq;
    for (std::size_t k = 0; k < js.at("events").size(); ++k) {
      const auto& je = js["events"][k];
      const std::string ewhere = where + ".events[" + std::to_string(k) + "]";
      Event e;
      e.time = je.at("t").get<double>();
      if (e.time < 0.0 || !std::isfinite(e.time))
        throw DataError("negative-time", ewhere, "event time must be finite and >= 0");
      e.type = map_type(je.at("type").get<long long>(), ewhere);
      seq.events.push_back(e);
    }
    if (!std::is_sorted(seq.events.begin(), seq.events.end(),
                        [](const Event& a, const Event& b) { return a.time < b.time; })) {
      std::stable_sort(seq.events.begin(), seq.events.end(),
                       [](const Event& a, const Event& b) { return a.time < b.time; });
      if (warnings) warnings->push_back(where + ": events out of order, re-sorted");
    }
    seq.horizon = js.at("horizon").get<double>();
    if (!seq.events.empty() && seq.horizon < seq.events.back().time)
      throw DataError("bad-horizon", where, "horizon precedes last event");
    seq.label = map_type(js.at("label").get<long long>(), where + ".label");
    if (!ds.vocabulary.is_target(seq.label))
      throw DataError("label-not-target", where + ".label",
                      "label '" + ds.vocabulary.name(seq.label) + "' is not a target");
    seq.split = js.contains("split") ? detail::parse_split(js["split"], where + ".split")
                                     : Split::none;
    ds.sequences.push_back(std::move(seq));
  }
  return ds;
}

inline json dataset_to_json(const Dataset& ds) {
  json doc;
  doc["vocabulary"] = json::array();
  for (const auto& p : ds.vocabulary.predicates)
    doc["vocabulary"].push_back({{"id", p.id}, {"name", p.name}});
  doc["targets"] = ds.vocabulary.targets;
  doc["sequences"] = json::array();
  for (const auto& seq : ds.sequences) {
    json js;
    js["events"] = json::array();
    for (const auto& e : seq.events) js["events"].push_back({{"t", e.time}, {"type", e.type}});
    js["horizon"] = seq.horizon;
    js["label"] = seq.label;
    js["split"] = seq.split == Split::none ? json() : json(to_string(seq.split));
    doc["sequences"].push_back(std::move(js));
  }
  return doc;
}

inline Dataset load_dataset(const std::string& path,
                            std::vector<std::string>* warnings = nullptr) {
  std::ifstream in(path);
  if (!in) throw DataError("io", path, "cannot open file");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError("parse", path + ":byte " + std::to_string(e.byte), e.what());
  }
  return dataset_from_json(doc, warnings);
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("io", path, "cannot open file for writing");
  out << dataset_to_json(ds).dump(1) << "\n";
}

// Deterministic 80/10/10 assignment: a pure function of (dataset size, seed).
inline Dataset split_dataset(Dataset ds, std::uint64_t seed) {
  const std::size_t n = ds.sequences.size();
  if (n < 10) throw DataError("too-few-sequences", "dataset",
                              "need >= 10 sequences to split, got " + std::to_string(n));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(Rng::mix(seed, 0x5eed));
  for (std::size_t i = n - 1; i > 0; --i)
    std::swap(order[i], order[rng.uniform_index(i + 1)]);
  const auto n_train = static_cast<std::size_t>(std::lround(0.8 * static_cast<double>(n)));
  auto n_dev = static_cast<std::size_t>(std::lround(0.1 * static_cast<double>(n)));
  n_dev = std::min(n_dev, n - n_train);
  for (std::size_t i = 0; i < n; ++i) {
    Split s = i < n_train ? Split::train : (i < n_train + n_dev ? Split::dev : Split::test);
    ds.sequences[order[i]].split = s;
  }
  return ds;
}

// Per-type event counts of X normalized by sequence length; the policy's
// conditioning summary.
inline std::vector<double> normalized_type_counts(const EventSequence& seq, int n_types) {
  std::vector<double> counts(static_cast<std::size_t>(n_types), 0.0);
  for (const auto& e : seq.events) counts[static_cast<std::size_t>(e.type)] += 1.0;
  const double denom = std::max<std::size_t>(seq.events.size(), 1);
  for (double& c : counts) c /= static_cast<double>(denom);
  return counts;
}

}  // namespace treeflow
