#pragma once

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "treeflow/core_types.hpp"
#include "treeflow/errors.hpp"
#include "treeflow/tlpp.hpp"

namespace treeflow {

// Ground-truth process for synthetic data. File schema (names, not ids):
// {
//   "vocabulary": ["A", "B", ...],
//   "targets": ["A", ...],
//   "base_rates": {"A": -3.0, ...},         // log base rate per generating type
//   "rules": [{"path": ["A", "B"], "weight": 1.5}, ...],
//   "horizon": 10.0,
//   "count_transform": "identity" | "log1p"  // optional, default identity
// }
// Types listed in base_rates are the ones the process can emit.
struct GroundTruthModel {
  Vocabulary vocabulary;
  std::vector<RulePath> rules;
  RuleWeights weights;
  double horizon = 10.0;
};

inline GroundTruthModel ground_truth_from_json(const json& j) {
  GroundTruthModel m;
  std::vector<std::string> names = j.at("vocabulary").get<std::vector<std::string>>();
  std::vector<int> targets;
  for (const auto& t : j.at("targets")) {
    const std::string name = t.get<std::string>();
    const auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end())
      throw DataError("unknown-predicate", "targets", "no predicate named '" + name + "'");
    targets.push_back(static_cast<int>(it - names.begin()));
  }
  m.vocabulary = Vocabulary::from_names(names, std::move(targets));
  for (const auto& [name, rate] : j.at("base_rates").items()) {
    const int id = m.vocabulary.id_of(name);
    if (id < 0) throw DataError("unknown-predicate", "base_rates", "no predicate named '" + name + "'");
    m.weights.base[id] = rate.get<double>();
  }
  for (std::size_t i = 0; i < j.at("rules").size(); ++i) {
    const auto& jr = j["rules"][i];
    RulePath p;
    for (const auto& name : jr.at("path")) {
      const int id = m.vocabulary.id_of(name.get<std::string>());
      if (id < 0)
        throw DataError("unknown-predicate", "rules[" + std::to_string(i) + "]",
                        "no predicate named '" + name.get<std::string>() + "'");
      p.preds.push_back(id);
    }
    if (p.preds.size() < 2)
      throw DataError("bad-rule", "rules[" + std::to_string(i) + "]",
                      "a rule needs a head and at least one body predicate");
    m.weights.weights[p.key()] = jr.at("weight").get<double>();
    m.rules.push_back(std::move(p));
  }
  m.horizon = j.at("horizon").get<double>();
  if (!(m.horizon > 0.0)) throw DataError("bad-horizon", "horizon", "must be > 0");
  m.weights.transform =
      count_transform_from_string(j.value("count_transform", std::string("identity")));
  return m;
}

inline GroundTruthModel load_ground_truth(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("io", path, "cannot open ground-truth model file");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError("parse", path + ":byte " + std::to_string(e.byte), e.what());
  }
  return ground_truth_from_json(j);
}

// Draws labeled sequences: each raw stream is truncated at its last
// target-typed event, which becomes the label (streams without a target
// event are redrawn). Deterministic per (seed, sequence index).
inline Dataset generate_dataset(const GroundTruthModel& m, int n_sequences, double horizon,
                                std::uint64_t seed, std::size_t max_events = 10000) {
  Dataset ds;
  ds.vocabulary = m.vocabulary;
  for (int i = 0; i < n_sequences; ++i) {
    Rng rng = Rng::substream(seed, static_cast<std::uint64_t>(i));
    while (true) {
      const std::vector<Event> events = simulate(m.rules, m.weights, horizon, rng, max_events);
      if (auto seq = label_from_last_target(events, m.vocabulary)) {
        ds.sequences.push_back(std::move(*seq));
        break;
      }
    }
  }
  return ds;
}

}  // namespace treeflow
