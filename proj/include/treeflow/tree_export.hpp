#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "treeflow/core_types.hpp"
#include "treeflow/logic_tree.hpp"
#include "treeflow/tlpp.hpp"

namespace treeflow {

// Path-set representation of one tree.
inline json tree_to_json(const LogicTree& tree, const Vocabulary& vocab) {
  json j;
  j["root"] = vocab.name(tree.root_pred());
  j["paths"] = json::array();
  for (const auto& p : paths(tree)) {
    json names = json::array();
    for (int id : p.preds) names.push_back(vocab.name(id));
    j["paths"].push_back(std::move(names));
  }
  j["terminal"] = tree.terminal();
  return j;
}

// Union trie over a sample of trees. An edge is identified by the rule path
// ending at its child; freq is the fraction of sampled trees containing it.
struct EdgeStat {
  RulePath path;   // root..child
  double freq = 0.0;
  double weight = 0.0;  // learned w_f for this path
};

inline std::vector<EdgeStat> edge_stats(std::span<const LogicTree> trees,
                                        const RuleWeights& w) {
  std::map<std::string, EdgeStat> by_key;
  for (const LogicTree& tree : trees) {
    for (const auto& p : paths(tree)) {
      auto& e = by_key[p.key()];
      if (e.path.preds.empty()) e.path = p;
      e.freq += 1.0;
    }
  }
  std::vector<EdgeStat> out;
  for (auto& [key, e] : by_key) {
    e.freq /= static_cast<double>(trees.size());
    e.weight = w.weight(key);
    out.push_back(e);
  }
  return out;
}

inline json edge_stats_to_json(std::span<const EdgeStat> edges, const Vocabulary& vocab) {
  json j = json::array();
  for (const auto& e : edges) {
    json names = json::array();
    for (int id : e.path.preds) names.push_back(vocab.name(id));
    j.push_back({{"path", std::move(names)},
                 {"key", e.path.key()},
                 {"frequency", e.freq},
                 {"weight", e.weight}});
  }
  return j;
}

// DOT rendering of the sampled-tree union. Edge thickness carries the
// posterior frequency, color the weight sign (red = inhibition).
inline std::string trees_to_dot(std::span<const EdgeStat> edges, const Vocabulary& vocab,
                                int root_pred) {
  std::string out = "digraph logic_tree {\n  node [shape=box, style=rounded];\n";
  auto node_id = [](const RulePath& p) { return "\"" + p.key() + "\""; };
  out += "  \"" + std::to_string(root_pred) + "\" [label=\"" + vocab.name(root_pred) + "\"];\n";
  for (const auto& e : edges) {
    out += "  " + node_id(e.path) + " [label=\"" + vocab.name(e.path.preds.back()) + "\"];\n";
  }
  for (const auto& e : edges) {
    RulePath parent = e.path;
    parent.preds.pop_back();
    const std::string from =
        parent.preds.size() == 1 ? "\"" + std::to_string(root_pred) + "\"" : node_id(parent);
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  " [penwidth=%.3f, color=%s, frequency=\"%.6f\", weight_value=\"%.6f\"];\n",
                  0.5 + 4.0 * e.freq, e.weight < 0.0 ? "red" : "black", e.freq, e.weight);
    out += "  " + from + " -> " + node_id(e.path) + buf;
  }
  out += "}\n";
  return out;
}

}  // namespace treeflow
