#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "treeflow/core_types.hpp"
#include "treeflow/errors.hpp"

namespace treeflow {

// Depth/width caps for tree growth. depth counts edges from the root; a node
// at depth == max_depth can only stop. Each node has at most max_width
// children, all distinct, and a child never repeats its parent's predicate.
struct TreeLimits {
  int max_depth = 3;
  int max_width = 3;
};

// A rule: root-first predicate chain (z_0, z_1, ..., z_j). The body is read
// deepest-first against history: an instantiation is a strictly increasing
// time tuple matching (z_j, ..., z_1) in order, all before the query time.
struct RulePath {
  std::vector<int> preds;

  int head() const { return preds.front(); }
  std::size_t body_len() const { return preds.size() - 1; }

  std::string key() const {
    std::string k;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (i) k += "<-";
      k += std::to_string(preds[i]);
    }
    return k;
  }

  std::string display(const Vocabulary& vocab) const {
    std::string k;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (i) k += " <- ";
      k += vocab.name(preds[i]);
    }
    return k;
  }

  friend bool operator==(const RulePath&, const RulePath&) = default;
};

inline RulePath parse_rule_key(const std::string& key) {
  RulePath p;
  std::size_t pos = 0;
  while (pos < key.size()) {
    std::size_t next = key.find("<-", pos);
    if (next == std::string::npos) next = key.size();
    p.preds.push_back(std::stoi(key.substr(pos, next - pos)));
    pos = next == key.size() ? next : next + 2;
  }
  return p;
}

// Rooted tree of predicates grown one level at a time. Nodes are append-only
// so node ids remain stable across the states of a trajectory. A leaf is
// `terminated` once it has chosen the stop symbol; terminated leaves never
// reopen, which keeps every state's parent unique.
class LogicTree {
 public:
  struct Node {
    int pred = -1;
    int parent = -1;
    int depth = 0;
    bool terminated = false;
    std::vector<int> children;  // node ids, kept sorted by predicate
  };

  LogicTree() = default;
  explicit LogicTree(int root_pred) { nodes_.push_back({root_pred, -1, 0, false, {}}); }

  const std::vector<Node>& nodes() const { return nodes_; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  int root_pred() const { return nodes_.front().pred; }
  int level() const { return level_; }

  int depth() const {
    int d = 0;
    for (const auto& n : nodes_) d = std::max(d, n.depth);
    return d;
  }

  // Active leaves awaiting a decision, in ascending node-id order.
  std::vector<int> frontier() const {
    std::vector<int> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].children.empty() && !nodes_[i].terminated) out.push_back(static_cast<int>(i));
    return out;
  }

  bool terminal() const { return frontier().empty(); }

  // Predicates on the path from the root to `id`, root first.
  RulePath path_to(int id) const {
    std::vector<int> rev;
    for (int cur = id; cur != -1; cur = nodes_[static_cast<std::size_t>(cur)].parent)
      rev.push_back(nodes_[static_cast<std::size_t>(cur)].pred);
    std::reverse(rev.begin(), rev.end());
    return RulePath{std::move(rev)};
  }

  int add_child(int parent_id, int pred) {
    const int id = static_cast<int>(nodes_.size());
    const int parent_depth = nodes_[static_cast<std::size_t>(parent_id)].depth;
    nodes_.push_back({pred, parent_id, parent_depth + 1, false, {}});
    auto& children = nodes_[static_cast<std::size_t>(parent_id)].children;
    auto pos = std::lower_bound(children.begin(), children.end(), pred,
                                [&](int cid, int p) { return nodes_[static_cast<std::size_t>(cid)].pred < p; });
    children.insert(pos, id);
    return id;
  }

  void terminate(int id) { nodes_[static_cast<std::size_t>(id)].terminated = true; }
  void bump_level() { ++level_; }

 private:
  std::vector<Node> nodes_;
  int level_ = 0;
};

// One growth level: for each frontier leaf, the ordered predicates chosen
// before the stop symbol (empty means the leaf stops immediately).
struct LevelChoice {
  struct PathChoice {
    int leaf = -1;
    std::vector<int> children;  // in sampled order; empty = immediate stop
  };
  std::vector<PathChoice> paths;
};

// Grows the tree by exactly one level. Every current frontier leaf must be
// addressed exactly once.
inline LogicTree expand(const LogicTree& tree, const LevelChoice& choice,
                        const TreeLimits& limits) {
  if (tree.terminal())
    throw std::invalid_argument("expand: tree is already terminal");
  std::vector<int> frontier = tree.frontier();
  if (choice.paths.size() != frontier.size())
    throw std::invalid_argument("expand: choice does not cover the frontier");
  LogicTree out = tree;
  std::vector<char> seen(tree.nodes().size(), 0);
  for (const auto& pc : choice.paths) {
    if (pc.leaf < 0 || pc.leaf >= static_cast<int>(tree.nodes().size()) ||
        !std::binary_search(frontier.begin(), frontier.end(), pc.leaf) || seen[static_cast<std::size_t>(pc.leaf)])
      throw std::invalid_argument("expand: choice addresses a non-frontier leaf");
    seen[static_cast<std::size_t>(pc.leaf)] = 1;
    const auto& leaf = tree.node(pc.leaf);
    if (pc.children.empty()) {
      out.terminate(pc.leaf);
      continue;
    }
    if (leaf.depth >= limits.max_depth)
      throw std::invalid_argument("expand: expansion past depth limit");
    if (static_cast<int>(pc.children.size()) > limits.max_width)
      throw std::invalid_argument("expand: more children than width limit");
    std::vector<int> sorted = pc.children;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw std::invalid_argument("expand: duplicate sibling");
    for (int pred : pc.children) {
      if (pred == leaf.pred)
        throw std::invalid_argument("expand: child repeats its parent predicate");
      out.add_child(pc.leaf, pred);
    }
  }
  out.bump_level();
  return out;
}

// Every root-to-node path with at least one body predicate, in depth-first
// order with siblings ascending by predicate.
inline std::vector<RulePath> paths(const LogicTree& tree) {
  std::vector<RulePath> out;
  std::vector<int> prefix = {tree.root_pred()};
  auto dfs = [&](auto&& self, int id) -> void {
    for (int child : tree.node(id).children) {
      prefix.push_back(tree.node(child).pred);
      out.push_back(RulePath{prefix});
      self(self, child);
      prefix.pop_back();
    }
  };
  dfs(dfs, 0);
  return out;
}

// Canonical content key: sibling order and termination flags do not affect
// it. Children are already stored sorted by predicate.
inline std::string canonical_key(const LogicTree& tree) {
  auto rec = [&](auto&& self, int id) -> std::string {
    std::string s = std::to_string(tree.node(id).pred);
    s += '(';
    bool first = true;
    for (int child : tree.node(id).children) {
      if (!first) s += ',';
      first = false;
      s += self(self, child);
    }
    s += ')';
    return s;
  };
  return rec(rec, 0);
}

// State key: like canonical_key but distinguishes terminated leaves, so it
// identifies states of the growth process rather than tree contents.
inline std::string state_key(const LogicTree& tree) {
  auto rec = [&](auto&& self, int id) -> std::string {
    const auto& n = tree.node(id);
    std::string s = std::to_string(n.pred);
    if (n.terminated) s += '*';
    s += '(';
    bool first = true;
    for (int child : n.children) {
      if (!first) s += ',';
      first = false;
      s += self(self, child);
    }
    s += ')';
    return s;
  };
  return rec(rec, 0) + "@" + std::to_string(tree.level());
}

// Upper bound N^(W^d) on the tree space size, as a guard for enumeration.
inline double search_space_bound(int n_preds, int max_depth, int max_width) {
  const double exponent = std::pow(static_cast<double>(max_width), static_cast<double>(max_depth));
  return std::pow(static_cast<double>(n_preds), exponent);
}

namespace detail {

// All subsets of `candidates` with size <= max_width, in canonical order:
// by size, then lexicographically by element.
inline std::vector<std::vector<int>> bounded_subsets(const std::vector<int>& candidates,
                                                     int max_width) {
  std::vector<std::vector<int>> out = {{}};
  std::vector<std::vector<int>> prev = {{}};
  for (int size = 1; size <= std::min<int>(max_width, static_cast<int>(candidates.size())); ++size) {
    std::vector<std::vector<int>> cur;
    for (const auto& base : prev) {
      const int lo = base.empty() ? -1 : base.back();
      for (int c : candidates) {
        if (c > lo) {
          auto next = base;
          next.push_back(c);
          cur.push_back(std::move(next));
        }
      }
    }
    for (const auto& s : cur) out.push_back(s);
    prev = std::move(cur);
  }
  return out;
}

}  // namespace detail

// Exhaustively generates every distinct terminal tree under the caps, each
// exactly once, in a canonical order. Children of a node are any subset of
// the vocabulary minus the node's own predicate, of size at most max_width.
inline std::vector<LogicTree> enumerate_terminal_trees(const Vocabulary& vocab, int root,
                                                       const TreeLimits& limits,
                                                       double cap = 1e6) {
  const double bound = search_space_bound(vocab.size(), limits.max_depth, limits.max_width);
  if (!(bound <= cap))
    throw SpaceTooLargeError("tree space bound " + std::to_string(bound) +
                             " exceeds cap " + std::to_string(cap));

  // Recursively attach every admissible subtree below `node` in `tree`,
  // then advance to the next pending node.
  std::vector<LogicTree> out;
  std::vector<int> all_preds;
  for (const auto& p : vocab.predicates) all_preds.push_back(p.id);

  auto fill = [&](auto&& self, LogicTree tree, std::vector<int> pending) -> void {
    if (pending.empty()) {
      LogicTree done = tree;
      for (std::size_t i = 0; i < done.nodes().size(); ++i)
        if (done.node(static_cast<int>(i)).children.empty()) done.terminate(static_cast<int>(i));
      out.push_back(std::move(done));
      return;
    }
    const int id = pending.back();
    pending.pop_back();
    const auto& n = tree.node(id);
    if (n.depth >= limits.max_depth) {
      self(self, std::move(tree), std::move(pending));
      return;
    }
    std::vector<int> candidates;
    for (int p : all_preds)
      if (p != n.pred) candidates.push_back(p);
    for (const auto& subset : detail::bounded_subsets(candidates, limits.max_width)) {
      LogicTree next = tree;
      auto next_pending = pending;
      for (int pred : subset) next_pending.push_back(next.add_child(id, pred));
      self(self, std::move(next), std::move(next_pending));
    }
  };
  fill(fill, LogicTree(root), {0});
  return out;
}

// Sequence of states R_0..R_t with the level choices that produced them.
// states[k] is the tree after k expansions; states.back() is terminal.
struct Trajectory {
  std::vector<LogicTree> states;
  std::vector<LevelChoice> choices;
  std::vector<double> logprobs;  // sampled ordered log-prob per transition

  const LogicTree& final_tree() const { return states.back(); }
  std::size_t num_transitions() const { return choices.size(); }
};

// Rebuilds the final state by folding expand over the recorded choices;
// used to check trajectory integrity.
inline LogicTree replay(const Trajectory& traj, const TreeLimits& limits) {
  LogicTree tree = traj.states.front();
  for (const auto& choice : traj.choices) tree = expand(tree, choice, limits);
  return tree;
}

}  // namespace treeflow
