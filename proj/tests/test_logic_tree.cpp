#include <doctest.h>

#include <set>

#include "oracles.hpp"
#include "treeflow/logic_tree.hpp"

using namespace treeflow;

namespace {

const Vocabulary kVocabABC = Vocabulary::from_names({"A", "B", "C"}, {0});

LevelChoice single(int leaf, std::vector<int> children) {
  LevelChoice c;
  c.paths.push_back({leaf, std::move(children)});
  return c;
}

}  // namespace

TEST_CASE("expand grows one level") {
  const TreeLimits lim{2, 2};
  LogicTree root(0);

  SUBCASE("children B, C") {
    LogicTree t = expand(root, single(0, {1, 2}), lim);
    CHECK(t.nodes().size() == 3);
    CHECK(t.frontier().size() == 2);
    CHECK_FALSE(t.terminal());
    auto ps = paths(t);
    REQUIRE(ps.size() == 2);
    CHECK(ps[0].preds == std::vector<int>{0, 1});
    CHECK(ps[1].preds == std::vector<int>{0, 2});
  }
  SUBCASE("immediate stop terminates") {
    LogicTree t = expand(root, single(0, {}), lim);
    CHECK(t.terminal());
    CHECK(paths(t).empty());
  }
  SUBCASE("paths evolve independently") {
    LogicTree t = expand(root, single(0, {1, 2}), lim);
    LevelChoice c;
    c.paths.push_back({1, {}});      // B stops
    c.paths.push_back({2, {1}});     // C gains child B
    LogicTree t2 = expand(t, c, lim);
    CHECK(t2.terminal() == false);
    CHECK(t2.node(1).terminated);
    auto ps = paths(t2);
    REQUIRE(ps.size() == 3);
    CHECK(ps[2].preds == std::vector<int>{0, 2, 1});
  }
}

TEST_CASE("expand rejects malformed choices") {
  const TreeLimits lim{2, 2};
  LogicTree root(0);
  CHECK_THROWS(expand(root, single(0, {1, 2, 1}), lim));            // duplicate sibling
  CHECK_THROWS(expand(root, single(0, {1, 2, 2}), lim));            // duplicate sibling
  CHECK_THROWS(expand(root, single(0, {0}), lim));                  // child repeats parent
  CHECK_THROWS(expand(root, single(1, {}), lim));                   // not a frontier leaf
  LogicTree wide = expand(root, single(0, {1, 2}), TreeLimits{2, 3});
  CHECK_THROWS(expand(root, single(0, {1, 2}), TreeLimits{2, 1}));  // too many children

  LogicTree deep(0);
  deep = expand(deep, single(0, {1}), TreeLimits{1, 1});
  LevelChoice past;
  past.paths.push_back({1, {2}});
  CHECK_THROWS(expand(deep, past, TreeLimits{1, 1}));  // past depth cap

  LogicTree done = expand(LogicTree(0), single(0, {}), lim);
  CHECK_THROWS(expand(done, single(0, {}), lim));  // already terminal
}

TEST_CASE("paths enumerates root-to-node chains") {
  CHECK(paths(LogicTree(0)).empty());

  // full tree, depth 3, width 2: 2 + 4 + 8 = 14 paths
  const TreeLimits lim{3, 2};
  PolicyParams uniform = PolicyParams::make(5, lim, false);
  LogicTree t(0);
  // grow a complete width-2 tree by hand: each node gets 2 children (ids
  // chosen to differ from the parent)
  for (int level = 0; level < 3; ++level) {
    LevelChoice choice;
    for (int leaf : t.frontier()) {
      const int p = t.node(leaf).pred;
      choice.paths.push_back({leaf, {(p + 1) % 5, (p + 2) % 5}});
    }
    t = expand(t, choice, lim);
  }
  CHECK(paths(t).size() == 14);
}

TEST_CASE("enumerate_terminal_trees matches hand enumeration") {
  SUBCASE("d=1, W=1: bare root plus two single-child trees") {
    auto trees = enumerate_terminal_trees(kVocabABC, 0, {1, 1});
    REQUIRE(trees.size() == 3);
    std::set<std::string> keys;
    for (const auto& t : trees) keys.insert(canonical_key(t));
    CHECK(keys == std::set<std::string>{"0()", "0(1())", "0(2())"});
  }
  SUBCASE("d=1, W=2: subsets of {B, C}") {
    auto trees = enumerate_terminal_trees(kVocabABC, 0, {1, 2});
    CHECK(trees.size() == 4);
  }
  SUBCASE("d=0: only the bare root") {
    auto trees = enumerate_terminal_trees(kVocabABC, 0, {0, 2});
    REQUIRE(trees.size() == 1);
    CHECK(trees[0].terminal());
  }
  SUBCASE("every tree is terminal and distinct") {
    auto trees = enumerate_terminal_trees(kVocabABC, 0, {2, 2});
    std::set<std::string> keys;
    for (const auto& t : trees) {
      CHECK(t.terminal());
      keys.insert(canonical_key(t));
    }
    CHECK(keys.size() == trees.size());
  }
  SUBCASE("space bound guard") {
    const Vocabulary big = Vocabulary::from_names(
        {"A", "B", "C", "D", "E", "F", "G", "H", "I", "J"}, {0});
    CHECK_THROWS_AS(enumerate_terminal_trees(big, 0, {4, 7}), SpaceTooLargeError);
  }
}

TEST_CASE("enumeration size equals the independent recursive counter") {
  for (int n = 2; n <= 4; ++n) {
    std::vector<std::string> names;
    for (int i = 0; i < n; ++i) names.push_back(std::string(1, char('A' + i)));
    const Vocabulary vocab = Vocabulary::from_names(names, {0});
    for (int d = 1; d <= 2; ++d) {
      for (int w = 1; w <= 2; ++w) {
        const auto trees = enumerate_terminal_trees(vocab, 0, {d, w});
        const double expected = oracles::count_terminal_trees(n, d, w);
        CHECK_MESSAGE(static_cast<double>(trees.size()) == expected,
                      "N=", n, " d=", d, " W=", w);
      }
    }
  }
}

TEST_CASE("canonical_key ignores sibling insertion order") {
  const TreeLimits lim{1, 2};
  LogicTree a = expand(LogicTree(0), single(0, {1, 2}), lim);
  LogicTree b = expand(LogicTree(0), single(0, {2, 1}), lim);
  CHECK(canonical_key(a) == canonical_key(b));
  CHECK(canonical_key(LogicTree(0)) == "0()");
}

TEST_CASE("replaying level choices reproduces the stored state") {
  Rng rng(7);
  const TreeLimits lim{3, 2};
  const Vocabulary vocab = Vocabulary::from_names({"A", "B", "C", "D"}, {0, 1});
  PolicyParams uniform = PolicyParams::make(vocab.size(), lim, false);
  for (int rep = 0; rep < 50; ++rep) {
    Trajectory traj = sample_trajectory(uniform, 0, nullptr, rng);
    const LogicTree rebuilt = replay(traj, lim);
    CHECK(state_key(rebuilt) == state_key(traj.final_tree()));
    // |paths| grows by exactly the number of non-stop choices per level
    for (std::size_t k = 0; k < traj.choices.size(); ++k) {
      std::size_t added = 0;
      for (const auto& pc : traj.choices[k].paths) added += pc.children.size();
      CHECK(paths(traj.states[k + 1]).size() == paths(traj.states[k]).size() + added);
    }
  }
}

TEST_CASE("rule path keys round trip") {
  RulePath p{{0, 2, 1}};
  CHECK(p.key() == "0<-2<-1");
  CHECK(parse_rule_key(p.key()) == p);
  CHECK(p.display(kVocabABC) == "A <- C <- B");
  CHECK(p.head() == 0);
  CHECK(p.body_len() == 2);
}
