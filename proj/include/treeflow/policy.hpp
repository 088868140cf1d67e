#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "treeflow/core_types.hpp"
#include "treeflow/logic_tree.hpp"
#include "treeflow/matrix.hpp"
#include "treeflow/rng.hpp"

namespace treeflow {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Conditioning summary for the posterior sampler: per-type event counts of X
// normalized by length, plus the label one-hot (label < 0 leaves the label
// slot neutral, e.g. at prediction time). The prior policy ignores it.
struct PolicyCondition {
  std::vector<double> counts;
  int label = -1;

  static PolicyCondition from_sequence(const EventSequence& seq, int n_types, int label) {
    return {normalized_type_counts(seq, n_types), label};
  }
};

// Linear-softmax next-predicate model over Z united with the stop token.
// Feature layout: one-hot(parent) | one-hot(depth) | sibling mask |
// [conditioned only: normalized counts | one-hot(label)].
struct PolicyParams {
  Matrix weights;  // feature_dim x (N+1); token N is the stop symbol
  int n_preds = 0;
  int max_depth = 0;
  int max_width = 0;
  bool conditioned = false;

  static PolicyParams make(int n_preds, const TreeLimits& limits, bool conditioned) {
    PolicyParams p;
    p.n_preds = n_preds;
    p.max_depth = limits.max_depth;
    p.max_width = limits.max_width;
    p.conditioned = conditioned;
    p.weights = Matrix(p.feature_dim(), static_cast<std::size_t>(n_preds) + 1, 0.0);
    return p;
  }

  int stop_token() const { return n_preds; }
  std::size_t unconditioned_dim() const {
    return 2 * static_cast<std::size_t>(n_preds) + static_cast<std::size_t>(max_depth) + 1;
  }
  std::size_t feature_dim() const {
    return unconditioned_dim() + (conditioned ? 2 * static_cast<std::size_t>(n_preds) : 0);
  }
  TreeLimits limits() const { return {max_depth, max_width}; }

  // The sampler starts from the prior's values on the shared feature rows;
  // condition rows start at zero.
  static PolicyParams posterior_from_prior(const PolicyParams& prior) {
    PolicyParams p = make(prior.n_preds, prior.limits(), true);
    for (std::size_t r = 0; r < prior.unconditioned_dim(); ++r)
      for (std::size_t c = 0; c < p.weights.cols(); ++c) p.weights(r, c) = prior.weights(r, c);
    return p;
  }
};

// One sampling context: expanding the path whose last node is `parent_pred`
// at `depth`, with `chosen` siblings already emitted in this slot sequence.
struct PolicyContext {
  int parent_pred = -1;
  int depth = 0;
  std::vector<char> chosen;  // size N
  const PolicyCondition* condition = nullptr;

  int chosen_count() const {
    int c = 0;
    for (char b : chosen) c += b != 0;
    return c;
  }
};

// Log-probabilities over Z united with stop; masked entries are -inf.
struct TokenDistribution {
  std::vector<double> logp;
  std::vector<char> masked;

  double prob(int token) const { return std::exp(logp[static_cast<std::size_t>(token)]); }
};

namespace detail {

inline std::vector<std::pair<std::size_t, double>> policy_features(const PolicyParams& params,
                                                                   const PolicyContext& ctx) {
  std::vector<std::pair<std::size_t, double>> feats;
  const auto n = static_cast<std::size_t>(params.n_preds);
  feats.emplace_back(static_cast<std::size_t>(ctx.parent_pred), 1.0);
  feats.emplace_back(n + static_cast<std::size_t>(ctx.depth), 1.0);
  for (std::size_t z = 0; z < n; ++z)
    if (ctx.chosen[z]) feats.emplace_back(n + static_cast<std::size_t>(params.max_depth) + 1 + z, 1.0);
  if (params.conditioned && ctx.condition) {
    const std::size_t base = params.unconditioned_dim();
    for (std::size_t z = 0; z < n && z < ctx.condition->counts.size(); ++z)
      if (ctx.condition->counts[z] != 0.0) feats.emplace_back(base + z, ctx.condition->counts[z]);
    if (ctx.condition->label >= 0)
      feats.emplace_back(base + n + static_cast<std::size_t>(ctx.condition->label), 1.0);
  }
  return feats;
}

}  // namespace detail

// Masked log-softmax of the linear head. The same predicate never repeats
// among siblings or its own parent; past the width budget or at the depth
// cap only the stop token remains.
inline TokenDistribution next_token_dist(const PolicyParams& params, const PolicyContext& ctx) {
  const std::size_t n_tokens = static_cast<std::size_t>(params.n_preds) + 1;
  TokenDistribution dist;
  dist.masked.assign(n_tokens, 0);
  const bool no_preds =
      ctx.depth >= params.max_depth || ctx.chosen_count() >= params.max_width;
  for (std::size_t z = 0; z < static_cast<std::size_t>(params.n_preds); ++z)
    dist.masked[z] = no_preds || static_cast<int>(z) == ctx.parent_pred || ctx.chosen[z];

  dist.logp.assign(n_tokens, 0.0);
  for (const auto& [row, v] : detail::policy_features(params, ctx))
    for (std::size_t tok = 0; tok < n_tokens; ++tok)
      dist.logp[tok] += v * params.weights(row, tok);

  double m = kNegInf;
  for (std::size_t tok = 0; tok < n_tokens; ++tok)
    if (!dist.masked[tok]) m = std::max(m, dist.logp[tok]);
  double z = 0.0;
  for (std::size_t tok = 0; tok < n_tokens; ++tok)
    if (!dist.masked[tok]) z += std::exp(dist.logp[tok] - m);
  const double logz = m + std::log(z);
  for (std::size_t tok = 0; tok < n_tokens; ++tok)
    dist.logp[tok] = dist.masked[tok] ? kNegInf : dist.logp[tok] - logz;
  return dist;
}

// Adds coef * d log p(token | ctx) / d params to grad (log-softmax gradient,
// masked entries excluded).
inline void accumulate_decision_grad(const PolicyParams& params, const PolicyContext& ctx,
                                     const TokenDistribution& dist, int token, double coef,
                                     Matrix& grad) {
  const std::size_t n_tokens = static_cast<std::size_t>(params.n_preds) + 1;
  for (const auto& [row, v] : detail::policy_features(params, ctx)) {
    for (std::size_t tok = 0; tok < n_tokens; ++tok) {
      if (dist.masked[tok]) continue;
      const double indicator = static_cast<int>(tok) == token ? 1.0 : 0.0;
      grad(row, tok) += coef * v * (indicator - std::exp(dist.logp[tok]));
    }
  }
}

namespace detail {

// Log-probability (and optional gradient) of one leaf's full decision: the
// unordered children set followed by the closing stop, or an immediate stop
// when the set is empty. Sums over the slot orderings that produce the set.
inline double leaf_decision_logprob(const PolicyParams& params, int parent_pred, int depth,
                                    const std::vector<int>& children_set,
                                    const PolicyCondition* cond, Matrix* grad, double coef) {
  PolicyContext ctx{parent_pred, depth, std::vector<char>(static_cast<std::size_t>(params.n_preds), 0), cond};
  if (children_set.empty()) {
    const TokenDistribution dist = next_token_dist(params, ctx);
    if (grad) accumulate_decision_grad(params, ctx, dist, params.stop_token(), coef, *grad);
    return dist.logp[static_cast<std::size_t>(params.stop_token())];
  }

  std::vector<int> order = children_set;
  std::sort(order.begin(), order.end());
  struct PerOrder {
    std::vector<int> tokens;
    double logp;
  };
  std::vector<PerOrder> orders;
  do {
    double lp = 0.0;
    std::fill(ctx.chosen.begin(), ctx.chosen.end(), 0);
    for (int tok : order) {
      const TokenDistribution dist = next_token_dist(params, ctx);
      lp += dist.logp[static_cast<std::size_t>(tok)];
      ctx.chosen[static_cast<std::size_t>(tok)] = 1;
    }
    orders.push_back({order, lp});
  } while (std::next_permutation(order.begin(), order.end()));

  double m = kNegInf;
  for (const auto& o : orders) m = std::max(m, o.logp);
  double z = 0.0;
  for (const auto& o : orders) z += std::exp(o.logp - m);
  const double set_logp = m + std::log(z);

  // Closing stop after the whole set; its context does not depend on order.
  std::fill(ctx.chosen.begin(), ctx.chosen.end(), 0);
  for (int tok : children_set) ctx.chosen[static_cast<std::size_t>(tok)] = 1;
  const TokenDistribution stop_dist = next_token_dist(params, ctx);
  const double stop_logp = stop_dist.logp[static_cast<std::size_t>(params.stop_token())];

  if (grad) {
    for (const auto& o : orders) {
      const double weight = std::exp(o.logp - set_logp);
      std::fill(ctx.chosen.begin(), ctx.chosen.end(), 0);
      for (int tok : o.tokens) {
        const TokenDistribution dist = next_token_dist(params, ctx);
        accumulate_decision_grad(params, ctx, dist, tok, coef * weight, *grad);
        ctx.chosen[static_cast<std::size_t>(tok)] = 1;
      }
    }
    accumulate_decision_grad(params, ctx, stop_dist, params.stop_token(), coef, *grad);
  }
  return set_logp + stop_logp;
}

inline std::vector<int> child_preds(const LogicTree& tree, int node_id) {
  std::vector<int> preds;
  for (int c : tree.node(node_id).children) preds.push_back(tree.node(c).pred);
  return preds;
}

}  // namespace detail

// Log-probability of generating the tree's content: the product over nodes
// of their decision probabilities, treating any still-active leaf as
// stopped. For terminal trees, summing exp over the enumerated tree space
// gives 1.
inline double tree_logprob(const PolicyParams& params, const LogicTree& tree,
                           const PolicyCondition* cond = nullptr) {
  double total = 0.0;
  for (std::size_t id = 0; id < tree.nodes().size(); ++id) {
    const auto& n = tree.node(static_cast<int>(id));
    total += detail::leaf_decision_logprob(params, n.pred, n.depth,
                                           detail::child_preds(tree, static_cast<int>(id)),
                                           cond, nullptr, 0.0);
  }
  return total;
}

// Adds coef * d tree_logprob / d params to grad; returns the logprob.
inline double tree_logprob_grad(const PolicyParams& params, const LogicTree& tree,
                                const PolicyCondition* cond, Matrix& grad, double coef = 1.0) {
  double total = 0.0;
  for (std::size_t id = 0; id < tree.nodes().size(); ++id) {
    const auto& n = tree.node(static_cast<int>(id));
    total += detail::leaf_decision_logprob(params, n.pred, n.depth,
                                           detail::child_preds(tree, static_cast<int>(id)),
                                           cond, &grad, coef);
  }
  return total;
}

// log q(next | prev) for one growth level, summed over slot orderings.
// `prev` and `next` must be consecutive states of one trajectory (node ids
// are stable because growth only appends).
inline double transition_logprob(const PolicyParams& params, const LogicTree& prev,
                                 const LogicTree& next, const PolicyCondition* cond = nullptr,
                                 Matrix* grad = nullptr, double coef = 1.0) {
  double total = 0.0;
  for (int leaf : prev.frontier()) {
    const auto& n = prev.node(leaf);
    total += detail::leaf_decision_logprob(params, n.pred, n.depth,
                                           detail::child_preds(next, leaf), cond, grad, coef);
  }
  return total;
}

// log q(stop | state): the probability that every active path stops
// immediately. Zero for terminal states.
inline double stop_logprob(const PolicyParams& params, const LogicTree& state,
                           const PolicyCondition* cond = nullptr, Matrix* grad = nullptr,
                           double coef = 1.0) {
  double total = 0.0;
  for (int leaf : state.frontier()) {
    const auto& n = state.node(leaf);
    total += detail::leaf_decision_logprob(params, n.pred, n.depth, {}, cond, grad, coef);
  }
  return total;
}

// Off-policy sampling knobs. epsilon mixes a uniform over unmasked tokens,
// temperature rescales logits, top_k (0 = off) truncates the policy part of
// the mixture to the k most likely tokens. Recorded log-probabilities always
// come from the unmixed, temperature-1 policy.
struct Exploration {
  double epsilon = 0.0;
  double temperature = 1.0;
  int top_k = 0;
};

struct SampledLevel {
  LevelChoice choice;
  double logprob = 0.0;  // ordered product under the unmixed policy
};

namespace detail {

inline int sample_token(const PolicyParams& params, const PolicyContext& ctx,
                        const TokenDistribution& dist, const Exploration& explore, Rng& rng,
                        double* logprob) {
  const std::size_t n_tokens = dist.logp.size();
  std::vector<double> probs(n_tokens, 0.0);
  if (explore.temperature == 1.0 && explore.top_k == 0) {
    for (std::size_t t = 0; t < n_tokens; ++t)
      if (!dist.masked[t]) probs[t] = std::exp(dist.logp[t]);
  } else {
    std::vector<std::size_t> unmasked;
    for (std::size_t t = 0; t < n_tokens; ++t)
      if (!dist.masked[t]) unmasked.push_back(t);
    if (explore.top_k > 0 && static_cast<std::size_t>(explore.top_k) < unmasked.size()) {
      std::sort(unmasked.begin(), unmasked.end(),
                [&](std::size_t a, std::size_t b) { return dist.logp[a] > dist.logp[b]; });
      unmasked.resize(static_cast<std::size_t>(explore.top_k));
    }
    double m = kNegInf;
    for (std::size_t t : unmasked) m = std::max(m, dist.logp[t] / explore.temperature);
    double z = 0.0;
    for (std::size_t t : unmasked) z += std::exp(dist.logp[t] / explore.temperature - m);
    for (std::size_t t : unmasked) probs[t] = std::exp(dist.logp[t] / explore.temperature - m) / z;
  }
  if (explore.epsilon > 0.0) {
    std::size_t n_unmasked = 0;
    for (std::size_t t = 0; t < n_tokens; ++t) n_unmasked += !dist.masked[t];
    for (std::size_t t = 0; t < n_tokens; ++t) {
      probs[t] *= 1.0 - explore.epsilon;
      if (!dist.masked[t]) probs[t] += explore.epsilon / static_cast<double>(n_unmasked);
    }
  }
  const int token = static_cast<int>(rng.categorical(probs));
  (void)params;
  (void)ctx;
  *logprob = dist.logp[static_cast<std::size_t>(token)];
  return token;
}

}  // namespace detail

// Draws one growth level for every frontier path: at most W distinct
// children autoregressively, then the stop symbol.
inline SampledLevel sample_level(const PolicyParams& params, const LogicTree& tree,
                                 const PolicyCondition* cond, Rng& rng,
                                 const Exploration& explore = {}) {
  SampledLevel out;
  for (int leaf : tree.frontier()) {
    const auto& n = tree.node(leaf);
    LevelChoice::PathChoice pc;
    pc.leaf = leaf;
    PolicyContext ctx{n.pred, n.depth, std::vector<char>(static_cast<std::size_t>(params.n_preds), 0), cond};
    while (true) {
      const TokenDistribution dist = next_token_dist(params, ctx);
      double lp = 0.0;
      const int token = detail::sample_token(params, ctx, dist, explore, rng, &lp);
      out.logprob += lp;
      if (token == params.stop_token()) break;
      pc.children.push_back(token);
      ctx.chosen[static_cast<std::size_t>(token)] = 1;
    }
    out.choice.paths.push_back(std::move(pc));
  }
  return out;
}

// Samples a complete trajectory from the root until every path has stopped.
inline Trajectory sample_trajectory(const PolicyParams& params, int root,
                                    const PolicyCondition* cond, Rng& rng,
                                    const Exploration& explore = {}) {
  Trajectory traj;
  traj.states.emplace_back(root);
  while (!traj.states.back().terminal()) {
    const SampledLevel level = sample_level(params, traj.states.back(), cond, rng, explore);
    traj.states.push_back(expand(traj.states.back(), level.choice, params.limits()));
    traj.choices.push_back(level.choice);
    traj.logprobs.push_back(level.logprob);
  }
  return traj;
}

// Ordered log-probability of the recorded slot sequences (replay of the
// sampled decisions, no ordering sum).
inline double sequence_logprob(const PolicyParams& params, const Trajectory& traj,
                               const PolicyCondition* cond = nullptr) {
  double total = 0.0;
  for (std::size_t k = 0; k < traj.choices.size(); ++k) {
    const LogicTree& prev = traj.states[k];
    for (const auto& pc : traj.choices[k].paths) {
      const auto& n = prev.node(pc.leaf);
      PolicyContext ctx{n.pred, n.depth, std::vector<char>(static_cast<std::size_t>(params.n_preds), 0), cond};
      for (int tok : pc.children) {
        total += next_token_dist(params, ctx).logp[static_cast<std::size_t>(tok)];
        ctx.chosen[static_cast<std::size_t>(tok)] = 1;
      }
      total += next_token_dist(params, ctx).logp[static_cast<std::size_t>(params.stop_token())];
    }
  }
  return total;
}

}  // namespace treeflow
