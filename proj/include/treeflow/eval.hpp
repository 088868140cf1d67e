#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "treeflow/core_types.hpp"
#include "treeflow/gflownet.hpp"
#include "treeflow/logic_tree.hpp"
#include "treeflow/policy.hpp"
#include "treeflow/tlpp.hpp"

namespace treeflow {

struct PredictionRecord {
  std::size_t sequence_index = 0;
  std::vector<int> ranking;      // target ids, best first
  std::vector<double> scores;    // aligned with ranking, nonincreasing
  int label = -1;

  int top1() const { return ranking.front(); }

  int rank_of_label() const {
    for (std::size_t i = 0; i < ranking.size(); ++i)
      if (ranking[i] == label) return static_cast<int>(i) + 1;
    return static_cast<int>(ranking.size());
  }
};

namespace detail {

inline PredictionRecord rank_targets(const Vocabulary& vocab, std::span<const double> scores,
                                     std::size_t index, int label) {
  PredictionRecord rec;
  rec.sequence_index = index;
  rec.label = label;
  std::vector<std::size_t> order(vocab.targets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return vocab.targets[a] < vocab.targets[b];  // ties by predicate id
  });
  for (std::size_t i : order) {
    rec.ranking.push_back(vocab.targets[i]);
    rec.scores.push_back(scores[i]);
  }
  return rec;
}

}  // namespace detail

struct SequenceEval {
  PredictionRecord record;
  double mean_nll = 0.0;  // sampled-explanation NLL, averaged over trees
};

// Draws n_samples trees with a neutral label slot (the true label is hidden
// at prediction time), cycling roots over the targets, and averages the
// per-tree label distributions. Ties in the final ranking break by
// predicate id.
inline SequenceEval predict_sequence(const EventSequence& x, std::size_t index,
                                     const Vocabulary& vocab, const PolicyParams& theta,
                                     const RuleWeights& w, int n_samples, Rng& rng) {
  const PolicyCondition cond{normalized_type_counts(x, vocab.size()), -1};
  std::vector<double> scores(vocab.targets.size(), 0.0);
  SequenceEval out;
  for (int s = 0; s < n_samples; ++s) {
    const int root = vocab.targets[static_cast<std::size_t>(s) % vocab.targets.size()];
    const Trajectory traj = sample_trajectory(theta, root, &cond, rng);
    const std::vector<RulePath> rules = paths(traj.final_tree());
    const std::vector<double> dist = predict_label_dist(x, vocab, w, rules);
    for (std::size_t i = 0; i < scores.size(); ++i) scores[i] += dist[i];
    out.mean_nll += nll(x, vocab, w, rules);
  }
  for (double& s : scores) s /= n_samples;
  out.mean_nll /= n_samples;
  out.record = detail::rank_targets(vocab, scores, index, x.label);
  return out;
}

inline PredictionRecord predict(const EventSequence& x, std::size_t index,
                                const Vocabulary& vocab, const PolicyParams& theta,
                                const RuleWeights& w, int n_samples, Rng& rng) {
  return predict_sequence(x, index, vocab, theta, w, n_samples, rng).record;
}

inline double error_rate(std::span<const PredictionRecord> records) {
  if (records.empty()) throw std::invalid_argument("error_rate: no records");
  double wrong = 0.0;
  for (const auto& r : records) wrong += r.top1() != r.label;
  return wrong / static_cast<double>(records.size());
}

inline double mean_rank(std::span<const PredictionRecord> records) {
  if (records.empty()) throw std::invalid_argument("mean_rank: no records");
  double total = 0.0;
  for (const auto& r : records) total += r.rank_of_label();
  return total / static_cast<double>(records.size());
}

struct BaselineMetrics {
  double er = 0.0;
  double mr = 0.0;
};

// Expected metrics of a uniformly random ranking over K targets.
inline BaselineMetrics uniform_baseline(std::size_t n_targets) {
  const double k = static_cast<double>(n_targets);
  return {1.0 - 1.0 / k, (k + 1.0) / 2.0};
}

// Ranks targets by train-split label frequency (ties by id) and scores that
// fixed ranking on the given labels.
inline BaselineMetrics majority_baseline(const Dataset& ds, std::span<const std::size_t> eval_idx) {
  std::map<int, double> freq;
  for (int t : ds.vocabulary.targets) freq[t] = 0.0;
  for (std::size_t i : ds.indices_of(Split::train)) freq[ds.sequences[i].label] += 1.0;
  std::vector<int> ranking = ds.vocabulary.targets;
  std::sort(ranking.begin(), ranking.end(), [&](int a, int b) {
    if (freq[a] != freq[b]) return freq[a] > freq[b];
    return a < b;
  });
  BaselineMetrics out;
  if (eval_idx.empty()) return out;
  for (std::size_t i : eval_idx) {
    const int label = ds.sequences[i].label;
    out.er += ranking.front() != label;
    for (std::size_t r = 0; r < ranking.size(); ++r)
      if (ranking[r] == label) out.mr += static_cast<double>(r) + 1.0;
  }
  out.er /= static_cast<double>(eval_idx.size());
  out.mr /= static_cast<double>(eval_idx.size());
  return out;
}

// Exact quantities over an enumerable tree space for one observation.
struct EnumeratedPosterior {
  std::vector<LogicTree> trees;
  std::vector<double> log_joint;  // log p(X,Y|R) + log p_prior(R)
  std::vector<double> q_sampler;  // normalized terminating distribution of theta
  double log_marginal = 0.0;

  std::vector<double> posterior() const {
    std::vector<double> p(log_joint.size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::exp(log_joint[i] - log_marginal);
    return p;
  }
};

inline double log_sum_exp(std::span<const double> xs) {
  double m = kNegInf;
  for (double x : xs) m = std::max(m, x);
  double z = 0.0;
  for (double x : xs) z += std::exp(x - m);
  return m + std::log(z);
}

inline EnumeratedPosterior enumerate_posterior(const EventSequence& x, int y,
                                               const Vocabulary& vocab,
                                               const PolicyParams& theta,
                                               const PolicyParams& prior,
                                               const RuleWeights& w, const TreeLimits& limits,
                                               double cap = 1e6) {
  EnumeratedPosterior out;
  out.trees = enumerate_terminal_trees(vocab, y, limits, cap);
  const PolicyCondition cond = PolicyCondition::from_sequence(x, vocab.size(), y);
  const auto it = std::lower_bound(vocab.targets.begin(), vocab.targets.end(), y);
  const std::size_t yi = static_cast<std::size_t>(it - vocab.targets.begin());
  std::vector<double> logq;
  for (const auto& tree : out.trees) {
    const std::vector<RulePath> rules = paths(tree);
    const double log_px = -nll(x, vocab, w, rules);
    const double log_py = std::log(std::max(predict_label_dist(x, vocab, w, rules)[yi], 1e-300));
    out.log_joint.push_back(log_px + log_py + tree_logprob(prior, tree, nullptr));
    logq.push_back(tree_logprob(theta, tree, &cond));
  }
  out.log_marginal = log_sum_exp(out.log_joint);
  const double logz_q = log_sum_exp(logq);
  for (double lq : logq) out.q_sampler.push_back(std::exp(lq - logz_q));
  return out;
}

// ELBO = sum_R q(R) [log p(X,Y|R) p_prior(R) - log q(R)] for an explicit q
// over the enumerated trees.
inline double elbo_with_q(const EnumeratedPosterior& post, std::span<const double> q) {
  double out = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (q[i] <= 0.0) continue;
    out += q[i] * (post.log_joint[i] - std::log(q[i]));
  }
  return out;
}

// ELBO with q set to the sampler's exact terminating distribution.
inline double elbo(const EventSequence& x, int y, const Vocabulary& vocab,
                   const PolicyParams& theta, const PolicyParams& prior, const RuleWeights& w,
                   const TreeLimits& limits, double cap = 1e6) {
  const EnumeratedPosterior post = enumerate_posterior(x, y, vocab, theta, prior, w, limits, cap);
  return elbo_with_q(post, post.q_sampler);
}

struct RecoveryReport {
  double precision = 0.0;
  double recall = 0.0;
  std::vector<std::pair<std::string, double>> ranked;  // path key -> score
};

// Ranks learned paths by |w_f| times their posterior sampling frequency and
// scores the top k against the planted set.
inline RecoveryReport rule_recovery(const Vocabulary& vocab, const PolicyParams& theta,
                                    const RuleWeights& w,
                                    std::span<const EventSequence> sequences,
                                    std::span<const RulePath> planted, int k,
                                    int samples_per_sequence, Rng& rng) {
  std::unordered_map<std::string, double> freq;
  double total_trees = 0.0;
  for (const EventSequence& x : sequences) {
    const PolicyCondition cond = PolicyCondition::from_sequence(x, vocab.size(), x.label);
    for (int s = 0; s < samples_per_sequence; ++s) {
      const Trajectory traj = sample_trajectory(theta, x.label, &cond, rng);
      total_trees += 1.0;
      std::unordered_map<std::string, bool> seen;
      for (const auto& p : paths(traj.final_tree())) {
        const std::string key = p.key();
        if (!seen[key]) {
          seen[key] = true;
          freq[key] += 1.0;
        }
      }
    }
  }
  RecoveryReport out;
  for (auto& [key, count] : freq)
    out.ranked.emplace_back(key, std::abs(w.weight(key)) * (count / std::max(total_trees, 1.0)));
  std::sort(out.ranked.begin(), out.ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (k <= 0 || planted.empty()) return out;
  std::vector<std::string> planted_keys;
  for (const auto& p : planted) planted_keys.push_back(p.key());
  double hits = 0.0;
  const std::size_t top = std::min<std::size_t>(static_cast<std::size_t>(k), out.ranked.size());
  for (std::size_t i = 0; i < top; ++i)
    hits += std::count(planted_keys.begin(), planted_keys.end(), out.ranked[i].first) > 0;
  out.precision = hits / static_cast<double>(k);
  out.recall = hits / static_cast<double>(planted_keys.size());
  return out;
}

struct MetricsReport {
  double er = 0.0;
  double mr = 0.0;
  double nll = 0.0;  // mean sampled-explanation NLL per sequence
  BaselineMetrics uniform;
  BaselineMetrics majority;
  std::vector<PredictionRecord> records;
};

// Per-sequence work is pure and uses a per-sequence RNG substream, so the
// result is identical for any thread count.
inline MetricsReport evaluate_split(const Dataset& ds, std::span<const std::size_t> idx,
                                    const PolicyParams& theta, const RuleWeights& w,
                                    int n_samples, std::uint64_t seed, int n_threads = 1) {
  MetricsReport rep;
  std::vector<SequenceEval> evals(idx.size());
  auto work = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t p = lo; p < hi; ++p) {
      Rng rng = Rng::substream(seed, idx[p]);
      evals[p] = predict_sequence(ds.sequences[idx[p]], idx[p], ds.vocabulary, theta, w,
                                  n_samples, rng);
    }
  };
  if (n_threads <= 1 || idx.size() < 2) {
    work(0, idx.size());
  } else {
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(n_threads), idx.size());
    std::vector<std::thread> pool;
    const std::size_t chunk = (idx.size() + workers - 1) / workers;
    for (std::size_t t = 0; t < workers; ++t)
      pool.emplace_back(work, t * chunk, std::min(idx.size(), (t + 1) * chunk));
    for (auto& th : pool) th.join();
  }
  for (SequenceEval& ev : evals) {
    rep.nll += ev.mean_nll;
    rep.records.push_back(std::move(ev.record));
  }
  if (!rep.records.empty()) {
    rep.er = error_rate(rep.records);
    rep.mr = mean_rank(rep.records);
    rep.nll /= static_cast<double>(rep.records.size());
  }
  rep.uniform = uniform_baseline(ds.vocabulary.targets.size());
  rep.majority = majority_baseline(ds, idx);
  return rep;
}

}  // namespace treeflow
