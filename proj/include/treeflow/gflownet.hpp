#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "treeflow/core_types.hpp"
#include "treeflow/errors.hpp"
#include "treeflow/logic_tree.hpp"
#include "treeflow/policy.hpp"
#include "treeflow/tlpp.hpp"

namespace treeflow {

// Rewards below this floor are clamped so residuals stay finite for
// pathological trees.
inline constexpr double kLogRewardFloor = -1e6;

// Unnormalized posterior score of a tree given one observation:
// log r = log p_w(X | R) + log p(Y | X, R) + log p_prior(R).
// Non-terminal states are scored on their content as if terminated
// (forward-looking reward).
inline double log_reward(const LogicTree& state, const EventSequence& x, int y,
                         const Vocabulary& vocab, const RuleWeights& w,
                         const PolicyParams& prior) {
  const std::vector<RulePath> rules = paths(state);
  const double log_px = -nll(x, vocab, w, rules);
  const std::vector<double> pred = predict_label_dist(x, vocab, w, rules);
  const auto it = std::lower_bound(vocab.targets.begin(), vocab.targets.end(), y);
  const std::size_t yi = static_cast<std::size_t>(it - vocab.targets.begin());
  const double log_py = std::log(std::max(pred[yi], 1e-300));
  const double log_prior = tree_logprob(prior, state, nullptr);
  return std::max(log_px + log_py + log_prior, kLogRewardFloor);
}

// Per-state log-rewards along a trajectory under fixed (w, prior).
using RewardFn = std::function<double(const LogicTree&)>;

inline std::vector<double> reward_trace(const Trajectory& traj, const RewardFn& log_r) {
  std::vector<double> out;
  out.reserve(traj.states.size());
  for (const auto& s : traj.states) out.push_back(std::max(log_r(s), kLogRewardFloor));
  return out;
}

// Subtrajectory-balance residuals over every state pair (i < j):
//   res_ij = log r_i + sum_{k=i+1}^{j} log q(R_k|R_{k-1}) + log q(stop|R_j)
//          - log r_j - log q(stop|R_i).
// With level-wise growth the backward probability is one, so only forward
// terms appear. The loss is the sum of squared residuals.
struct SubTBParts {
  std::vector<double> log_r;      // per state, size t+1
  std::vector<double> log_trans;  // per transition, size t
  std::vector<double> log_stop;   // per state, size t+1
};

struct SubTBCore {
  double loss = 0.0;
  std::vector<double> coef_trans;  // dL / d log_trans[k]
  std::vector<double> coef_stop;   // dL / d log_stop[i]
};

inline SubTBCore subtb_core(const SubTBParts& parts) {
  const std::size_t n = parts.log_r.size();
  if (parts.log_stop.size() != n || parts.log_trans.size() + 1 != n)
    throw std::invalid_argument("subtb_core: misaligned trace");
  SubTBCore out;
  out.coef_trans.assign(parts.log_trans.size(), 0.0);
  out.coef_stop.assign(n, 0.0);
  std::vector<double> prefix(n, 0.0);  // prefix[i] = sum of log_trans[0..i)
  for (std::size_t i = 1; i < n; ++i) prefix[i] = prefix[i - 1] + parts.log_trans[i - 1];
  for (std::size_t i = 0; i + 1 < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double res = parts.log_r[i] - parts.log_r[j] + (prefix[j] - prefix[i]) +
                         parts.log_stop[j] - parts.log_stop[i];
      out.loss += res * res;
      const double g = 2.0 * res;
      for (std::size_t k = i; k < j; ++k) out.coef_trans[k] += g;
      out.coef_stop[j] += g;
      out.coef_stop[i] -= g;
    }
  }
  return out;
}

struct SubTBLoss {
  double loss = 0.0;
  Matrix grad;
};

inline SubTBParts subtb_parts(const PolicyParams& theta, const Trajectory& traj,
                              std::span<const double> log_rewards,
                              const PolicyCondition* cond) {
  if (log_rewards.size() != traj.states.size())
    throw std::invalid_argument("subtb: reward trace misaligned with states");
  if (!traj.states.back().terminal())
    throw std::invalid_argument("subtb: trajectory must be terminal");
  SubTBParts parts;
  parts.log_r.assign(log_rewards.begin(), log_rewards.end());
  for (std::size_t k = 0; k + 1 < traj.states.size(); ++k)
    parts.log_trans.push_back(
        transition_logprob(theta, traj.states[k], traj.states[k + 1], cond));
  for (const auto& s : traj.states) parts.log_stop.push_back(stop_logprob(theta, s, cond));
  return parts;
}

inline double subtb_loss_value(const PolicyParams& theta, const Trajectory& traj,
                               std::span<const double> log_rewards,
                               const PolicyCondition* cond) {
  return subtb_core(subtb_parts(theta, traj, log_rewards, cond)).loss;
}

// Loss and its exact gradient over theta. `scale` multiplies both (for batch
// averaging).
inline void subtb_loss_grad(const PolicyParams& theta, const Trajectory& traj,
                            std::span<const double> log_rewards, const PolicyCondition* cond,
                            SubTBLoss& accum, double scale = 1.0) {
  const SubTBParts parts = subtb_parts(theta, traj, log_rewards, cond);
  const SubTBCore core = subtb_core(parts);
  accum.loss += scale * core.loss;
  for (std::size_t k = 0; k + 1 < traj.states.size(); ++k)
    if (core.coef_trans[k] != 0.0)
      transition_logprob(theta, traj.states[k], traj.states[k + 1], cond, &accum.grad,
                         scale * core.coef_trans[k]);
  for (std::size_t i = 0; i < traj.states.size(); ++i)
    if (core.coef_stop[i] != 0.0)
      stop_logprob(theta, traj.states[i], cond, &accum.grad, scale * core.coef_stop[i]);
}

inline SubTBLoss subtb_loss(const PolicyParams& theta, const Trajectory& traj,
                            std::span<const double> log_rewards,
                            const PolicyCondition* cond) {
  SubTBLoss out;
  out.grad = Matrix(theta.weights.rows(), theta.weights.cols(), 0.0);
  subtb_loss_grad(theta, traj, log_rewards, cond, out);
  return out;
}

enum class OptimizerKind { sgd, rms };

inline OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "rms") return OptimizerKind::rms;
  throw DataError("bad-config", "optimizer", "expected sgd|rms, got '" + s + "'");
}

struct EStepConfig {
  double lr = 5e-4;
  double ema_beta = 0.9;
  Exploration explore;
  OptimizerKind optimizer = OptimizerKind::rms;
  double rms_decay = 0.9;
  double rms_eps = 1e-8;
};

// Sampler parameters plus optimizer accumulators and the moving-average
// SubTB loss used for adaptive E-step scheduling.
struct EStepState {
  PolicyParams theta;
  Matrix rms_accum;
  double ema_loss = -1.0;  // negative until the first update
  long long step = 0;

  static EStepState make(const PolicyParams& theta0) {
    EStepState s;
    s.theta = theta0;
    s.rms_accum = Matrix(theta0.weights.rows(), theta0.weights.cols(), 0.0);
    return s;
  }
};

// One training item: root predicate, conditioning summary and the frozen
// reward for this step.
struct EStepItem {
  int root = -1;
  PolicyCondition cond;
  RewardFn log_r;
};

inline EStepItem make_estep_item(const EventSequence& x, const Vocabulary& vocab,
                                 const RuleWeights& w, const PolicyParams& prior) {
  EStepItem item;
  item.root = x.label;
  item.cond = PolicyCondition::from_sequence(x, vocab.size(), x.label);
  item.log_r = [&x, &vocab, &w, &prior](const LogicTree& state) {
    return log_reward(state, x, x.label, vocab, w, prior);
  };
  return item;
}

struct EStepStats {
  double batch_loss = 0.0;
  double batch_mean_log_reward = 0.0;
  int trees_sampled = 0;
  double mean_tree_size = 0.0;
  std::vector<Trajectory> trajectories;  // one per item, for reuse/inspection
};

// Samples one trajectory per item, accumulates the mean SubTB gradient and
// applies a single optimizer step. Loss statistics are taken at the
// pre-update parameters.
inline EStepStats estep_update(EStepState& state, std::span<const EStepItem> batch,
                               const EStepConfig& cfg, Rng& rng) {
  EStepStats stats;
  if (batch.empty()) return stats;
  SubTBLoss accum;
  accum.grad = Matrix(state.theta.weights.rows(), state.theta.weights.cols(), 0.0);
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (const EStepItem& item : batch) {
    Trajectory traj = sample_trajectory(state.theta, item.root, &item.cond, rng, cfg.explore);
    const std::vector<double> rewards = reward_trace(traj, item.log_r);
    subtb_loss_grad(state.theta, traj, rewards, &item.cond, accum, scale);
    stats.batch_mean_log_reward += rewards.back() * scale;
    stats.mean_tree_size += static_cast<double>(traj.final_tree().nodes().size()) * scale;
    ++stats.trees_sampled;
    stats.trajectories.push_back(std::move(traj));
  }
  stats.batch_loss = accum.loss;

  auto& w = state.theta.weights;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double g = accum.grad.at_flat(i);
    if (cfg.optimizer == OptimizerKind::rms) {
      double& acc = state.rms_accum.at_flat(i);
      acc = cfg.rms_decay * acc + (1.0 - cfg.rms_decay) * g * g;
      w.at_flat(i) -= cfg.lr * g / (std::sqrt(acc) + cfg.rms_eps);
    } else {
      w.at_flat(i) -= cfg.lr * g;
    }
  }
  state.ema_loss = state.ema_loss < 0.0
                       ? stats.batch_loss
                       : cfg.ema_beta * state.ema_loss + (1.0 - cfg.ema_beta) * stats.batch_loss;
  ++state.step;
  return stats;
}

}  // namespace treeflow
