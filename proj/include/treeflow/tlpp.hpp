#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "treeflow/core_types.hpp"
#include "treeflow/errors.hpp"
#include "treeflow/logic_tree.hpp"
#include "treeflow/rng.hpp"

namespace treeflow {

// log-intensity exponents are clamped to this band; exp stays in
// [e^-30, e^30] for any inputs.
inline constexpr double kExponentClamp = 30.0;

enum class CountTransform { identity, log1p_counts };

inline const char* to_string(CountTransform t) {
  return t == CountTransform::identity ? "identity" : "log1p";
}

inline CountTransform count_transform_from_string(const std::string& s) {
  if (s == "identity") return CountTransform::identity;
  if (s == "log1p") return CountTransform::log1p_counts;
  throw DataError("bad-config", "count_transform", "expected identity|log1p, got '" + s + "'");
}

// Rule weights w_f keyed by canonical path key, plus a constant base rate
// b_k per event-generating type. Unseen keys read as 0.
struct RuleWeights {
  std::unordered_map<std::string, double> weights;
  std::map<int, double> base;
  CountTransform transform = CountTransform::identity;

  double weight(const std::string& key) const {
    auto it = weights.find(key);
    return it == weights.end() ? 0.0 : it->second;
  }
  double base_rate(int type) const {
    auto it = base.find(type);
    return it == base.end() ? 0.0 : it->second;
  }
};

namespace detail {

inline double apply_transform(CountTransform t, double count) {
  return t == CountTransform::identity ? count : std::log1p(count);
}

// Incremental matcher for one rule body. dp[j] counts strictly
// time-increasing tuples matching the deepest j body predicates among the
// events absorbed so far; feature() is the full-body count.
struct PathMatcher {
  std::vector<int> seq;  // body deepest-first
  std::vector<double> dp;

  explicit PathMatcher(const RulePath& path) {
    for (std::size_t i = path.preds.size(); i > 1; --i) seq.push_back(path.preds[i - 1]);
    dp.assign(seq.size() + 1, 0.0);
    dp[0] = 1.0;
  }

  double feature() const { return dp.back(); }

  // Absorbs a group of simultaneous events; reads come from the pre-group
  // state so ties never pair with each other.
  void absorb(std::span<const Event> group) {
    if (seq.empty()) return;
    std::vector<double> delta(dp.size(), 0.0);
    for (const Event& e : group)
      for (std::size_t j = seq.size(); j >= 1; --j)
        if (seq[j - 1] == e.type) delta[j] += dp[j - 1];
    for (std::size_t j = 0; j < dp.size(); ++j) dp[j] += delta[j];
  }
};

}  // namespace detail

// Number of strictly time-increasing event tuples before `t` matching the
// path body deepest-first. O(L * |path|) dynamic program; history must be
// sorted by time.
inline long long logic_feature(const RulePath& path, const std::vector<Event>& history,
                               double t) {
  detail::PathMatcher m(path);
  std::size_t i = 0;
  while (i < history.size() && history[i].time < t) {
    std::size_t j = i;
    while (j < history.size() && history[j].time == history[i].time) ++j;
    m.absorb(std::span<const Event>(history.data() + i, j - i));
    i = j;
  }
  return static_cast<long long>(m.feature() + 0.5);
}

// Per-type state of the intensity sweep over one sequence.
class IntensitySweep {
 public:
  IntensitySweep(const std::vector<RulePath>& rules, const RuleWeights& w,
                 std::span<const int> types)
      : weights_(&w), types_(types.begin(), types.end()) {
    for (const auto& r : rules) {
      matchers_.emplace_back(r);
      rule_w_.push_back(w.weight(r.key()));
      rule_head_.push_back(r.head());
    }
  }

  std::size_t num_rules() const { return matchers_.size(); }
  const std::vector<int>& types() const { return types_; }
  double rule_feature(std::size_t r) const {
    return detail::apply_transform(weights_->transform, matchers_[r].feature());
  }
  double raw_count(std::size_t r) const { return matchers_[r].feature(); }

  // Unclamped log-intensity exponent for `type` at the current state.
  double exponent(int type) const {
    double s = weights_->base_rate(type);
    for (std::size_t r = 0; r < matchers_.size(); ++r)
      if (rule_head_[r] == type) s += rule_w_[r] * rule_feature(r);
    return s;
  }

  static double clamp(double s) { return std::clamp(s, -kExponentClamp, kExponentClamp); }
  static bool clamped(double s) { return s <= -kExponentClamp || s >= kExponentClamp; }

  double intensity(int type) const { return std::exp(clamp(exponent(type))); }

  double total_intensity() const {
    double sum = 0.0;
    for (int k : types_) sum += intensity(k);
    return sum;
  }

  void absorb(std::span<const Event> group) {
    for (auto& m : matchers_) m.absorb(group);
  }

 private:
  const RuleWeights* weights_;
  std::vector<int> types_;
  std::vector<detail::PathMatcher> matchers_;
  std::vector<double> rule_w_;
  std::vector<int> rule_head_;
};

// Rule-informed intensity of `type` at time t (left limit: only events
// strictly before t are visible).
inline double intensity(int type, double t, const RuleWeights& w,
                        const std::vector<RulePath>& rules,
                        const std::vector<Event>& history) {
  const int types[1] = {type};
  IntensitySweep sweep(rules, w, types);
  std::size_t i = 0;
  while (i < history.size() && history[i].time < t) {
    std::size_t j = i;
    while (j < history.size() && history[j].time == history[i].time &&
           history[j].time < t)
      ++j;
    sweep.absorb(std::span<const Event>(history.data() + i, j - i));
    i = j;
  }
  return sweep.intensity(type);
}

// Gradient of a scalar with respect to (w_f, b_k). d_rules aligns with the
// rules vector handed to the producing call.
struct WGradient {
  std::vector<double> d_rules;
  std::map<int, double> d_base;

  double base(int k) const {
    auto it = d_base.find(k);
    return it == d_base.end() ? 0.0 : it->second;
  }
};

struct NllResult {
  double nll = 0.0;
  WGradient grad;
};

namespace detail {

// Shared sweep for nll and its gradient. Target events contribute log
// terms at their left limit; the compensator integral is an exact sum over
// inter-event segments on which every intensity is constant. Clamped
// exponents contribute zero gradient.
inline NllResult nll_impl(const EventSequence& seq, const Vocabulary& vocab,
                          const RuleWeights& w, const std::vector<RulePath>& rules,
                          bool want_grad) {
  NllResult out;
  IntensitySweep sweep(rules, w, vocab.targets);
  if (want_grad) {
    out.grad.d_rules.assign(rules.size(), 0.0);
    for (int k : vocab.targets) out.grad.d_base[k] = 0.0;
  }

  std::vector<std::size_t> head_rules;  // scratch
  const auto& events = seq.events;
  const double T = seq.horizon;

  auto add_segment = [&](double dt) {
    if (dt <= 0.0) return;
    for (int k : vocab.targets) {
      const double s = sweep.exponent(k);
      const double lam = std::exp(IntensitySweep::clamp(s));
      out.nll += lam * dt;
      if (want_grad && !IntensitySweep::clamped(s)) {
        out.grad.d_base[k] += lam * dt;
        for (std::size_t r = 0; r < rules.size(); ++r)
          if (rules[r].head() == k) out.grad.d_rules[r] += sweep.rule_feature(r) * lam * dt;
      }
    }
  };

  double prev = 0.0;
  std::size_t i = 0;
  while (i < events.size()) {
    std::size_t j = i;
    while (j < events.size() && events[j].time == events[i].time) ++j;
    const double t = events[i].time;
    add_segment(t - prev);
    for (std::size_t e = i; e < j; ++e) {
      const int k = events[e].type;
      if (!vocab.is_target(k)) continue;
      const double s = sweep.exponent(k);
      out.nll -= IntensitySweep::clamp(s);
      if (want_grad && !IntensitySweep::clamped(s)) {
        out.grad.d_base[k] -= 1.0;
        for (std::size_t r = 0; r < rules.size(); ++r)
          if (rules[r].head() == k) out.grad.d_rules[r] -= sweep.rule_feature(r);
      }
    }
    sweep.absorb(std::span<const Event>(events.data() + i, j - i));
    prev = t;
    i = j;
  }
  add_segment(T - prev);
  return out;
}

}  // namespace detail

inline double nll(const EventSequence& seq, const Vocabulary& vocab, const RuleWeights& w,
                  const std::vector<RulePath>& rules) {
  return detail::nll_impl(seq, vocab, w, rules, false).nll;
}

inline double nll(const EventSequence& seq, const Vocabulary& vocab, const RuleWeights& w,
                  const LogicTree& tree) {
  return nll(seq, vocab, w, paths(tree));
}

inline NllResult nll_with_grad(const EventSequence& seq, const Vocabulary& vocab,
                               const RuleWeights& w, const std::vector<RulePath>& rules) {
  return detail::nll_impl(seq, vocab, w, rules, true);
}

// Normalized per-target intensity at the horizon: p(Y = k) = lambda_k(T) /
// sum_k' lambda_k'(T). Entries align with vocab.targets.
inline std::vector<double> predict_label_dist(const EventSequence& seq,
                                              const Vocabulary& vocab, const RuleWeights& w,
                                              const std::vector<RulePath>& rules) {
  IntensitySweep sweep(rules, w, vocab.targets);
  std::size_t i = 0;
  const auto& events = seq.events;
  while (i < events.size() && events[i].time < seq.horizon) {
    std::size_t j = i;
    while (j < events.size() && events[j].time == events[i].time &&
           events[j].time < seq.horizon)
      ++j;
    sweep.absorb(std::span<const Event>(events.data() + i, j - i));
    i = j;
  }
  std::vector<double> exps;
  double m = -1e300;
  for (int k : vocab.targets) {
    exps.push_back(IntensitySweep::clamp(sweep.exponent(k)));
    m = std::max(m, exps.back());
  }
  double z = 0.0;
  for (double& e : exps) {
    e = std::exp(e - m);
    z += e;
  }
  for (double& e : exps) e /= z;
  return exps;
}

inline std::vector<double> predict_label_dist(const EventSequence& seq,
                                              const Vocabulary& vocab, const RuleWeights& w,
                                              const LogicTree& tree) {
  return predict_label_dist(seq, vocab, w, paths(tree));
}

// Gradient of log p(Y = label | X, R) with respect to (w, b); shares the
// clamp convention with nll.
inline WGradient predict_logprob_grad(const EventSequence& seq, const Vocabulary& vocab,
                                      const RuleWeights& w,
                                      const std::vector<RulePath>& rules, int label) {
  IntensitySweep sweep(rules, w, vocab.targets);
  std::size_t i = 0;
  const auto& events = seq.events;
  while (i < events.size() && events[i].time < seq.horizon) {
    std::size_t j = i;
    while (j < events.size() && events[j].time == events[i].time &&
           events[j].time < seq.horizon)
      ++j;
    sweep.absorb(std::span<const Event>(events.data() + i, j - i));
    i = j;
  }
  const std::vector<double> p = predict_label_dist(seq, vocab, w, rules);
  WGradient g;
  g.d_rules.assign(rules.size(), 0.0);
  for (std::size_t ki = 0; ki < vocab.targets.size(); ++ki) {
    const int k = vocab.targets[ki];
    if (IntensitySweep::clamped(sweep.exponent(k))) {
      g.d_base[k] = 0.0;
      continue;
    }
    g.d_base[k] = (k == label ? 1.0 : 0.0) - p[ki];
    for (std::size_t r = 0; r < rules.size(); ++r)
      if (rules[r].head() == k)
        g.d_rules[r] += ((k == label ? 1.0 : 0.0) - p[ki]) * sweep.rule_feature(r);
  }
  return g;
}

// Exact sampler. With constant base rates every intensity is constant
// between events, so competing exponentials sample the process exactly:
// gap ~ Exp(total rate), type drawn proportionally to per-type rates.
// Types that can occur are exactly the keys of w.base.
inline std::vector<Event> simulate(const std::vector<RulePath>& rules, const RuleWeights& w,
                                   double horizon, Rng& rng, std::size_t max_events = 10000) {
  std::vector<int> types;
  for (const auto& [k, b] : w.base) types.push_back(k);
  IntensitySweep sweep(rules, w, types);
  std::vector<Event> events;
  std::vector<double> lambdas(types.size());
  double t = 0.0;
  while (true) {
    double total = 0.0;
    for (std::size_t k = 0; k < types.size(); ++k) {
      lambdas[k] = sweep.intensity(types[k]);
      total += lambdas[k];
    }
    t += rng.exponential(total);
    if (t >= horizon) break;
    if (events.size() >= max_events)
      throw ExplosionError("simulation exceeded " + std::to_string(max_events) +
                           " events before the horizon");
    const int type = types[rng.categorical(lambdas)];
    events.push_back({t, type});
    sweep.absorb(std::span<const Event>(&events.back(), 1));
  }
  return events;
}

// Ogata thinning against a user-supplied dominating rate; for intensity
// models that are not piecewise constant. `total_bound(t)` must dominate
// the total intensity on [t, next event].
inline std::vector<Event> simulate_thinning(const std::vector<RulePath>& rules,
                                            const RuleWeights& w, double horizon, Rng& rng,
                                            const std::function<double(double)>& total_bound,
                                            std::size_t max_events = 10000) {
  std::vector<int> types;
  for (const auto& [k, b] : w.base) types.push_back(k);
  IntensitySweep sweep(rules, w, types);
  std::vector<Event> events;
  std::vector<double> lambdas(types.size());
  double t = 0.0;
  while (true) {
    const double bar = total_bound(t);
    if (!(bar > 0.0)) throw std::invalid_argument("thinning bound must be positive");
    t += rng.exponential(bar);
    if (t >= horizon) break;
    double total = 0.0;
    for (std::size_t k = 0; k < types.size(); ++k) {
      lambdas[k] = sweep.intensity(types[k]);
      total += lambdas[k];
    }
    if (total > bar * (1.0 + 1e-9))
      throw std::invalid_argument("thinning bound does not dominate the intensity");
    if (rng.uniform() * bar > total) continue;  // rejected candidate
    if (events.size() >= max_events)
      throw ExplosionError("simulation exceeded " + std::to_string(max_events) +
                           " events before the horizon");
    const int type = types[rng.categorical(lambdas)];
    events.push_back({t, type});
    sweep.absorb(std::span<const Event>(&events.back(), 1));
  }
  return events;
}

// Turns a raw simulated stream into a labeled observation: the last
// target-typed event becomes the label, the history is everything strictly
// before it and the horizon is its time. Returns nullopt when no target
// event occurred.
inline std::optional<EventSequence> label_from_last_target(const std::vector<Event>& events,
                                                           const Vocabulary& vocab) {
  for (std::size_t i = events.size(); i > 0; --i) {
    const Event& e = events[i - 1];
    if (!vocab.is_target(e.type)) continue;
    EventSequence seq;
    seq.label = e.type;
    seq.horizon = e.time;
    for (const Event& h : events)
      if (h.time < e.time) seq.events.push_back(h);
    return seq;
  }
  return std::nullopt;
}

}  // namespace treeflow
