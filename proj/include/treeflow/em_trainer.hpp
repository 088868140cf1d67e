#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "treeflow/core_types.hpp"
#include "treeflow/errors.hpp"
#include "treeflow/eval.hpp"
#include "treeflow/gflownet.hpp"
#include "treeflow/policy.hpp"
#include "treeflow/tlpp.hpp"

namespace treeflow {

struct TrainConfig {
  int epochs = 10;
  int batch_size = 8;
  double lr_policy = 5e-4;   // sampler and prior updates
  double lr_logic = 1e-3;    // rule weight and base rate updates
  double alpha = 1.0;        // E-step loss threshold for adaptive M-steps
  int alternate_every = 1;   // forced M-step frequency
  int depth = 3;
  int width = 3;
  double ema_beta = 0.9;
  double epsilon = 0.05;  // decayed linearly to 0 over the run
  double temperature = 1.0;
  int top_k = 0;
  std::uint64_t seed = 0;
  int m_step_samples = 4;
  int predict_samples = 8;
  std::string optimizer = "rms";
  std::string count_transform = "identity";
  double lr_decay = 1.0;  // multiplicative per-epoch decay of both rates

  TreeLimits limits() const { return {depth, width}; }

  void validate() const {
    if (epochs < 0) throw DataError("bad-config", "epochs", "must be >= 0");
    if (batch_size < 1) throw DataError("bad-config", "batch_size", "must be >= 1");
    if (!(lr_policy > 0.0) || !(lr_logic > 0.0))
      throw DataError("bad-config", "lr", "learning rates must be > 0");
    if (!(alpha > 0.0)) throw DataError("bad-config", "alpha", "must be > 0");
    if (depth < 1) throw DataError("bad-config", "depth", "must be >= 1");
    if (width < 1) throw DataError("bad-config", "width", "must be >= 1");
    if (alternate_every < 1) throw DataError("bad-config", "alternate_every", "must be >= 1");
    if (m_step_samples < 1) throw DataError("bad-config", "m_step_samples", "must be >= 1");
    if (!(lr_decay > 0.0) || lr_decay > 1.0)
      throw DataError("bad-config", "lr_decay", "must be in (0, 1]");
    optimizer_from_string(optimizer);
    count_transform_from_string(count_transform);
  }
};

inline void to_json(json& j, const TrainConfig& c) {
  j = json{{"epochs", c.epochs},
           {"batch_size", c.batch_size},
           {"lr_policy", c.lr_policy},
           {"lr_logic", c.lr_logic},
           {"alpha", c.alpha},
           {"alternate_every", c.alternate_every},
           {"depth", c.depth},
           {"width", c.width},
           {"ema_beta", c.ema_beta},
           {"epsilon", c.epsilon},
           {"temperature", c.temperature},
           {"top_k", c.top_k},
           {"seed", c.seed},
           {"m_step_samples", c.m_step_samples},
           {"predict_samples", c.predict_samples},
           {"optimizer", c.optimizer},
           {"count_transform", c.count_transform},
           {"lr_decay", c.lr_decay}};
}

inline void from_json(const json& j, TrainConfig& c) {
  TrainConfig defaults;
  c.epochs = j.value("epochs", defaults.epochs);
  c.batch_size = j.value("batch_size", defaults.batch_size);
  c.lr_policy = j.value("lr_policy", defaults.lr_policy);
  c.lr_logic = j.value("lr_logic", defaults.lr_logic);
  c.alpha = j.value("alpha", defaults.alpha);
  c.alternate_every = j.value("alternate_every", defaults.alternate_every);
  c.depth = j.value("depth", defaults.depth);
  c.width = j.value("width", defaults.width);
  c.ema_beta = j.value("ema_beta", defaults.ema_beta);
  c.epsilon = j.value("epsilon", defaults.epsilon);
  c.temperature = j.value("temperature", defaults.temperature);
  c.top_k = j.value("top_k", defaults.top_k);
  c.seed = j.value("seed", defaults.seed);
  c.m_step_samples = j.value("m_step_samples", defaults.m_step_samples);
  c.predict_samples = j.value("predict_samples", defaults.predict_samples);
  c.optimizer = j.value("optimizer", defaults.optimizer);
  c.count_transform = j.value("count_transform", defaults.count_transform);
  c.lr_decay = j.value("lr_decay", defaults.lr_decay);
}

// Monte Carlo gradient of E_{R~q}[log p_w(X|R) + log p(Y|X,R) + log p_phi(R)]
// over a batch of observations with their sampled trees.
struct MStepItem {
  const EventSequence* x = nullptr;
  std::vector<LogicTree> trees;
};

struct MStepGrads {
  std::unordered_map<std::string, double> d_weights;  // ascent direction for w_f
  std::map<int, double> d_base;
  Matrix d_prior;      // ascent direction for the prior policy
  double mean_nll = 0.0;
  double mean_objective = 0.0;
};

inline MStepGrads m_step_gradients(std::span<const MStepItem> items, const Vocabulary& vocab,
                                   const RuleWeights& w, const PolicyParams& prior) {
  MStepGrads g;
  g.d_prior = Matrix(prior.weights.rows(), prior.weights.cols(), 0.0);
  double n_total = 0.0;
  for (const auto& item : items)
    n_total += static_cast<double>(item.trees.size());
  if (n_total == 0.0) return g;
  const double scale = 1.0 / n_total;
  for (const auto& item : items) {
    const EventSequence& x = *item.x;
    const auto it = std::lower_bound(vocab.targets.begin(), vocab.targets.end(), x.label);
    const std::size_t yi = static_cast<std::size_t>(it - vocab.targets.begin());
    for (const LogicTree& tree : item.trees) {
      const std::vector<RulePath> rules = paths(tree);
      const NllResult nr = nll_with_grad(x, vocab, w, rules);
      const WGradient pg = predict_logprob_grad(x, vocab, w, rules, x.label);
      for (std::size_t r = 0; r < rules.size(); ++r) {
        const std::string key = rules[r].key();
        g.d_weights[key] += scale * (-nr.grad.d_rules[r] + pg.d_rules[r]);
      }
      for (int k : vocab.targets)
        g.d_base[k] += scale * (-nr.grad.base(k) + pg.base(k));
      const double log_prior = tree_logprob_grad(prior, tree, nullptr, g.d_prior, scale);
      g.mean_nll += scale * nr.nll;
      g.mean_objective +=
          scale * (-nr.nll + std::log(std::max(predict_label_dist(x, vocab, w, rules)[yi], 1e-300)) +
                   log_prior);
    }
  }
  return g;
}

// Gradient-ascent step on (w, prior). Rule weights are created on first
// sight, initialized to zero so unseen rules are intensity-neutral.
inline void apply_m_step(const MStepGrads& g, RuleWeights& w, PolicyParams& prior,
                         const TrainConfig& cfg) {
  for (const auto& [key, dw] : g.d_weights) w.weights[key] += cfg.lr_logic * dw;
  for (const auto& [k, db] : g.d_base) w.base[k] += cfg.lr_logic * db;
  for (std::size_t i = 0; i < prior.weights.size(); ++i)
    prior.weights.at_flat(i) += cfg.lr_policy * g.d_prior.at_flat(i);
}

// Per-parameter mean-square accumulators for the M-step, mirroring the
// E-step optimizer. The exponential intensity link makes plain GD overshoot
// once several correlated rule weights grow together; normalized steps stay
// bounded by the learning rate.
struct MStepOpt {
  std::unordered_map<std::string, double> acc_weights;
  std::map<int, double> acc_base;
  Matrix acc_prior;
  double decay = 0.9;
  double eps = 1e-8;

  void apply(const MStepGrads& g, RuleWeights& w, PolicyParams& prior,
             const TrainConfig& cfg) {
    if (acc_prior.size() == 0) acc_prior = Matrix(g.d_prior.rows(), g.d_prior.cols(), 0.0);
    for (const auto& [key, dw] : g.d_weights) {
      double& acc = acc_weights[key];
      acc = decay * acc + (1.0 - decay) * dw * dw;
      w.weights[key] += cfg.lr_logic * dw / (std::sqrt(acc) + eps);
    }
    for (const auto& [k, db] : g.d_base) {
      double& acc = acc_base[k];
      acc = decay * acc + (1.0 - decay) * db * db;
      w.base[k] += cfg.lr_logic * db / (std::sqrt(acc) + eps);
    }
    for (std::size_t i = 0; i < prior.weights.size(); ++i) {
      const double dp = g.d_prior.at_flat(i);
      double& acc = acc_prior.at_flat(i);
      acc = decay * acc + (1.0 - decay) * dp * dp;
      prior.weights.at_flat(i) += cfg.lr_policy * dp / (std::sqrt(acc) + eps);
    }
  }
};

// Full M-step: fresh trees from the sampler, then one ascent step. With the
// adaptive optimizer an MStepOpt carries the accumulators between calls.
inline MStepGrads m_step(std::span<const EventSequence* const> batch,
                         const PolicyParams& theta, RuleWeights& w, PolicyParams& prior,
                         const Vocabulary& vocab, const TrainConfig& cfg, Rng& rng,
                         MStepOpt* opt = nullptr) {
  std::vector<MStepItem> items;
  for (const EventSequence* x : batch) {
    MStepItem item;
    item.x = x;
    const PolicyCondition cond = PolicyCondition::from_sequence(*x, vocab.size(), x->label);
    for (int s = 0; s < cfg.m_step_samples; ++s)
      item.trees.push_back(sample_trajectory(theta, x->label, &cond, rng).final_tree());
    items.push_back(std::move(item));
  }
  MStepGrads g = m_step_gradients(items, vocab, w, prior);
  if (opt && optimizer_from_string(cfg.optimizer) == OptimizerKind::rms)
    opt->apply(g, w, prior, cfg);
  else
    apply_m_step(g, w, prior, cfg);
  return g;
}

struct EpochMetrics {
  int epoch = 0;
  double dev_nll = 0.0;
  double dev_er = 0.0;
  double dev_mr = 0.0;
  double ema_subtb = 0.0;
};

struct TrainedModel {
  Vocabulary vocabulary;
  TrainConfig config;
  PolicyParams theta;
  PolicyParams prior;
  RuleWeights w;
  long long global_step = 0;
  double ema_subtb = -1.0;
  std::vector<EpochMetrics> history;
};

inline TrainedModel init_model(const Vocabulary& vocab, const TrainConfig& cfg) {
  TrainedModel m;
  m.vocabulary = vocab;
  m.config = cfg;
  m.prior = PolicyParams::make(vocab.size(), cfg.limits(), false);
  m.theta = PolicyParams::posterior_from_prior(m.prior);
  for (int k : vocab.targets) m.w.base[k] = 0.0;
  m.w.transform = count_transform_from_string(cfg.count_transform);
  return m;
}

// Base rates start at each target's empirical log-rate so the first M-steps
// correct rule weights instead of compensating for a wildly misscaled
// baseline intensity.
inline void init_base_rates_from_data(RuleWeights& w, const Dataset& ds,
                                      std::span<const std::size_t> train_idx) {
  std::map<int, double> counts;
  double duration = 0.0;
  for (std::size_t i : train_idx) {
    const EventSequence& s = ds.sequences[i];
    duration += s.horizon;
    for (const Event& e : s.events)
      if (ds.vocabulary.is_target(e.type)) counts[e.type] += 1.0;
  }
  if (duration <= 0.0) return;
  for (int k : ds.vocabulary.targets)
    w.base[k] = std::log(std::max(counts[k], 0.5) / duration);
}

// Receives one row per E-step, M-step and epoch; the CLI streams these to
// CSV files.
struct TrainLogger {
  virtual void estep_row(long long step, double ema, double mean_log_reward, int trees,
                         double mean_tree_size) {}
  virtual void mstep_row(long long step, double mean_nll) {}
  virtual void epoch_row(const EpochMetrics&) {}
  virtual ~TrainLogger() = default;
};

// Amortized EM: each step draws a batch, performs one SubTB gradient step on
// the sampler, and runs an M-step when the loss moving average falls below
// alpha or the forced-alternation counter fires. Returns the best-dev model.
inline TrainedModel train(const Dataset& ds, const TrainConfig& cfg,
                          TrainLogger* logger = nullptr,
                          const TrainedModel* resume = nullptr) {
  cfg.validate();
  const std::vector<std::size_t> train_idx = ds.indices_of(Split::train);
  const std::vector<std::size_t> dev_idx = ds.indices_of(Split::dev);
  if (train_idx.empty()) throw DataError("no-train-split", "dataset", "no train sequences");

  TrainedModel model = resume ? *resume : init_model(ds.vocabulary, cfg);
  model.config = cfg;
  if (!resume) init_base_rates_from_data(model.w, ds, train_idx);
  EStepState estate = EStepState::make(model.theta);
  if (resume) estate.ema_loss = resume->ema_subtb;

  const long long steps_per_epoch =
      (static_cast<long long>(train_idx.size()) + cfg.batch_size - 1) / cfg.batch_size;
  const long long total_steps = steps_per_epoch * cfg.epochs;

  auto eval_dev = [&](int epoch) {
    EpochMetrics em;
    em.epoch = epoch;
    em.ema_subtb = std::max(estate.ema_loss, 0.0);
    if (!dev_idx.empty()) {
      const MetricsReport rep = evaluate_split(ds, dev_idx, estate.theta, model.w,
                                               cfg.predict_samples, Rng::mix(cfg.seed, 0xe7a1));
      em.dev_nll = rep.nll;
      em.dev_er = rep.er;
      em.dev_mr = rep.mr;
    }
    return em;
  };

  // later epochs win ties so an untrained epoch-0 model never shadows an
  // equally scoring trained one
  auto better = [](const EpochMetrics& a, const EpochMetrics& b) {
    if (a.dev_er != b.dev_er) return a.dev_er < b.dev_er;
    if (a.dev_mr != b.dev_mr) return a.dev_mr < b.dev_mr;
    return a.dev_nll <= b.dev_nll;
  };

  EpochMetrics best = eval_dev(0);
  model.history.push_back(best);
  if (logger) logger->epoch_row(best);
  TrainedModel best_model = model;
  best_model.theta = estate.theta;

  Rng train_rng = Rng::substream(cfg.seed, 0x7ea1);
  MStepOpt mopt;
  EStepConfig ecfg;
  ecfg.lr = cfg.lr_policy;
  ecfg.ema_beta = cfg.ema_beta;
  ecfg.optimizer = optimizer_from_string(cfg.optimizer);
  ecfg.explore.temperature = cfg.temperature;
  ecfg.explore.top_k = cfg.top_k;

  long long local_step = 0;
  TrainConfig step_cfg = cfg;  // carries the decayed learning rates
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double decay = std::pow(cfg.lr_decay, epoch - 1);
    ecfg.lr = cfg.lr_policy * decay;
    step_cfg.lr_policy = cfg.lr_policy * decay;
    step_cfg.lr_logic = cfg.lr_logic * decay;
    std::vector<std::size_t> order = train_idx;
    Rng shuffle_rng = Rng::substream(cfg.seed, 0x5f0 + static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.uniform_index(i)]);

    for (long long b = 0; b < steps_per_epoch; ++b) {
      std::vector<const EventSequence*> batch;
      std::vector<EStepItem> items;
      for (int k = 0; k < cfg.batch_size; ++k) {
        const std::size_t idx = order[(static_cast<std::size_t>(b) * cfg.batch_size + k) % order.size()];
        batch.push_back(&ds.sequences[idx]);
      }
      for (const EventSequence* x : batch)
        items.push_back(make_estep_item(*x, ds.vocabulary, model.w, model.prior));

      ecfg.explore.epsilon =
          total_steps > 0
              ? cfg.epsilon * (1.0 - static_cast<double>(local_step) / static_cast<double>(total_steps))
              : 0.0;
      const EStepStats stats = estep_update(estate, items, ecfg, train_rng);
      ++local_step;
      ++model.global_step;
      if (!std::isfinite(estate.ema_loss))
        throw DivergenceError("SubTB moving average diverged at step " +
                              std::to_string(model.global_step) +
                              " (batch loss " + std::to_string(stats.batch_loss) +
                              ", mean log reward " + std::to_string(stats.batch_mean_log_reward) + ")");
      if (logger)
        logger->estep_row(model.global_step, estate.ema_loss, stats.batch_mean_log_reward,
                          stats.trees_sampled, stats.mean_tree_size);

      if (estate.ema_loss < cfg.alpha || local_step % cfg.alternate_every == 0) {
        const MStepGrads g = m_step(batch, estate.theta, model.w, model.prior, ds.vocabulary,
                                    step_cfg, train_rng, &mopt);
        if (logger) logger->mstep_row(model.global_step, g.mean_nll);
      }
    }

    EpochMetrics em = eval_dev(epoch);
    model.history.push_back(em);
    if (logger) logger->epoch_row(em);
    if (better(em, best)) {
      best = em;
      best_model = model;
      best_model.theta = estate.theta;
    }
  }
  best_model.ema_subtb = estate.ema_loss;
  best_model.history = model.history;
  best_model.global_step = model.global_step;
  return best_model;
}

// --- model serialization ---

inline json matrix_to_json(const Matrix& m) {
  return json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.data()}};
}

inline Matrix matrix_from_json(const json& j) {
  Matrix m(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>());
  m.data() = j.at("data").get<std::vector<double>>();
  if (m.data().size() != m.rows() * m.cols())
    throw DataError("parse", "matrix", "data length does not match shape");
  return m;
}

inline json policy_to_json(const PolicyParams& p) {
  return json{{"n_preds", p.n_preds},
              {"max_depth", p.max_depth},
              {"max_width", p.max_width},
              {"conditioned", p.conditioned},
              {"weights", matrix_to_json(p.weights)}};
}

inline PolicyParams policy_from_json(const json& j) {
  PolicyParams p;
  p.n_preds = j.at("n_preds").get<int>();
  p.max_depth = j.at("max_depth").get<int>();
  p.max_width = j.at("max_width").get<int>();
  p.conditioned = j.at("conditioned").get<bool>();
  p.weights = matrix_from_json(j.at("weights"));
  return p;
}

inline json model_to_json(const TrainedModel& m) {
  json j;
  j["vocabulary"] = json::array();
  for (const auto& p : m.vocabulary.predicates)
    j["vocabulary"].push_back({{"id", p.id}, {"name", p.name}});
  j["targets"] = m.vocabulary.targets;
  j["config"] = m.config;
  j["theta"] = policy_to_json(m.theta);
  j["prior"] = policy_to_json(m.prior);
  j["rule_weights"] = json::object();
  for (const auto& [key, v] : m.w.weights) j["rule_weights"][key] = v;
  j["base_rates"] = json::object();
  for (const auto& [k, v] : m.w.base) j["base_rates"][std::to_string(k)] = v;
  j["count_transform"] = to_string(m.w.transform);
  j["global_step"] = m.global_step;
  j["ema_subtb"] = m.ema_subtb;
  j["history"] = json::array();
  for (const auto& em : m.history)
    j["history"].push_back({{"epoch", em.epoch},
                            {"dev_nll", em.dev_nll},
                            {"dev_er", em.dev_er},
                            {"dev_mr", em.dev_mr},
                            {"ema_subtb", em.ema_subtb}});
  return j;
}

inline TrainedModel model_from_json(const json& j) {
  TrainedModel m;
  std::vector<std::string> names;
  for (const auto& e : j.at("vocabulary")) names.push_back(e.at("name").get<std::string>());
  m.vocabulary = Vocabulary::from_names(names, j.at("targets").get<std::vector<int>>());
  m.config = j.at("config").get<TrainConfig>();
  m.theta = policy_from_json(j.at("theta"));
  m.prior = policy_from_json(j.at("prior"));
  for (const auto& [key, v] : j.at("rule_weights").items()) m.w.weights[key] = v.get<double>();
  for (const auto& [k, v] : j.at("base_rates").items()) m.w.base[std::stoi(k)] = v.get<double>();
  m.w.transform = count_transform_from_string(j.at("count_transform").get<std::string>());
  m.global_step = j.at("global_step").get<long long>();
  m.ema_subtb = j.value("ema_subtb", -1.0);
  for (const auto& e : j.at("history"))
    m.history.push_back({e.at("epoch").get<int>(), e.at("dev_nll").get<double>(),
                         e.at("dev_er").get<double>(), e.at("dev_mr").get<double>(),
                         e.at("ema_subtb").get<double>()});
  return m;
}

// Atomic write: temp file in the same directory, then rename.
inline void save_model(const TrainedModel& m, const std::string& path) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  const fs::path tmp = target.parent_path() / (target.filename().string() + ".tmp");
  {
    std::ofstream out(tmp);
    if (!out) throw DataError("io", tmp.string(), "cannot open for writing");
    out << model_to_json(m).dump(1) << "\n";
  }
  fs::rename(tmp, target);
}

inline TrainedModel load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("io", path, "cannot open model file");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError("parse", path + ":byte " + std::to_string(e.byte), e.what());
  }
  return model_from_json(j);
}

}  // namespace treeflow
