// Acceptance suite: every release criterion runs here at its stated
// tolerance and prints one PASS/FAIL line. The exit code is the number of
// failed criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "treeflow/em_trainer.hpp"
#include "treeflow/eval.hpp"
#include "treeflow/generator.hpp"
#include "treeflow/gflownet.hpp"

using namespace treeflow;

namespace {

int g_failures = 0;

struct Criterion {
  const char* name;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  explicit Criterion(const char* n) : name(n) {}
  void report(bool pass, const std::string& detail) const {
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("[%s] %s: %s (%.1fs)\n", pass ? "PASS" : "FAIL", name, detail.c_str(), secs);
    std::fflush(stdout);
    if (!pass) ++g_failures;
  }
};

PolicyParams random_params(Rng& rng, int n_preds, const TreeLimits& lim, bool conditioned,
                           double scale = 1.0) {
  PolicyParams p = PolicyParams::make(n_preds, lim, conditioned);
  for (std::size_t i = 0; i < p.weights.size(); ++i)
    p.weights.at_flat(i) = rng.uniform(-scale, scale);
  return p;
}

RewardFn hashed_reward(std::uint64_t seed, double lo, double hi) {
  return [seed, lo, hi](const LogicTree& t) {
    std::uint64_t h = seed;
    for (char c : canonical_key(t)) h = Rng::mix(h, static_cast<std::uint64_t>(c));
    return lo + (hi - lo) * (static_cast<double>(h >> 11) * 0x1.0p-53);
  };
}

struct RandomTlppInstance {
  Vocabulary vocab;
  RuleWeights w;
  std::vector<RulePath> rules;
  EventSequence seq;
};

RandomTlppInstance random_tlpp_instance(Rng& rng, double weight_scale = 0.8) {
  RandomTlppInstance inst;
  inst.vocab = oracles::random_vocab(rng, 2, 4);
  inst.w.transform =
      rng.uniform() < 0.5 ? CountTransform::identity : CountTransform::log1p_counts;
  for (int k : inst.vocab.targets) inst.w.base[k] = rng.uniform(-1.0, 1.0);
  const int n_rules = 1 + static_cast<int>(rng.uniform_index(3));
  for (int r = 0; r < n_rules; ++r) {
    RulePath p = oracles::random_path(rng, inst.vocab, 3);
    bool dup = false;
    for (const auto& q : inst.rules) dup |= q.key() == p.key();
    if (dup) continue;
    inst.w.weights[p.key()] = rng.uniform(-weight_scale, weight_scale);
    inst.rules.push_back(std::move(p));
  }
  inst.seq = oracles::random_history(rng, inst.vocab.size(), 10, rng.uniform(1.0, 3.0),
                                     inst.vocab.targets[0]);
  return inst;
}

void criterion_feature_oracle() {
  Criterion c("criterion 1, feature oracle");
  Rng rng(0xface);
  int mismatches = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    const Vocabulary vocab = oracles::random_vocab(rng, 2, 4);
    const RulePath path = oracles::random_path(rng, vocab, 3);
    const EventSequence seq = oracles::random_history(rng, vocab.size(), 12, 2.0, 0);
    const double t = rng.uniform(0.0, 2.5);
    mismatches +=
        logic_feature(path, seq.events, t) != oracles::brute_force_feature(path, seq.events, t);
  }
  c.report(mismatches == 0,
           "DP vs brute-force tuple enumeration on 1000 instances, mismatches " +
               std::to_string(mismatches));
}

void criterion_likelihood_exactness() {
  Criterion c("criterion 2, likelihood exactness");
  Rng rng(0x11f);
  double worst = 0.0;
  for (int rep = 0; rep < 200; ++rep) {
    const RandomTlppInstance inst = random_tlpp_instance(rng);
    const double exact = nll(inst.seq, inst.vocab, inst.w, inst.rules);
    const double quad = oracles::quadrature_nll(inst.seq, inst.vocab, inst.w, inst.rules);
    worst = std::max(worst, oracles::relative_error(exact, quad));
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "segment sum vs adaptive quadrature, worst rel err %.2e",
                worst);
  c.report(worst <= 1e-8, buf);
}

void criterion_gradient_suites() {
  Criterion c("criterion 3, gradient suites");
  Rng rng(0x9d);
  double worst_nll = 0.0, worst_policy = 0.0, worst_subtb = 0.0;

  for (int rep = 0; rep < 100; ++rep) {
    RandomTlppInstance inst = random_tlpp_instance(rng);
    const NllResult res = nll_with_grad(inst.seq, inst.vocab, inst.w, inst.rules);
    auto f = [&] { return nll(inst.seq, inst.vocab, inst.w, inst.rules); };
    for (std::size_t r = 0; r < inst.rules.size(); ++r) {
      const double fd = oracles::central_difference(f, inst.w.weights[inst.rules[r].key()]);
      worst_nll = std::max(worst_nll, oracles::relative_error(res.grad.d_rules[r], fd));
    }
    for (int k : inst.vocab.targets) {
      const double fd = oracles::central_difference(f, inst.w.base[k]);
      worst_nll = std::max(worst_nll, oracles::relative_error(res.grad.base(k), fd));
    }
  }

  for (int rep = 0; rep < 100; ++rep) {
    const Vocabulary vocab = oracles::random_vocab(rng, 2, 4);
    const TreeLimits lim{2, 2};
    const bool conditioned = rng.uniform() < 0.5;
    PolicyParams p = random_params(rng, vocab.size(), lim, conditioned);
    PolicyCondition cond{std::vector<double>(static_cast<std::size_t>(vocab.size()), 0.4),
                         conditioned ? 0 : -1};
    const PolicyCondition* cptr = conditioned ? &cond : nullptr;
    const LogicTree tree = oracles::random_tree(rng, vocab, 0, lim);
    Matrix grad(p.weights.rows(), p.weights.cols(), 0.0);
    tree_logprob_grad(p, tree, cptr, grad);
    auto f = [&] { return tree_logprob(p, tree, cptr); };
    for (std::size_t i = 0; i < p.weights.size(); ++i) {
      const double fd = oracles::central_difference(f, p.weights.at_flat(i));
      worst_policy = std::max(worst_policy, oracles::relative_error(grad.at_flat(i), fd));
    }
  }

  for (int rep = 0; rep < 100; ++rep) {
    const Vocabulary vocab = oracles::random_vocab(rng, 2, 4);
    const TreeLimits lim{2, 2};
    PolicyParams theta = random_params(rng, vocab.size(), lim, false, 0.7);
    const RewardFn log_r = hashed_reward(7000 + static_cast<std::uint64_t>(rep), -1.0, 2.0);
    Trajectory traj = sample_trajectory(theta, 0, nullptr, rng, Exploration{0.2, 1.0, 0});
    const std::vector<double> rewards = reward_trace(traj, log_r);
    const SubTBLoss out = subtb_loss(theta, traj, rewards, nullptr);
    auto f = [&] { return subtb_loss_value(theta, traj, rewards, nullptr); };
    for (std::size_t i = 0; i < theta.weights.size(); ++i) {
      const double fd = oracles::central_difference(f, theta.weights.at_flat(i));
      worst_subtb = std::max(worst_subtb, oracles::relative_error(out.grad.at_flat(i), fd));
    }
  }

  char buf[128];
  std::snprintf(buf, sizeof(buf),
                "finite differences: nll %.2e, policy %.2e, subtb %.2e (100 instances each)",
                worst_nll, worst_policy, worst_subtb);
  c.report(worst_nll <= 1e-4 && worst_policy <= 1e-4 && worst_subtb <= 1e-4, buf);
}

void criterion_policy_normalization() {
  Criterion c("criterion 4, policy normalization");
  Rng rng(0x40);
  double worst = 0.0;
  for (int n = 2; n <= 4; ++n) {
    std::vector<std::string> names;
    for (int i = 0; i < n; ++i) names.push_back(std::string(1, char('A' + i)));
    const Vocabulary vocab = Vocabulary::from_names(names, {0});
    for (int d = 1; d <= 2; ++d) {
      for (int w = 1; w <= 2; ++w) {
        const TreeLimits lim{d, w};
        const auto trees = enumerate_terminal_trees(vocab, 0, lim);
        for (bool conditioned : {false, true}) {
          PolicyParams p = random_params(rng, n, lim, conditioned, 1.5);
          PolicyCondition cond{std::vector<double>(static_cast<std::size_t>(n), 0.3), 0};
          double mass = 0.0;
          for (const auto& t : trees)
            mass += std::exp(tree_logprob(p, t, conditioned ? &cond : nullptr));
          worst = std::max(worst, std::abs(mass - 1.0));
        }
      }
    }
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf),
                "sum over enumerated trees, worst |mass - 1| %.2e over 24 configurations", worst);
  c.report(worst <= 1e-9, buf);
}

void criterion_proportionality() {
  Criterion c("criterion 5, terminating distribution matches rewards");
  const Vocabulary vocab = Vocabulary::from_names({"A", "B", "C"}, {0});
  const TreeLimits lim{1, 2};
  const RewardFn log_r = hashed_reward(0xd15c0, -0.5, 1.5);
  const auto trees = enumerate_terminal_trees(vocab, 0, lim);
  std::vector<double> target;
  double z = 0.0;
  for (const auto& t : trees) {
    target.push_back(std::exp(log_r(t)));
    z += target.back();
  }
  for (double& p : target) p /= z;

  int good_seeds = 0;
  std::string detail;
  for (std::uint64_t seed : {29u, 1u, 2u}) {
    EStepState state = EStepState::make(PolicyParams::make(3, lim, true));
    EStepConfig cfg;
    cfg.ema_beta = 0.9;
    std::vector<EStepItem> items;
    for (int i = 0; i < 4; ++i) items.push_back({0, PolicyCondition{{}, -1}, log_r});
    Rng rng(seed);
    int steps = 0;
    while ((steps < 300 || state.ema_loss >= 1e-4) && steps < 30000) {
      cfg.lr = 0.05 / (1.0 + steps / 300.0);
      cfg.explore.epsilon = 0.05 * std::max(0.0, 1.0 - steps / 2000.0);
      estep_update(state, items, cfg, rng);
      ++steps;
    }
    std::map<std::string, double> freq;
    const int n_samples = 10000;
    PolicyCondition cond{{}, -1};
    for (int s = 0; s < n_samples; ++s)
      freq[canonical_key(sample_trajectory(state.theta, 0, &cond, rng).final_tree())] += 1.0;
    std::vector<double> empirical;
    for (const auto& t : trees) empirical.push_back(freq[canonical_key(t)] / n_samples);
    const double tv = oracles::total_variation(empirical, target);
    const bool ok = state.ema_loss < 1e-4 && tv <= 0.05;
    good_seeds += ok;
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%sseed %llu: TV %.3f", detail.empty() ? "" : ", ",
                  static_cast<unsigned long long>(seed), tv);
    detail += buf;
  }
  c.report(good_seeds == 3, detail + " (need TV <= 0.05 on 3/3)");
}

void criterion_reward_scale_invariance() {
  Criterion c("criterion 6, reward-scale invariance");
  Rng rng(0x5ca1e);
  const TreeLimits lim{2, 2};
  PolicyParams theta = random_params(rng, 3, lim, false);
  const RewardFn log_r = hashed_reward(0xbeef, -1.0, 2.0);
  double worst = 0.0;
  for (int rep = 0; rep < 25; ++rep) {
    Trajectory traj = sample_trajectory(theta, 0, nullptr, rng, Exploration{0.25, 1.0, 0});
    std::vector<double> rewards = reward_trace(traj, log_r);
    const double base = subtb_loss_value(theta, traj, rewards, nullptr);
    for (double scale : {0.1, 10.0}) {
      std::vector<double> scaled = rewards;
      for (double& r : scaled) r += std::log(scale);
      worst = std::max(worst, std::abs(subtb_loss_value(theta, traj, scaled, nullptr) - base));
    }
  }
  char buf[80];
  std::snprintf(buf, sizeof(buf), "worst |loss(c*r) - loss(r)| = %.2e for c in {0.1, 10}", worst);
  c.report(worst <= 1e-10, buf);
}

void criterion_elbo_identity() {
  Criterion c("criterion 7, ELBO identity");
  Rng rng(0xe1b0);
  const Vocabulary vocab = Vocabulary::from_names({"A", "B", "C"}, {0, 1});
  const TreeLimits lim{1, 2};
  PolicyParams theta = random_params(rng, 3, lim, true, 0.8);
  PolicyParams prior = random_params(rng, 3, lim, false, 0.8);
  RuleWeights w;
  w.base[0] = 0.2;
  w.base[1] = -0.1;
  w.weights["0<-2"] = 0.8;
  EventSequence x;
  x.events = {{0.3, 2}, {0.8, 0}, {1.2, 2}};
  x.horizon = 2.0;
  x.label = 0;
  const EnumeratedPosterior post = enumerate_posterior(x, 0, vocab, theta, prior, w, lim);

  const double at_posterior = elbo_with_q(post, post.posterior());
  const double gap = std::abs(at_posterior - post.log_marginal);
  bool bounded = true;
  double worst_excess = -1e300;
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> q(post.trees.size());
    double z = 0.0;
    for (double& v : q) {
      v = -std::log(1.0 - rng.uniform());
      z += v;
    }
    for (double& v : q) v /= z;
    const double e = elbo_with_q(post, q);
    worst_excess = std::max(worst_excess, e - post.log_marginal);
    bounded &= e <= post.log_marginal + 1e-9;
  }
  char buf[110];
  std::snprintf(buf, sizeof(buf),
                "|ELBO(posterior) - log marginal| = %.2e; max excess over 50 random q = %.2e",
                gap, worst_excess);
  c.report(gap <= 1e-9 && bounded, buf);
}

void criterion_simulator_statistics() {
  Criterion c("criterion 8, simulator statistics");
  Rng rng(0x51a);

  // homogeneous Poisson(2) on [0, 10]
  RuleWeights poisson;
  poisson.base[0] = std::log(2.0);
  double total = 0.0;
  const int n_runs = 1000;
  for (int r = 0; r < n_runs; ++r)
    total += static_cast<double>(simulate({}, poisson, 10.0, rng).size());
  const double mean = total / n_runs;
  const double band = 3.0 * std::sqrt(20.0 / n_runs);
  const bool mean_ok = std::abs(mean - 20.0) <= band;

  // competing risks: rate ratio 3:1 -> type fraction 0.75
  RuleWeights competing;
  competing.base[0] = 0.0;
  competing.base[1] = std::log(3.0);
  double type1 = 0.0, count = 0.0;
  while (count < 10000.0) {
    for (const Event& e : simulate({}, competing, 50.0, rng)) {
      count += 1.0;
      type1 += e.type == 1;
    }
  }
  const double fraction = type1 / count;
  const bool fraction_ok = std::abs(fraction - 0.75) <= 0.03;

  // KS on 10^4 uncensored gaps at alpha = 0.01
  std::vector<double> gaps;
  while (gaps.size() < 10000) {
    const auto events = simulate({}, poisson, 50.0, rng);
    double prev = 0.0;
    for (std::size_t i = 0; i < std::min<std::size_t>(events.size(), 20); ++i) {
      gaps.push_back(events[i].time - prev);
      prev = events[i].time;
    }
  }
  gaps.resize(10000);
  const double d = oracles::ks_statistic_exponential(gaps, 2.0);
  const bool ks_ok = d < oracles::ks_critical_001(gaps.size());

  char buf[128];
  std::snprintf(buf, sizeof(buf),
                "Poisson mean %.2f (20 +- %.2f), type fraction %.3f, KS D %.4f < %.4f", mean,
                band, fraction, d, oracles::ks_critical_001(gaps.size()));
  c.report(mean_ok && fraction_ok && ks_ok, buf);
}

void criterion_synthetic_recovery() {
  Criterion c("criterion 9, end-to-end synthetic recovery");
  // Ground truth: two planted target rules over five event types. The body
  // streams are self-exciting so either trigger can dominate a sequence,
  // which keeps the label predictable from the right rule.
  json gt_json = {
      {"vocabulary", {"A", "B", "C", "D", "E"}},
      {"targets", {"A", "B"}},
      {"base_rates",
       {{"A", -3.4}, {"B", -3.4}, {"C", -2.0}, {"D", -2.0}, {"E", -1.2}}},
      {"rules", json::array({{{"path", {"A", "C"}}, {"weight", 2.8}},
                             {{"path", {"B", "D"}}, {"weight", 2.8}},
                             {{"path", {"C", "C"}}, {"weight", 1.2}},
                             {{"path", {"D", "D"}}, {"weight", 1.2}}})},
      {"horizon", 8.0},
      {"count_transform", "log1p"}};
  const GroundTruthModel gt = ground_truth_from_json(gt_json);
  const std::vector<RulePath> planted = {gt.rules[0], gt.rules[1]};

  int passed = 0;
  std::string detail;
  double length_sum = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Dataset ds = generate_dataset(gt, 200, gt.horizon, seed * 1000 + 17);
    for (const auto& s : ds.sequences)
      length_sum += static_cast<double>(s.events.size()) / (5.0 * 200.0);
    ds = split_dataset(std::move(ds), seed);

    TrainConfig cfg;
    cfg.epochs = 10;
    cfg.batch_size = 8;
    cfg.depth = 2;
    cfg.width = 3;
    cfg.m_step_samples = 4;
    cfg.predict_samples = 16;
    cfg.lr_logic = 2e-2;
    cfg.lr_policy = 3e-3;
    cfg.count_transform = "log1p";
    cfg.seed = seed;
    const TrainedModel model = train(ds, cfg);

    const auto dev = ds.indices_of(Split::dev);
    const MetricsReport rep = evaluate_split(ds, dev, model.theta, model.w,
                                             cfg.predict_samples, Rng::mix(seed, 99));
    std::vector<EventSequence> train_seqs;
    for (std::size_t i : ds.indices_of(Split::train)) train_seqs.push_back(ds.sequences[i]);
    Rng rec_rng(seed + 7);
    const RecoveryReport rec = rule_recovery(ds.vocabulary, model.theta, model.w, train_seqs,
                                             planted, 5, 4, rec_rng);

    const double uniform_er = rep.uniform.er;  // 0.5 for two targets
    const bool ok = rep.er <= uniform_er - 0.10 && rec.recall >= 0.8;
    passed += ok;
    char buf[80];
    std::snprintf(buf, sizeof(buf), "%ss%llu er %.2f rec %.1f", detail.empty() ? "" : ", ",
                  static_cast<unsigned long long>(seed), rep.er, rec.recall);
    detail += buf;
  }
  char buf[64];
  std::snprintf(buf, sizeof(buf), " | mean length %.1f | %d/5 seeds", length_sum, passed);
  c.report(passed >= 4, detail + buf);
}

void criterion_alternation_mechanism() {
  Criterion c("criterion 10, alternation-frequency mechanism");
  struct EmaLogger final : TrainLogger {
    std::vector<double> emas;
    std::vector<long long> msteps;
    void estep_row(long long, double ema, double, int, double) override {
      emas.push_back(ema);
    }
    void mstep_row(long long step, double) override { msteps.push_back(step); }
  };

  json gt_json = {{"vocabulary", {"A", "B", "C"}},
                  {"targets", {"A"}},
                  {"base_rates", {{"A", -2.0}, {"B", -0.5}, {"C", -1.0}}},
                  {"rules", json::array({{{"path", {"A", "B"}}, {"weight", 1.5}}})},
                  {"horizon", 6.0},
                  {"count_transform", "log1p"}};
  const GroundTruthModel gt = ground_truth_from_json(gt_json);
  Dataset one = generate_dataset(gt, 1, gt.horizon, 41);
  Dataset ds;
  ds.vocabulary = one.vocabulary;
  for (int i = 0; i < 12; ++i) ds.sequences.push_back(one.sequences[0]);
  ds = split_dataset(std::move(ds), 0);

  int monotone_settings = 0;
  bool all_completed = true;
  std::vector<std::size_t> mstep_counts;
  std::string detail;
  for (int freq : {1, 20, 50}) {
    TrainConfig cfg;
    cfg.epochs = 350;
    cfg.batch_size = 16;
    cfg.depth = 1;
    cfg.width = 2;
    cfg.alternate_every = freq;
    cfg.optimizer = "sgd";
    cfg.lr_policy = 0.5;
    cfg.lr_logic = 5e-3;
    cfg.lr_decay = 0.99;
    cfg.alpha = 1e-4;
    cfg.epsilon = 0.0;
    cfg.m_step_samples = 2;
    cfg.predict_samples = 2;
    cfg.count_transform = "log1p";
    cfg.seed = 3;
    EmaLogger lg;
    const TrainedModel m = train(ds, cfg, &lg);
    all_completed &= m.global_step == 350;
    mstep_counts.push_back(lg.msteps.size());
    const std::size_t n = lg.emas.size();
    const std::size_t tail = n - n / 5;
    int violations = 0;
    for (std::size_t i = tail; i + 1 < n; ++i)
      if (lg.emas[i + 1] > lg.emas[i]) ++violations;
    monotone_settings += violations == 0;
    char buf[80];
    std::snprintf(buf, sizeof(buf), "%sfreq %d: %zu m-steps, tail violations %d",
                  detail.empty() ? "" : ", ", freq, lg.msteps.size(), violations);
    detail += buf;
  }
  const bool schedules_distinct =
      mstep_counts[0] > mstep_counts[1] && mstep_counts[1] >= mstep_counts[2];
  c.report(all_completed && monotone_settings >= 2 && schedules_distinct, detail);
}

}  // namespace

int main() {
  criterion_feature_oracle();
  criterion_likelihood_exactness();
  criterion_gradient_suites();
  criterion_policy_normalization();
  criterion_proportionality();
  criterion_reward_scale_invariance();
  criterion_elbo_identity();
  criterion_simulator_statistics();
  criterion_synthetic_recovery();
  criterion_alternation_mechanism();
  std::printf("%d of 10 criteria passed\n", 10 - g_failures);
  return g_failures;
}
