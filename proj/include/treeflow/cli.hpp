#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "treeflow/core_types.hpp"
#include "treeflow/em_trainer.hpp"
#include "treeflow/errors.hpp"
#include "treeflow/eval.hpp"
#include "treeflow/generator.hpp"
#include "treeflow/tree_export.hpp"

namespace treeflow::cli {

namespace fs = std::filesystem;

inline std::uint64_t file_content_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::uint64_t h = 1469598103934665603ULL;
  char buf[4096];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
  }
  return h;
}

inline std::string iso_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Frozen description of a run, written before training starts.
inline void write_manifest(const fs::path& out_dir, const TrainConfig& cfg,
                           const std::string& dataset_path,
                           const std::vector<std::string>& outputs) {
  json j;
  j["config"] = cfg;
  j["seed"] = cfg.seed;
  j["dataset"] = dataset_path;
  char hash[24];
  std::snprintf(hash, sizeof(hash), "%016llx",
                static_cast<unsigned long long>(file_content_hash(dataset_path)));
  j["dataset_hash"] = hash;
  j["outputs"] = outputs;
  j["created_at"] = iso_timestamp();
  std::ofstream out(out_dir / "manifest.json");
  out << j.dump(1) << "\n";
}

class CsvTrainLogger final : public TrainLogger {
 public:
  explicit CsvTrainLogger(const fs::path& out_dir)
      : estep_(out_dir / "estep_log.csv"), mstep_(out_dir / "mstep_log.csv"),
        epochs_(out_dir / "epochs.csv") {
    estep_ << "step,ema_subtb,batch_mean_log_reward,trees_sampled,mean_tree_size\n";
    mstep_ << "step,mean_nll\n";
    epochs_ << "epoch,dev_nll,dev_er,dev_mr,ema_subtb\n";
  }

  void estep_row(long long step, double ema, double mean_log_reward, int trees,
                 double mean_tree_size) override {
    estep_ << step << ',' << ema << ',' << mean_log_reward << ',' << trees << ','
           << mean_tree_size << '\n';
  }
  void mstep_row(long long step, double mean_nll) override {
    mstep_ << step << ',' << mean_nll << '\n';
  }
  void epoch_row(const EpochMetrics& em) override {
    epochs_ << em.epoch << ',' << em.dev_nll << ',' << em.dev_er << ',' << em.dev_mr << ','
            << em.ema_subtb << '\n';
    epochs_.flush();
  }

 private:
  std::ofstream estep_, mstep_, epochs_;
};

struct GenOptions {
  std::string model_file;
  int n_sequences = 200;
  double horizon = 0.0;  // 0 = use the model file's horizon
  std::uint64_t seed = 0;
  std::size_t max_events = 10000;
  std::string out;
};

inline int cmd_gen(const GenOptions& opt, std::ostream& log = std::cout) {
  const GroundTruthModel gt = load_ground_truth(opt.model_file);
  const double horizon = opt.horizon > 0.0 ? opt.horizon : gt.horizon;
  const Dataset ds = generate_dataset(gt, opt.n_sequences, horizon, opt.seed, opt.max_events);
  save_dataset(ds, opt.out);
  double mean_len = 0.0;
  for (const auto& s : ds.sequences) mean_len += static_cast<double>(s.events.size());
  if (!ds.sequences.empty()) mean_len /= static_cast<double>(ds.sequences.size());
  log << "wrote " << ds.sequences.size() << " sequences to " << opt.out
      << " (mean history length " << mean_len << ")\n";
  return 0;
}

inline int cmd_split(const std::string& dataset_path, std::uint64_t seed,
                     const std::string& out, std::ostream& log = std::cout) {
  std::vector<std::string> warnings;
  Dataset ds = load_dataset(dataset_path, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  ds = split_dataset(std::move(ds), seed);
  save_dataset(ds, out);
  log << "split " << ds.indices_of(Split::train).size() << "/"
      << ds.indices_of(Split::dev).size() << "/" << ds.indices_of(Split::test).size()
      << " train/dev/test to " << out << "\n";
  return 0;
}

struct TrainOptions {
  std::string dataset_path;
  std::string config_path;  // optional JSON config
  std::string out_dir;
  std::string resume_path;  // optional checkpoint to continue from
  TrainConfig overrides;    // already merged by the arg parser
  bool has_config_file() const { return !config_path.empty(); }
};

inline TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("io", path, "cannot open config file");
  try {
    return json::parse(in).get<TrainConfig>();
  } catch (const json::parse_error& e) {
    throw DataError("parse", path + ":byte " + std::to_string(e.byte), e.what());
  }
}

inline int cmd_train(const TrainOptions& opt, std::ostream& log = std::cout) {
  const TrainConfig cfg = opt.overrides;
  cfg.validate();
  std::vector<std::string> warnings;
  Dataset ds = load_dataset(opt.dataset_path, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  if (!ds.has_split_tags()) ds = split_dataset(std::move(ds), cfg.seed);

  fs::create_directories(opt.out_dir);
  const fs::path out_dir(opt.out_dir);
  write_manifest(out_dir, cfg, opt.dataset_path,
                 {"checkpoint.json", "estep_log.csv", "mstep_log.csv", "epochs.csv"});
  CsvTrainLogger logger(out_dir);

  TrainedModel resume;
  const TrainedModel* resume_ptr = nullptr;
  if (!opt.resume_path.empty()) {
    resume = load_model(opt.resume_path);
    resume_ptr = &resume;
  }
  const TrainedModel model = train(ds, cfg, &logger, resume_ptr);
  save_model(model, (out_dir / "checkpoint.json").string());
  const EpochMetrics& last = model.history.back();
  log << "finished " << model.global_step << " steps; best dev er=" << last.dev_er
      << " mr=" << last.dev_mr << " nll=" << last.dev_nll << "\n"
      << "checkpoint: " << (out_dir / "checkpoint.json").string() << "\n";
  return 0;
}

inline json report_to_json(const MetricsReport& rep, std::uint64_t seed) {
  json j;
  j["er"] = rep.er;
  j["mr"] = rep.mr;
  j["nll"] = rep.nll;
  j["baselines"] = {{"uniform", {{"er", rep.uniform.er}, {"mr", rep.uniform.mr}}},
                    {"majority", {{"er", rep.majority.er}, {"mr", rep.majority.mr}}}};
  j["per_seed"] =
      json::array({{{"seed", seed}, {"er", rep.er}, {"mr", rep.mr}, {"nll", rep.nll}}});
  return j;
}

inline void write_predictions_csv(const MetricsReport& rep, const std::string& path) {
  std::ofstream out(path);
  out << "sequence_index,label,ranking,scores\n";
  for (const auto& r : rep.records) {
    out << r.sequence_index << ',' << r.label << ',';
    for (std::size_t i = 0; i < r.ranking.size(); ++i) out << (i ? " " : "") << r.ranking[i];
    out << ',';
    for (std::size_t i = 0; i < r.scores.size(); ++i) out << (i ? " " : "") << r.scores[i];
    out << '\n';
  }
}

struct EvalOptions {
  std::string checkpoint;
  std::string dataset_path;
  std::string split = "test";
  int n_samples = 8;
  std::uint64_t seed = 0;
  int threads = 1;
  std::string out_report;  // empty = stdout only
  std::string out_csv;
};

inline int cmd_eval(const EvalOptions& opt, std::ostream& log = std::cout) {
  const TrainedModel model = load_model(opt.checkpoint);
  std::vector<std::string> warnings;
  Dataset ds = load_dataset(opt.dataset_path, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  std::vector<std::size_t> idx;
  if (opt.split == "all") {
    idx.resize(ds.sequences.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  } else if (opt.split == "train" || opt.split == "dev" || opt.split == "test") {
    const Split s = opt.split == "train" ? Split::train
                                         : (opt.split == "dev" ? Split::dev : Split::test);
    idx = ds.indices_of(s);
  } else {
    throw DataError("bad-split", "--split", "expected train|dev|test|all");
  }
  if (idx.empty()) throw DataError("empty-split", opt.split, "no sequences in this split");
  const MetricsReport rep = evaluate_split(ds, idx, model.theta, model.w, opt.n_samples,
                                           opt.seed, opt.threads);
  const json j = report_to_json(rep, opt.seed);
  if (!opt.out_report.empty()) {
    std::ofstream out(opt.out_report);
    out << j.dump(1) << "\n";
  }
  if (!opt.out_csv.empty()) write_predictions_csv(rep, opt.out_csv);
  log << j.dump(1) << "\n";
  return 0;
}

struct SampleOptions {
  std::string checkpoint;
  std::string dataset_path;
  std::size_t index = 0;
  int n = 16;
  std::string format = "dot";  // dot | json (aggregate always written)
  std::uint64_t seed = 0;
  std::string out_dir;
};

inline int cmd_sample(const SampleOptions& opt, std::ostream& log = std::cout) {
  const TrainedModel model = load_model(opt.checkpoint);
  Dataset ds = load_dataset(opt.dataset_path);
  if (opt.index >= ds.sequences.size())
    throw DataError("bad-index", "--index",
                    "dataset has " + std::to_string(ds.sequences.size()) + " sequences");
  if (opt.format != "dot" && opt.format != "json")
    throw DataError("bad-format", "--format", "expected dot|json");
  const EventSequence& x = ds.sequences[opt.index];
  const PolicyCondition cond =
      PolicyCondition::from_sequence(x, ds.vocabulary.size(), x.label);
  fs::create_directories(opt.out_dir);
  const fs::path out_dir(opt.out_dir);
  Rng rng = Rng::substream(opt.seed, opt.index);
  std::vector<LogicTree> trees;
  for (int s = 0; s < opt.n; ++s) {
    trees.push_back(sample_trajectory(model.theta, x.label, &cond, rng).final_tree());
    std::ofstream out(out_dir / ("tree_" + std::to_string(s) + ".json"));
    out << tree_to_json(trees.back(), ds.vocabulary).dump(1) << "\n";
  }
  const std::vector<EdgeStat> edges = edge_stats(trees, model.w);
  {
    std::ofstream out(out_dir / "aggregate.json");
    out << edge_stats_to_json(edges, ds.vocabulary).dump(1) << "\n";
  }
  if (opt.format == "dot") {
    std::ofstream out(out_dir / "trees.dot");
    out << trees_to_dot(edges, ds.vocabulary, x.label);
  }
  log << "wrote " << opt.n << " trees (" << edges.size() << " distinct edges) to "
      << opt.out_dir << "\n";
  return 0;
}

}  // namespace treeflow::cli
