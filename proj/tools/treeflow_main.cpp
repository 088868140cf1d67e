#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "treeflow/cli.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitDivergence = 4;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"treeflow: latent logic-tree explanations for event sequences"};
  app.require_subcommand(1);

  treeflow::cli::GenOptions gen;
  auto* cmd_gen = app.add_subcommand("gen", "sample a synthetic dataset from a ground-truth model");
  cmd_gen->add_option("--model", gen.model_file, "ground-truth model JSON")->required();
  cmd_gen->add_option("--n", gen.n_sequences, "number of sequences");
  cmd_gen->add_option("--horizon", gen.horizon, "override the model horizon");
  cmd_gen->add_option("--seed", gen.seed, "rng seed");
  cmd_gen->add_option("--cap", gen.max_events, "per-sequence event cap");
  cmd_gen->add_option("--out", gen.out, "output dataset path")->required();

  std::string split_dataset_path, split_out;
  std::uint64_t split_seed = 0;
  auto* cmd_split = app.add_subcommand("split", "assign deterministic train/dev/test tags");
  cmd_split->add_option("--dataset", split_dataset_path, "dataset JSON")->required();
  cmd_split->add_option("--seed", split_seed, "rng seed");
  cmd_split->add_option("--out", split_out, "output dataset path")->required();

  treeflow::cli::TrainOptions train;
  auto* cmd_train = app.add_subcommand("train", "run the amortized EM loop");
  cmd_train->add_option("--dataset", train.dataset_path, "dataset JSON")->required();
  cmd_train->add_option("--config", train.config_path, "training config JSON");
  cmd_train->add_option("--out", train.out_dir, "run directory")->required();
  cmd_train->add_option("--resume", train.resume_path, "checkpoint to continue from");
  // direct overrides on top of the config file
  auto* epochs_opt = cmd_train->add_option("--epochs", train.overrides.epochs);
  auto* seed_opt = cmd_train->add_option("--seed", train.overrides.seed);
  auto* batch_opt = cmd_train->add_option("--batch-size", train.overrides.batch_size);
  auto* depth_opt = cmd_train->add_option("--depth", train.overrides.depth);
  auto* width_opt = cmd_train->add_option("--width", train.overrides.width);
  auto* alt_opt = cmd_train->add_option("--alternate-every", train.overrides.alternate_every);

  treeflow::cli::EvalOptions eval;
  auto* cmd_eval = app.add_subcommand("eval", "compute metrics for a checkpoint");
  cmd_eval->add_option("--checkpoint", eval.checkpoint, "model checkpoint")->required();
  cmd_eval->add_option("--dataset", eval.dataset_path, "dataset JSON")->required();
  cmd_eval->add_option("--split", eval.split, "train|dev|test|all");
  cmd_eval->add_option("--n-samples", eval.n_samples, "trees per prediction");
  cmd_eval->add_option("--seed", eval.seed, "rng seed");
  cmd_eval->add_option("--threads", eval.threads, "evaluation threads");
  cmd_eval->add_option("--report", eval.out_report, "metrics JSON output path");
  cmd_eval->add_option("--csv", eval.out_csv, "prediction records CSV path");

  treeflow::cli::SampleOptions sample;
  auto* cmd_sample = app.add_subcommand("sample", "export sampled explanation trees");
  cmd_sample->add_option("--checkpoint", sample.checkpoint, "model checkpoint")->required();
  cmd_sample->add_option("--dataset", sample.dataset_path, "dataset JSON")->required();
  cmd_sample->add_option("--index", sample.index, "sequence index to explain");
  cmd_sample->add_option("--n", sample.n, "number of trees to sample");
  cmd_sample->add_option("--format", sample.format, "dot|json");
  cmd_sample->add_option("--seed", sample.seed, "rng seed");
  cmd_sample->add_option("--out", sample.out_dir, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (cmd_gen->parsed()) return treeflow::cli::cmd_gen(gen);
    if (cmd_split->parsed()) return treeflow::cli::cmd_split(split_dataset_path, split_seed, split_out);
    if (cmd_train->parsed()) {
      if (!train.config_path.empty()) {
        treeflow::TrainConfig cfg = treeflow::cli::load_train_config(train.config_path);
        if (epochs_opt->count()) cfg.epochs = train.overrides.epochs;
        if (seed_opt->count()) cfg.seed = train.overrides.seed;
        if (batch_opt->count()) cfg.batch_size = train.overrides.batch_size;
        if (depth_opt->count()) cfg.depth = train.overrides.depth;
        if (width_opt->count()) cfg.width = train.overrides.width;
        if (alt_opt->count()) cfg.alternate_every = train.overrides.alternate_every;
        train.overrides = cfg;
      }
      return treeflow::cli::cmd_train(train);
    }
    if (cmd_eval->parsed()) return treeflow::cli::cmd_eval(eval);
    if (cmd_sample->parsed()) return treeflow::cli::cmd_sample(sample);
  } catch (const treeflow::DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const treeflow::DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const treeflow::SpaceTooLargeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const treeflow::ExplosionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
