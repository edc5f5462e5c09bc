#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "rtal/model.hpp"
#include "rtal/task.hpp"
#include "rtal/train.hpp"

namespace rtal {

/// Everything needed to reproduce one run, stored as a flat JSON object.
///
/// Model keys match ModelConfig::to_json. The remaining keys are task,
/// min_src_len, max_src_len, steps, batch_tokens, warmup, lr_factor,
/// label_smoothing, log_every, checkpoint_every, adam_beta1, adam_beta2,
/// adam_eps, output_dir, eval_count, beam and alpha. One seed drives model
/// initialization, data and dropout. The task vocabulary is the model's.
struct ExperimentConfig {
  ModelConfig model;
  SyntheticTask task;
  TrainSpec train;
  std::filesystem::path output_dir = "runs/default";
  std::size_t eval_count = 200;
  std::size_t beam = 4;
  double alpha = 0.6;

  /// Small Copy-task setup that trains in minutes on one core.
  static ExperimentConfig toy();

  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys raise ConfigError.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// Applies "key=value" overrides on top of a JSON config. Values are parsed as
/// JSON when possible and taken as strings otherwise.
nlohmann::json apply_overrides(nlohmann::json config, const std::vector<std::string>& assignments);

struct RunSummary {
  std::filesystem::path run_dir;
  std::size_t params = 0;
  TrainResult train;
  EvalResult eval;
};

/// Trains in config.output_dir (writing config.json there first), then scores
/// the final weights on eval_count held-out pairs and writes eval.json.
RunSummary run_experiment(const ExperimentConfig& config, bool resume = false,
                          std::function<void(const std::string&)> log = {});

/// Held-out evaluation pairs for a config.
std::vector<Batch::Pair> heldout_pairs(const ExperimentConfig& config);

/// Values to sweep per aggregation axis: "structure", "formula", "position".
using AblationGrid = std::vector<std::pair<std::string, std::vector<std::string>>>;

struct AblationRow {
  std::string cell;
  std::string structure;
  std::string formula;
  std::string position;
  std::size_t params = 0;
  double final_loss = 0;
  double token_accuracy = 0;
  double bleu = 0;
  double exact_match = 0;
  std::string status;
};

/// Cartesian product of the grid axes applied to `base`, each cell trained
/// with the same seed in output_dir/cells/<cell>. A failing cell is reported
/// with status "failed: ..." and the others still run. Cells run on up to
/// `threads` threads. Writes output_dir/ablation.csv.
std::vector<AblationRow> run_ablation(const ExperimentConfig& base, const AblationGrid& grid, std::size_t threads = 1,
                                      std::function<void(const std::string&)> log = {});

std::string ablation_csv(const std::vector<AblationRow>& rows);

/// Worker cap from RTAL_NUM_THREADS, defaulting to the hardware concurrency.
std::size_t thread_limit();

}  // namespace rtal
