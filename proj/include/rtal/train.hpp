#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "rtal/bleu.hpp"
#include "rtal/errors.hpp"
#include "rtal/model.hpp"
#include "rtal/optim.hpp"
#include "rtal/task.hpp"

namespace rtal {

struct TrainSpec {
  std::size_t steps = 3000;
  std::size_t batch_tokens = 1024;
  std::size_t warmup = 400;
  double lr_factor = 1.0;
  double label_smoothing = 0.1;
  std::size_t log_every = 100;
  std::size_t checkpoint_every = 500;
  AdamConfig adam;
  std::uint64_t seed = 1;
};

struct MetricRecord {
  std::uint64_t step = 0;
  double loss = 0;
  double token_accuracy = 0;
  double lr = 0;
  double wall_ms = 0;

  /// One metrics.jsonl line. Wall time is the only field that varies between
  /// identical runs.
  nlohmann::json to_json(bool include_wall_time = true) const;
};

struct TrainOptions {
  /// Empty: train in memory without writing files.
  std::filesystem::path run_dir;
  /// Continue from the newest checkpoint in run_dir.
  bool resume = false;
  std::function<void(const std::string&)> log;
};

struct TrainResult {
  std::vector<MetricRecord> metrics;
  std::vector<std::filesystem::path> checkpoints;
  std::uint64_t final_step = 0;
};

class TrainingDiverged : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

/// Adam training with the warmup schedule on a synthetic task.
///
/// With a run directory the loop writes checkpoints/step_NNNNNNNN.ckpt (plus a
/// matching .adam optimizer file) at step 0 and every checkpoint_every steps,
/// and appends metrics.jsonl every log_every steps. The batch and dropout
/// stream for each step derive from (seed, step), so a resumed run reproduces
/// an uninterrupted one bit for bit. A non-finite loss throws
/// TrainingDiverged and leaves the last written checkpoint in place.
/// A fresh run refuses a directory that already holds checkpoints.
TrainResult train(Seq2SeqModel& model, const SyntheticTask& task, const TrainSpec& spec,
                  const TrainOptions& options = {});

std::vector<std::filesystem::path> list_checkpoints(const std::filesystem::path& run_dir);

struct EvalResult {
  std::size_t count = 0;
  double exact_match = 0;
  BleuReport bleu;
  std::vector<std::vector<int>> hypotheses;
};

/// Decodes every source with beam search (beam 1 uses greedy decoding) and
/// scores exact-sequence accuracy and corpus BLEU against the targets.
EvalResult evaluate(const Seq2SeqModel& model, std::span<const Batch::Pair> data, std::size_t beam, double alpha);

/// Fraction of non-pad positions whose argmax logit equals the target.
double token_accuracy(const Tensor& logits, std::span<const int> targets);

}  // namespace rtal
