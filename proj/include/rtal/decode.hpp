#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "rtal/model.hpp"

namespace rtal {

/// Next-token log-probabilities over the whole vocabulary for a prefix that
/// starts with BOS.
using StepFunction = std::function<std::vector<double>(std::span<const int> prefix)>;

struct Hypothesis {
  std::vector<int> tokens;  // generated tokens, without BOS
  double log_prob = 0;
  bool finished = false;
};

struct BeamResult {
  std::vector<int> tokens;  // without BOS and EOS
  double log_prob = 0;
  double score = 0;
  /// False when no hypothesis emitted EOS within max_len.
  bool finished = false;
};

/// ((5 + len) / 6)^alpha.
double length_penalty(std::size_t length, double alpha);

/// Beam search scoring finished hypotheses by log_prob / length_penalty(len),
/// where len counts generated tokens including EOS. PAD and BOS are never
/// generated. Each step keeps the best `beam_size` extensions; those ending in
/// EOS are retired. Ties go to the earlier finish, then the lexicographically
/// smaller token sequence. Search stops once no live hypothesis can beat the
/// best finished one.
BeamResult beam_search(const StepFunction& step, std::size_t vocab_size, std::size_t beam_size, double alpha,
                       std::size_t max_len);
BeamResult beam_search(const Seq2SeqModel& model, std::span<const int> source, std::size_t beam_size, double alpha,
                       std::size_t max_len);

/// Argmax decoding until EOS or max_len.
BeamResult greedy_decode(const StepFunction& step, std::size_t vocab_size, double alpha, std::size_t max_len);
BeamResult greedy_decode(const Seq2SeqModel& model, std::span<const int> source, double alpha, std::size_t max_len);

/// Default generation budget for a source: its length plus a margin, capped by
/// the model's positional table.
std::size_t decode_budget(const Seq2SeqModel& model, std::size_t source_len);

}  // namespace rtal
