#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

namespace rtal {

using Sentence = std::vector<std::string>;

struct BleuReport {
  double bleu = 0;
  double brevity_penalty = 0;
  std::size_t candidate_length = 0;
  std::size_t reference_length = 0;
  std::vector<std::size_t> matches;  // clipped n-gram matches, n = 1..max_n
  std::vector<std::size_t> totals;   // candidate n-grams, n = 1..max_n
  std::vector<double> precisions;

  std::string table() const;
  nlohmann::json to_json() const;
};

/// Corpus-level BLEU without smoothing: geometric mean of clipped n-gram
/// precisions times the brevity penalty exp(1 - r / c) when c < r.
BleuReport bleu_report(const std::vector<Sentence>& candidates, const std::vector<Sentence>& references,
                       std::size_t max_n = 4);
double bleu(const std::vector<Sentence>& candidates, const std::vector<Sentence>& references, std::size_t max_n = 4);

std::vector<Sentence> to_sentences(const std::vector<std::vector<int>>& token_ids);

}  // namespace rtal
