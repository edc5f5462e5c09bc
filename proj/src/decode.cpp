#include "rtal/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace rtal {
namespace {

bool generatable(int tok) { return tok != token::kPad && tok != token::kBos; }

struct Candidate {
  std::vector<int> tokens;
  double log_prob;
};

// Better-first ordering of same-length candidates.
bool candidate_before(const Candidate& a, const Candidate& b) {
  if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
  return a.tokens < b.tokens;
}

struct Finished {
  std::vector<int> tokens;  // includes EOS
  double log_prob;
  double score;
};

bool finished_before(const Finished& a, const Finished& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.tokens.size() != b.tokens.size()) return a.tokens.size() < b.tokens.size();
  return a.tokens < b.tokens;
}

std::vector<int> with_bos(const std::vector<int>& tokens) {
  std::vector<int> prefix{token::kBos};
  prefix.insert(prefix.end(), tokens.begin(), tokens.end());
  return prefix;
}

StepFunction model_step(const Seq2SeqModel& model, std::span<const int> source) {
  auto cache = std::make_shared<SourceCache>(model.encode_source(source));
  return [&model, cache](std::span<const int> prefix) { return model.forward_step(*cache, prefix); };
}

}  // namespace

double length_penalty(std::size_t length, double alpha) {
  return std::pow((5.0 + static_cast<double>(length)) / 6.0, alpha);
}

BeamResult beam_search(const StepFunction& step, std::size_t vocab_size, std::size_t beam_size, double alpha,
                       std::size_t max_len) {
  if (beam_size == 0) throw std::invalid_argument("beam_search: beam_size must be >= 1");
  if (alpha < 0) throw std::invalid_argument("beam_search: alpha must be >= 0");
  if (max_len == 0) throw std::invalid_argument("beam_search: max_len must be >= 1");

  std::vector<Candidate> alive{{{}, 0.0}};
  std::vector<Finished> finished;
  for (std::size_t t = 1; t <= max_len && !alive.empty(); ++t) {
    std::vector<Candidate> candidates;
    for (const Candidate& h : alive) {
      const std::vector<double> logp = step(with_bos(h.tokens));
      for (std::size_t tok = 0; tok < vocab_size; ++tok) {
        if (!generatable(static_cast<int>(tok))) continue;
        Candidate c{h.tokens, h.log_prob + logp[tok]};
        c.tokens.push_back(static_cast<int>(tok));
        candidates.push_back(std::move(c));
      }
    }
    const std::size_t keep = std::min(beam_size, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      candidate_before);
    alive.clear();
    for (std::size_t i = 0; i < keep; ++i) {
      Candidate& c = candidates[i];
      if (c.tokens.back() == token::kEos) {
        const double score = c.log_prob / length_penalty(t, alpha);
        finished.push_back({std::move(c.tokens), c.log_prob, score});
      } else {
        alive.push_back(std::move(c));
      }
    }
    if (!finished.empty() && !alive.empty()) {
      // Log-probabilities only decrease, so a live hypothesis scores at most
      // log_prob / lp(max_len).
      const auto best = std::min_element(finished.begin(), finished.end(), finished_before);
      double bound = -std::numeric_limits<double>::infinity();
      for (const Candidate& c : alive) bound = std::max(bound, c.log_prob / length_penalty(max_len, alpha));
      if (best->score >= bound) alive.clear();
    }
  }

  BeamResult result;
  if (!finished.empty()) {
    const Finished& best = *std::min_element(finished.begin(), finished.end(), finished_before);
    result.tokens.assign(best.tokens.begin(), best.tokens.end() - 1);
    result.log_prob = best.log_prob;
    result.score = best.score;
    result.finished = true;
    return result;
  }
  if (!alive.empty()) {
    const Candidate& best = *std::min_element(alive.begin(), alive.end(), candidate_before);
    result.tokens = best.tokens;
    result.log_prob = best.log_prob;
    result.score = best.log_prob / length_penalty(best.tokens.size(), alpha);
  }
  return result;
}

BeamResult beam_search(const Seq2SeqModel& model, std::span<const int> source, std::size_t beam_size, double alpha,
                       std::size_t max_len) {
  return beam_search(model_step(model, source), model.config().vocab_size, beam_size, alpha, max_len);
}

BeamResult greedy_decode(const StepFunction& step, std::size_t vocab_size, double alpha, std::size_t max_len) {
  std::vector<int> tokens;
  double log_prob = 0;
  for (std::size_t t = 1; t <= max_len; ++t) {
    const std::vector<double> logp = step(with_bos(tokens));
    int best = -1;
    for (std::size_t tok = 0; tok < vocab_size; ++tok) {
      if (!generatable(static_cast<int>(tok))) continue;
      if (best < 0 || logp[tok] > logp[static_cast<std::size_t>(best)]) best = static_cast<int>(tok);
    }
    log_prob += logp[static_cast<std::size_t>(best)];
    if (best == token::kEos) {
      return {tokens, log_prob, log_prob / length_penalty(t, alpha), true};
    }
    tokens.push_back(best);
  }
  return {tokens, log_prob, log_prob / length_penalty(tokens.size(), alpha), false};
}

BeamResult greedy_decode(const Seq2SeqModel& model, std::span<const int> source, double alpha, std::size_t max_len) {
  return greedy_decode(model_step(model, source), model.config().vocab_size, alpha, max_len);
}

std::size_t decode_budget(const Seq2SeqModel& model, std::size_t source_len) {
  return std::min(model.config().max_len, source_len + 10);
}

}  // namespace rtal
