#include "rtal/task.hpp"

#include <algorithm>

#include "rtal/errors.hpp"
#include "rtal/rng.hpp"

namespace rtal {

const char* to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::Copy: return "copy";
    case TaskKind::Reverse: return "reverse";
    case TaskKind::Sort: return "sort";
  }
  return "?";
}

TaskKind parse_task(const std::string& text) {
  if (text == "copy") return TaskKind::Copy;
  if (text == "reverse") return TaskKind::Reverse;
  if (text == "sort") return TaskKind::Sort;
  throw ConfigError("task", "unknown task '" + text + "' (copy, reverse, sort)");
}

std::vector<int> task_target(TaskKind kind, std::span<const int> source) {
  std::vector<int> out(source.begin(), source.end());
  switch (kind) {
    case TaskKind::Copy: break;
    case TaskKind::Reverse: std::reverse(out.begin(), out.end()); break;
    case TaskKind::Sort: std::sort(out.begin(), out.end()); break;
  }
  return out;
}

Split split_of(std::span<const int> source) {
  std::uint64_t h = 0x51ed'270b'1a3c'9d11ULL;
  for (int t : source) h = splitmix64(h ^ static_cast<std::uint64_t>(t));
  switch (h % 10) {
    case 0: return Split::Test;
    case 1: return Split::Valid;
    default: return Split::Train;
  }
}

namespace {

void validate(const SyntheticTask& task) {
  if (task.vocab_size <= static_cast<std::size_t>(token::kFirstSymbol)) {
    throw ConfigError("vocab_size", "leaves no room for task symbols");
  }
  if (task.min_len == 0 || task.min_len > task.max_len) throw ConfigError("min_src_len", "must satisfy 1 <= min <= max");
}

std::vector<int> sample_in_split(const SyntheticTask& task, Split split, Rng& rng) {
  const std::uint64_t symbols = task.vocab_size - static_cast<std::size_t>(token::kFirstSymbol);
  for (int attempt = 0; attempt < 100000; ++attempt) {
    const std::size_t len = task.min_len + rng.below(task.max_len - task.min_len + 1);
    std::vector<int> src(len);
    for (int& t : src) t = token::kFirstSymbol + static_cast<int>(rng.below(symbols));
    if (split_of(src) == split) return src;
  }
  throw std::runtime_error("task space too small to populate the requested split");
}

}  // namespace

std::vector<Batch::Pair> generate_task(const SyntheticTask& task, Split split, std::size_t count, std::uint64_t seed) {
  validate(task);
  Rng rng = Rng::derive(seed, 0x5e1170 + static_cast<std::uint64_t>(split));
  std::vector<Batch::Pair> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<int> src = sample_in_split(task, split, rng);
    std::vector<int> tgt = task_target(task.kind, src);
    out.emplace_back(std::move(src), std::move(tgt));
  }
  return out;
}

std::vector<Batch::Pair> training_batch(const SyntheticTask& task, std::size_t token_budget, std::uint64_t seed,
                                        std::uint64_t step) {
  validate(task);
  Rng rng = Rng::derive(seed ^ 0x7a1d'b47c'0000ULL, step);
  std::vector<Batch::Pair> out;
  std::size_t tokens = 0;
  while (tokens < token_budget) {
    std::vector<int> src = sample_in_split(task, Split::Train, rng);
    std::vector<int> tgt = task_target(task.kind, src);
    tokens += tgt.size() + 1;
    out.emplace_back(std::move(src), std::move(tgt));
  }
  return out;
}

}  // namespace rtal
