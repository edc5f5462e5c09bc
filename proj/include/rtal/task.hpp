#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rtal/model.hpp"

namespace rtal {

enum class TaskKind { Copy, Reverse, Sort };
enum class Split { Train, Valid, Test };

const char* to_string(TaskKind kind);
TaskKind parse_task(const std::string& text);

/// Desk-scale sequence transduction problem over the symbols
/// [token::kFirstSymbol, vocab_size).
///
/// Every source sequence belongs to exactly one split, decided by a hash of
/// its tokens, so held-out inputs never occur in training data.
struct SyntheticTask {
  TaskKind kind = TaskKind::Copy;
  std::size_t vocab_size = 16;
  std::size_t min_len = 3;
  std::size_t max_len = 12;
};

std::vector<int> task_target(TaskKind kind, std::span<const int> source);
Split split_of(std::span<const int> source);

/// `count` deterministic (source, target) pairs from `split`.
std::vector<Batch::Pair> generate_task(const SyntheticTask& task, Split split, std::size_t count, std::uint64_t seed);

/// Training pairs for one optimizer step: sentences are drawn until the
/// target side (including EOS) reaches `token_budget` tokens. Depends only on
/// (seed, step).
std::vector<Batch::Pair> training_batch(const SyntheticTask& task, std::size_t token_budget, std::uint64_t seed,
                                        std::uint64_t step);

}  // namespace rtal
