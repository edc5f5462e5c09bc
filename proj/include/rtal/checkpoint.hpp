#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rtal/nn.hpp"
#include "rtal/tensor.hpp"

namespace rtal {

class Seq2SeqModel;

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Named parameter values plus training metadata. Values are single precision.
///
/// Binary layout, all integers little-endian:
///   u32 version | u64 config digest | u64 step
///   then per record until end of file:
///   u32 name length | name bytes | u32 rank | u64 extent * rank | f32 payload
struct Checkpoint {
  std::uint64_t step = 0;
  std::uint64_t config_digest = 0;
  std::vector<NamedParam> params;

  const Tensor* find(std::string_view name) const;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);

/// Writes to a temporary sibling and renames it into place.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Single-precision copy of a parameter list.
Checkpoint snapshot(const ParamList& params, std::uint64_t step, std::uint64_t config_digest);
Checkpoint snapshot(const Seq2SeqModel& model, std::uint64_t step);
/// Copies values into `params` by name. Names and shapes must match exactly.
void load_params(const ParamList& params, const Checkpoint& ckpt);
/// Also checks the config digest.
void load_model(Seq2SeqModel& model, const Checkpoint& ckpt);

/// Element-wise arithmetic mean; step is the maximum input step. Each element
/// is summed in sorted order so the result does not depend on argument order.
Checkpoint average_checkpoints(std::span<const Checkpoint> checkpoints);

}  // namespace rtal
