#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "rtal/aggregation.hpp"
#include "rtal/nn.hpp"
#include "rtal/tensor.hpp"

namespace rtal {

/// Reserved token ids shared by every task vocabulary.
namespace token {
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kFirstSymbol = 3;
}  // namespace token

enum class AggPosition { Encoder, Decoder, Both };
const char* to_string(AggPosition position);
AggPosition parse_position(const std::string& text);

struct AggregationSpec {
  AggStructure structure = AggStructure::None;
  AggFormulaKind formula = AggFormulaKind::EwpFFN;
  AggPosition position = AggPosition::Both;
};

struct ModelConfig {
  std::size_t num_layers = 6;  // encoder and decoder depth
  std::size_t d_model = 512;
  std::size_t num_heads = 8;
  std::size_t d_ff = 2048;
  std::size_t vocab_size = 37000;
  std::size_t max_len = 256;
  double dropout = 0.1;
  AggregationSpec aggregation;
  std::size_t agg_inner_dim = 0;  // 0 selects d_model
  double norm_eps = 1e-6;
  std::uint64_t seed = 1;
  DType dtype = DType::F32;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  bool aggregates_encoder() const;
  bool aggregates_decoder() const;
  std::size_t inner_dim() const { return agg_inner_dim == 0 ? d_model : agg_inner_dim; }
  /// 1-based inclusive range of aggregated layers, if any.
  std::optional<std::pair<std::size_t, std::size_t>> aggregated_span() const;

  nlohmann::json to_json() const;
  /// Reads known keys, keeping defaults for missing ones.
  static ModelConfig from_json(const nlohmann::json& j);
  /// FNV-1a over the canonical JSON form; recorded in checkpoints.
  std::uint64_t digest() const;

  static ModelConfig base();
  static ModelConfig big();
};

/// Itemized trainable-scalar count.
struct ParamReport {
  std::size_t embedding = 0;
  std::size_t per_encoder_layer = 0;
  std::size_t per_decoder_layer = 0;
  std::size_t encoder_layers = 0;
  std::size_t decoder_layers = 0;
  std::size_t final_norms = 0;
  std::size_t encoder_aggregation = 0;
  std::size_t decoder_aggregation = 0;
  std::size_t total = 0;

  nlohmann::json to_json() const;
};

/// Closed-form count from the configuration alone.
ParamReport count_params(const ModelConfig& config);

/// Padded token matrices for one training step. Sources get EOS appended;
/// decoder inputs are BOS + target and decoder outputs are target + EOS.
struct Batch {
  std::size_t size = 0;
  std::size_t src_len = 0;
  std::size_t tgt_len = 0;
  std::vector<int> src;      // [size, src_len]
  std::vector<int> tgt_in;   // [size, tgt_len]
  std::vector<int> tgt_out;  // [size, tgt_len]
  Mask src_mask;             // [size, 1, 1, src_len]
  Mask tgt_mask;             // [size, 1, tgt_len, tgt_len], causal and padding

  using Pair = std::pair<std::vector<int>, std::vector<int>>;
  static Batch make(std::span<const Pair> pairs);
  std::size_t target_tokens() const;
};

/// Encoder output for one source sentence, reused across decoding steps.
struct SourceCache {
  Tensor memory;  // [1, src_len, d_model]
  Mask src_mask;  // [1, 1, 1, src_len]
};

class Seq2SeqModel {
 public:
  static Seq2SeqModel build(const ModelConfig& config);

  const ModelConfig& config() const noexcept { return config_; }
  /// Every trainable tensor with a stable dotted name, in a fixed order.
  ParamList parameters() const;
  std::size_t parameter_count() const;

  /// Encoder representation consumed by cross-attention: the aggregator root
  /// when the encoder is aggregated, otherwise the top layer, then the final
  /// norm. `src` is [batch, len].
  Tensor encode(std::span<const int> src, std::size_t batch, std::size_t len, const Mask& src_mask,
                const ForwardMode& mode) const;
  /// Logits [batch, len, vocab] for teacher-forced decoder inputs.
  Tensor decode(const Tensor& memory, const Mask& src_mask, std::span<const int> tgt_in, std::size_t batch,
                std::size_t len, const Mask& tgt_mask, const ForwardMode& mode) const;

  Tensor forward_train(const Batch& batch, const ForwardMode& mode) const;
  /// Encodes raw source symbols (EOS is appended).
  SourceCache encode_source(std::span<const int> source) const;
  /// Log-probabilities of the next token after `prefix`, which starts with BOS.
  std::vector<double> forward_step(const SourceCache& cache, std::span<const int> prefix) const;

  Tensor embedding;  // [vocab, d_model], shared by both embeddings and the output projection
  Tensor positions;  // constant sinusoidal table
  std::vector<EncoderLayer> encoder;
  std::vector<DecoderLayer> decoder;
  LayerNorm encoder_norm;
  LayerNorm decoder_norm;
  std::optional<LayerAggregator> encoder_agg;
  std::optional<LayerAggregator> decoder_agg;

 private:
  ModelConfig config_;
};

Tensor forward_train(const Seq2SeqModel& model, const Batch& batch, const ForwardMode& mode = {});
std::vector<double> forward_step(const Seq2SeqModel& model, const SourceCache& cache, std::span<const int> prefix);

}  // namespace rtal
