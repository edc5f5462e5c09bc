#include "rtal/model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "rtal/errors.hpp"
#include "rtal/ops.hpp"
#include "rtal/tape.hpp"

namespace rtal {

using nlohmann::json;

const char* to_string(AggPosition position) {
  switch (position) {
    case AggPosition::Encoder: return "encoder";
    case AggPosition::Decoder: return "decoder";
    case AggPosition::Both: return "both";
  }
  return "?";
}

AggPosition parse_position(const std::string& text) {
  std::string t = text;
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (t == "encoder") return AggPosition::Encoder;
  if (t == "decoder") return AggPosition::Decoder;
  if (t == "both") return AggPosition::Both;
  throw ConfigError("position", "unknown aggregation position '" + text + "' (encoder, decoder, both)");
}

// ------------------------------------------------------------------ config

bool ModelConfig::aggregates_encoder() const {
  return aggregation.structure != AggStructure::None && aggregation.position != AggPosition::Decoder;
}

bool ModelConfig::aggregates_decoder() const {
  return aggregation.structure != AggStructure::None && aggregation.position != AggPosition::Encoder;
}

std::optional<std::pair<std::size_t, std::size_t>> ModelConfig::aggregated_span() const {
  if (aggregation.structure == AggStructure::None) return std::nullopt;
  const std::size_t span = LayerAggregator::span_for(aggregation.structure, num_layers);
  return std::make_pair(num_layers - span + 1, num_layers);
}

void ModelConfig::validate() const {
  if (num_layers == 0) throw ConfigError("num_layers", "must be at least 1");
  if (d_model == 0) throw ConfigError("d_model", "must be positive");
  if (num_heads == 0 || d_model % num_heads != 0) {
    throw ConfigError("num_heads", "d_model " + std::to_string(d_model) + " is not divisible by " +
                                       std::to_string(num_heads) + " heads");
  }
  if (d_ff == 0) throw ConfigError("d_ff", "must be positive");
  if (vocab_size <= static_cast<std::size_t>(token::kFirstSymbol)) {
    throw ConfigError("vocab_size", "must exceed the " + std::to_string(token::kFirstSymbol) + " reserved tokens");
  }
  if (max_len < 2) throw ConfigError("max_len", "must be at least 2");
  if (dropout < 0 || dropout >= 1) throw ConfigError("dropout", "must lie in [0, 1)");
  if (!(norm_eps > 0)) throw ConfigError("norm_eps", "must be positive");
  if (aggregation.structure != AggStructure::None) {
    try {
      LayerAggregator::span_for(aggregation.structure, num_layers);
    } catch (const StructureError& e) {
      throw ConfigError("num_layers", e.what());
    }
  }
}

json ModelConfig::to_json() const {
  return json{{"num_layers", num_layers},
              {"d_model", d_model},
              {"num_heads", num_heads},
              {"d_ff", d_ff},
              {"vocab_size", vocab_size},
              {"max_len", max_len},
              {"dropout", dropout},
              {"structure", to_string(aggregation.structure)},
              {"formula", to_string(aggregation.formula)},
              {"position", to_string(aggregation.position)},
              {"agg_inner_dim", agg_inner_dim},
              {"norm_eps", norm_eps},
              {"seed", seed},
              {"dtype", to_string(dtype)}};
}

namespace {

template <class T>
void read_field(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(key, std::string("invalid value: ") + e.what());
  }
}

void read_count(const json& j, const char* key, std::size_t& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0) throw ConfigError(key, "must be a non-negative integer");
  out = v.get<std::size_t>();
}

}  // namespace

ModelConfig ModelConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config", "must be a JSON object");
  ModelConfig c;
  read_count(j, "num_layers", c.num_layers);
  read_count(j, "d_model", c.d_model);
  read_count(j, "num_heads", c.num_heads);
  read_count(j, "d_ff", c.d_ff);
  read_count(j, "vocab_size", c.vocab_size);
  read_count(j, "max_len", c.max_len);
  read_field(j, "dropout", c.dropout);
  read_count(j, "agg_inner_dim", c.agg_inner_dim);
  read_field(j, "norm_eps", c.norm_eps);
  read_field(j, "seed", c.seed);
  std::string text;
  if (j.contains("structure")) {
    read_field(j, "structure", text);
    c.aggregation.structure = parse_structure(text);
  }
  if (j.contains("formula")) {
    read_field(j, "formula", text);
    c.aggregation.formula = parse_formula(text);
  }
  if (j.contains("position")) {
    read_field(j, "position", text);
    c.aggregation.position = parse_position(text);
  }
  if (j.contains("dtype")) {
    read_field(j, "dtype", text);
    if (text == "f32") c.dtype = DType::F32;
    else if (text == "f64") c.dtype = DType::F64;
    else throw ConfigError("dtype", "must be f32 or f64");
  }
  return c;
}

std::uint64_t ModelConfig::digest() const {
  const std::string text = to_json().dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

ModelConfig ModelConfig::base() { return ModelConfig{}; }

ModelConfig ModelConfig::big() {
  ModelConfig c;
  c.d_model = 1024;
  c.num_heads = 16;
  c.d_ff = 4096;
  c.dropout = 0.3;
  return c;
}

// ------------------------------------------------------------------ counting

json ParamReport::to_json() const {
  return json{{"embedding", embedding},
              {"per_encoder_layer", per_encoder_layer},
              {"per_decoder_layer", per_decoder_layer},
              {"encoder_layers", encoder_layers},
              {"decoder_layers", decoder_layers},
              {"final_norms", final_norms},
              {"encoder_aggregation", encoder_aggregation},
              {"decoder_aggregation", decoder_aggregation},
              {"total", total}};
}

ParamReport count_params(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.d_model;
  const std::size_t attention = 4 * (d * d + d);
  const std::size_t ffn = (d * c.d_ff + c.d_ff) + (c.d_ff * d + d);
  const std::size_t norm = 2 * d;
  ParamReport r;
  r.embedding = c.vocab_size * d;
  r.per_encoder_layer = attention + ffn + 2 * norm;
  r.per_decoder_layer = 2 * attention + ffn + 3 * norm;
  r.encoder_layers = c.num_layers * r.per_encoder_layer;
  r.decoder_layers = c.num_layers * r.per_decoder_layer;
  r.final_norms = 2 * norm;
  const auto& agg = c.aggregation;
  if (c.aggregates_encoder()) {
    r.encoder_aggregation = LayerAggregator::param_count(agg.structure, agg.formula, c.num_layers, d, c.inner_dim());
  }
  if (c.aggregates_decoder()) {
    r.decoder_aggregation = LayerAggregator::param_count(agg.structure, agg.formula, c.num_layers, d, c.inner_dim());
  }
  r.total = r.embedding + r.encoder_layers + r.decoder_layers + r.final_norms + r.encoder_aggregation +
            r.decoder_aggregation;
  return r;
}

// ------------------------------------------------------------------ batches

Batch Batch::make(std::span<const Pair> pairs) {
  if (pairs.empty()) throw std::invalid_argument("Batch::make: no sentence pairs");
  Batch b;
  b.size = pairs.size();
  for (const auto& [src, tgt] : pairs) {
    b.src_len = std::max(b.src_len, src.size() + 1);
    b.tgt_len = std::max(b.tgt_len, tgt.size() + 1);
  }
  b.src.assign(b.size * b.src_len, token::kPad);
  b.tgt_in.assign(b.size * b.tgt_len, token::kPad);
  b.tgt_out.assign(b.size * b.tgt_len, token::kPad);
  std::vector<std::uint8_t> src_visible(b.size * b.src_len, 0);
  std::vector<std::uint8_t> tgt_visible(b.size * b.tgt_len * b.tgt_len, 0);
  for (std::size_t i = 0; i < b.size; ++i) {
    const auto& [src, tgt] = pairs[i];
    std::copy(src.begin(), src.end(), b.src.begin() + static_cast<std::ptrdiff_t>(i * b.src_len));
    b.src[i * b.src_len + src.size()] = token::kEos;
    std::fill_n(src_visible.begin() + static_cast<std::ptrdiff_t>(i * b.src_len), src.size() + 1, 1);

    b.tgt_in[i * b.tgt_len] = token::kBos;
    std::copy(tgt.begin(), tgt.end(), b.tgt_in.begin() + static_cast<std::ptrdiff_t>(i * b.tgt_len + 1));
    std::copy(tgt.begin(), tgt.end(), b.tgt_out.begin() + static_cast<std::ptrdiff_t>(i * b.tgt_len));
    b.tgt_out[i * b.tgt_len + tgt.size()] = token::kEos;
    const std::size_t real = tgt.size() + 1;
    for (std::size_t q = 0; q < b.tgt_len; ++q) {
      // Padded query rows still see position 0 so no row is fully masked.
      const std::size_t last = std::min(q, real - 1);
      for (std::size_t k = 0; k <= last; ++k) tgt_visible[(i * b.tgt_len + q) * b.tgt_len + k] = 1;
    }
  }
  b.src_mask = Mask({b.size, 1, 1, b.src_len}, std::move(src_visible));
  b.tgt_mask = Mask({b.size, 1, b.tgt_len, b.tgt_len}, std::move(tgt_visible));
  return b;
}

std::size_t Batch::target_tokens() const {
  return static_cast<std::size_t>(std::count_if(tgt_out.begin(), tgt_out.end(), [](int t) { return t != token::kPad; }));
}

// ------------------------------------------------------------------ model

Seq2SeqModel Seq2SeqModel::build(const ModelConfig& config) {
  config.validate();
  Seq2SeqModel m;
  m.config_ = config;
  const LayerDims dims{config.d_model, config.num_heads, config.d_ff, config.dropout, config.norm_eps};
  // Separate streams keep the layer initialization identical whether or not
  // aggregation is enabled.
  Initializer layers(Rng::derive(config.seed, 1).next(), config.dtype);
  Initializer extra(Rng::derive(config.seed, 2).next(), config.dtype);

  m.embedding = layers.glorot(config.vocab_size, config.d_model);
  m.positions = sinusoidal_positions(config.max_len, config.d_model, config.dtype);
  for (std::size_t i = 0; i < config.num_layers; ++i) m.encoder.push_back(EncoderLayer::create(dims, layers));
  for (std::size_t i = 0; i < config.num_layers; ++i) m.decoder.push_back(DecoderLayer::create(dims, layers));
  m.encoder_norm = LayerNorm::create(config.d_model, config.norm_eps, layers);
  m.decoder_norm = LayerNorm::create(config.d_model, config.norm_eps, layers);

  const AggDims agg_dims{config.d_model, config.inner_dim(), config.dropout, config.norm_eps};
  const auto& spec = config.aggregation;
  if (config.aggregates_encoder()) {
    m.encoder_agg = LayerAggregator::create(spec.structure, spec.formula, config.num_layers, agg_dims, extra);
  }
  if (config.aggregates_decoder()) {
    m.decoder_agg = LayerAggregator::create(spec.structure, spec.formula, config.num_layers, agg_dims, extra);
  }
  return m;
}

ParamList Seq2SeqModel::parameters() const {
  ParamList out;
  out.push_back({"embedding", embedding});
  for (std::size_t i = 0; i < encoder.size(); ++i) encoder[i].collect("encoder.layer" + std::to_string(i), out);
  if (encoder_agg) encoder_agg->collect("encoder.agg", out);
  encoder_norm.collect("encoder.norm", out);
  for (std::size_t i = 0; i < decoder.size(); ++i) decoder[i].collect("decoder.layer" + std::to_string(i), out);
  if (decoder_agg) decoder_agg->collect("decoder.agg", out);
  decoder_norm.collect("decoder.norm", out);
  return out;
}

std::size_t Seq2SeqModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

Tensor Seq2SeqModel::encode(std::span<const int> src, std::size_t batch, std::size_t len, const Mask& src_mask,
                            const ForwardMode& mode) const {
  Tensor x = dropout(embed(embedding, positions, src, batch, len), config_.dropout, mode);
  std::vector<Tensor> outputs;
  outputs.reserve(encoder.size());
  for (const auto& layer : encoder) {
    x = layer.forward(x, &src_mask, mode);
    outputs.push_back(x);
  }
  const Tensor top = encoder_agg ? encoder_agg->aggregate(outputs, mode) : outputs.back();
  return encoder_norm.forward(top);
}

Tensor Seq2SeqModel::decode(const Tensor& memory, const Mask& src_mask, std::span<const int> tgt_in, std::size_t batch,
                            std::size_t len, const Mask& tgt_mask, const ForwardMode& mode) const {
  Tensor x = dropout(embed(embedding, positions, tgt_in, batch, len), config_.dropout, mode);
  std::vector<Tensor> outputs;
  outputs.reserve(decoder.size());
  for (const auto& layer : decoder) {
    x = layer.forward(x, memory, &tgt_mask, &src_mask, mode);
    outputs.push_back(x);
  }
  const Tensor top = decoder_agg ? decoder_agg->aggregate(outputs, mode) : outputs.back();
  return matmul(decoder_norm.forward(top), transpose_last_two(embedding));
}

Tensor Seq2SeqModel::forward_train(const Batch& batch, const ForwardMode& mode) const {
  const Tensor memory = encode(batch.src, batch.size, batch.src_len, batch.src_mask, mode);
  return decode(memory, batch.src_mask, batch.tgt_in, batch.size, batch.tgt_len, batch.tgt_mask, mode);
}

SourceCache Seq2SeqModel::encode_source(std::span<const int> source) const {
  NoGradGuard no_grad;
  std::vector<int> ids(source.begin(), source.end());
  ids.push_back(token::kEos);
  SourceCache cache;
  cache.src_mask = Mask({1, 1, 1, ids.size()}, true);
  cache.memory = encode(ids, 1, ids.size(), cache.src_mask, ForwardMode::eval());
  return cache;
}

std::vector<double> Seq2SeqModel::forward_step(const SourceCache& cache, std::span<const int> prefix) const {
  if (prefix.empty() || prefix.front() != token::kBos) {
    throw std::invalid_argument("forward_step: prefix must start with the BOS symbol");
  }
  NoGradGuard no_grad;
  const std::size_t len = prefix.size();
  std::vector<std::uint8_t> causal(len * len, 0);
  for (std::size_t q = 0; q < len; ++q)
    for (std::size_t k = 0; k <= q; ++k) causal[q * len + k] = 1;
  const Mask tgt_mask({1, 1, len, len}, std::move(causal));
  const Tensor logits = decode(cache.memory, cache.src_mask, prefix, 1, len, tgt_mask, ForwardMode::eval());
  const Tensor last = log_softmax_last_dim(slice(logits, 1, len - 1, len));
  return last.to_vector();
}

Tensor forward_train(const Seq2SeqModel& model, const Batch& batch, const ForwardMode& mode) {
  return model.forward_train(batch, mode);
}

std::vector<double> forward_step(const Seq2SeqModel& model, const SourceCache& cache, std::span<const int> prefix) {
  return model.forward_step(cache, prefix);
}

}  // namespace rtal
