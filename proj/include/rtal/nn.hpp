#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "rtal/rng.hpp"
#include "rtal/tensor.hpp"

namespace rtal {

/// Training mode enables dropout, drawing masks from `rng`.
struct ForwardMode {
  bool training = false;
  Rng* rng = nullptr;

  static ForwardMode eval() { return {}; }
  static ForwardMode train(Rng& r) { return {true, &r}; }
};

struct NamedParam {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedParam>;

/// Parameter factory bound to one generator and dtype. Projections use the
/// Glorot uniform bound sqrt(6 / (fan_in + fan_out)).
class Initializer {
 public:
  Initializer(std::uint64_t seed, DType dtype) : rng_(seed), dtype_(dtype) {}
  Tensor glorot(std::size_t fan_in, std::size_t fan_out);
  Tensor constant(Shape shape, double value);
  DType dtype() const noexcept { return dtype_; }

 private:
  Rng rng_;
  DType dtype_;
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  static Linear create(std::size_t in, std::size_t out, Initializer& init);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta_shift;
  double eps = 1e-6;

  static LayerNorm create(std::size_t d, double eps, Initializer& init);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

/// max(0, x W1 + b1) W2 + b2, applied per position.
struct FeedForward {
  Linear inner;
  Linear outer;

  static FeedForward create(std::size_t in, std::size_t hidden, std::size_t out, Initializer& init);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

/// softmax(Q K^T / sqrt(d_k)) V where d_k is the last extent of K.
/// Q: [..., n_q, d], K: [..., n_k, d], V: [..., n_k, d_v].
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Mask* mask = nullptr);

struct MultiHeadAttention {
  std::size_t heads = 1;
  Linear query;
  Linear key;
  Linear value;
  Linear output;

  static MultiHeadAttention create(std::size_t d_model, std::size_t heads, Initializer& init);
  /// Inputs are [batch, len, d_model]; the mask broadcasts to
  /// [batch, heads, len_q, len_k].
  Tensor forward(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in, const Mask* mask) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct LayerDims {
  std::size_t d_model = 512;
  std::size_t heads = 8;
  std::size_t d_ff = 2048;
  double dropout = 0.1;
  double norm_eps = 1e-6;
};

/// Pre-norm encoder layer: x + drop(SelfAttn(LN(x))), then x + drop(FFN(LN(x))).
struct EncoderLayer {
  LayerNorm attn_norm;
  MultiHeadAttention self_attn;
  LayerNorm ffn_norm;
  FeedForward ffn;
  double dropout = 0;

  static EncoderLayer create(const LayerDims& dims, Initializer& init);
  Tensor forward(const Tensor& x, const Mask* src_mask, const ForwardMode& mode) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

/// Pre-norm decoder layer with causal self-attention, cross-attention over the
/// encoder memory and a position-wise FFN.
struct DecoderLayer {
  LayerNorm self_norm;
  MultiHeadAttention self_attn;
  LayerNorm cross_norm;
  MultiHeadAttention cross_attn;
  LayerNorm ffn_norm;
  FeedForward ffn;
  double dropout = 0;

  static DecoderLayer create(const LayerDims& dims, Initializer& init);
  Tensor forward(const Tensor& x, const Tensor& memory, const Mask* tgt_mask, const Mask* src_mask,
                 const ForwardMode& mode) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

/// [max_len, d_model] table: sin at even feature indices, cos at odd ones.
Tensor sinusoidal_positions(std::size_t max_len, std::size_t d_model, DType dtype = DType::F32);

/// Embedding rows scaled by sqrt(d_model) plus positional encodings.
/// `ids` is [batch, len] row-major.
Tensor embed(const Tensor& table, const Tensor& positions, std::span<const int> ids, std::size_t batch, std::size_t len);

/// Inverted dropout. Identity when `rate` is 0.
Tensor dropout(const Tensor& x, double rate, Rng& rng);
/// Dropout in training mode, identity otherwise.
Tensor dropout(const Tensor& x, double rate, const ForwardMode& mode);

/// Mean over non-pad positions of KL(q || softmax(logits)), where q puts
/// 1 - eps_ls on the gold token and eps_ls / (V - 1) on every other token.
/// logits: [batch, len, vocab]; targets: batch * len ids.
Tensor label_smoothed_ce(const Tensor& logits, std::span<const int> targets, double eps_ls, int pad_id);

}  // namespace rtal
