#include "rtal/nn.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "rtal/errors.hpp"
#include "rtal/ops.hpp"
#include "rtal/tape.hpp"

namespace rtal {

Tensor Initializer::glorot(std::size_t fan_in, std::size_t fan_out) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t({fan_in, fan_out}, dtype_);
  visit_dtype(dtype_, [&]<class T>() {
    for (T& v : t.mutable_values<T>()) v = static_cast<T>(rng_.uniform(-bound, bound));
  });
  return t.set_requires_grad(true);
}

Tensor Initializer::constant(Shape shape, double value) {
  return Tensor::full(std::move(shape), value, dtype_).set_requires_grad(true);
}

Linear Linear::create(std::size_t in, std::size_t out, Initializer& init) {
  Linear l;
  l.weight = init.glorot(in, out);
  l.bias = init.constant({out}, 0.0);
  return l;
}

Tensor Linear::forward(const Tensor& x) const {
  if (x.rank() == 1) return reshape(forward(reshape(x, {1, x.dim(0)})), {weight.dim(1)});
  return add(matmul(x, weight), bias);
}

void Linear::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

LayerNorm LayerNorm::create(std::size_t d, double eps, Initializer& init) {
  return {init.constant({d}, 1.0), init.constant({d}, 0.0), eps};
}

Tensor LayerNorm::forward(const Tensor& x) const { return layer_norm(x, gamma, beta_shift, eps); }

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta_shift", beta_shift});
}

FeedForward FeedForward::create(std::size_t in, std::size_t hidden, std::size_t out, Initializer& init) {
  FeedForward f;
  f.inner = Linear::create(in, hidden, init);
  f.outer = Linear::create(hidden, out, init);
  return f;
}

Tensor FeedForward::forward(const Tensor& x) const { return outer.forward(relu(inner.forward(x))); }

void FeedForward::collect(const std::string& prefix, ParamList& out) const {
  inner.collect(prefix + ".inner", out);
  outer.collect(prefix + ".outer", out);
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Mask* mask) {
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(k.dim(-1)));
  const Tensor scores = scale(matmul(q, transpose_last_two(k)), scale_factor);
  return matmul(softmax_last_dim(scores, mask), v);
}

MultiHeadAttention MultiHeadAttention::create(std::size_t d_model, std::size_t heads, Initializer& init) {
  if (heads == 0 || d_model % heads != 0) {
    throw ConfigError("num_heads", "d_model " + std::to_string(d_model) + " is not divisible by " +
                                       std::to_string(heads) + " heads");
  }
  MultiHeadAttention m;
  m.heads = heads;
  m.query = Linear::create(d_model, d_model, init);
  m.key = Linear::create(d_model, d_model, init);
  m.value = Linear::create(d_model, d_model, init);
  m.output = Linear::create(d_model, d_model, init);
  return m;
}

namespace {

constexpr std::array<std::size_t, 4> kSwapMiddle{0, 2, 1, 3};

// [B, T, d] -> [B, H, T, d / H]
Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
  return permute(reshape(x, {b, t, heads, d / heads}), kSwapMiddle);
}

Tensor merge_heads(const Tensor& x) {
  const std::size_t b = x.dim(0), h = x.dim(1), t = x.dim(2), dh = x.dim(3);
  return reshape(permute(x, kSwapMiddle), {b, t, h * dh});
}

}  // namespace

Tensor MultiHeadAttention::forward(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in, const Mask* mask) const {
  const std::size_t d_model = query.weight.dim(0);
  for (const Tensor* t : {&q_in, &k_in, &v_in}) {
    if (t->rank() != 3 || t->dim(2) != d_model) {
      throw ShapeError("multi_head_attention: inputs must be [batch, len, " + std::to_string(d_model) + "], got " +
                       to_string(t->shape()));
    }
  }
  const Tensor q = split_heads(query.forward(q_in), heads);
  const Tensor k = split_heads(key.forward(k_in), heads);
  const Tensor v = split_heads(value.forward(v_in), heads);
  return output.forward(merge_heads(scaled_dot_attention(q, k, v, mask)));
}

void MultiHeadAttention::collect(const std::string& prefix, ParamList& out) const {
  query.collect(prefix + ".query", out);
  key.collect(prefix + ".key", out);
  value.collect(prefix + ".value", out);
  output.collect(prefix + ".output", out);
}

EncoderLayer EncoderLayer::create(const LayerDims& dims, Initializer& init) {
  EncoderLayer l;
  l.attn_norm = LayerNorm::create(dims.d_model, dims.norm_eps, init);
  l.self_attn = MultiHeadAttention::create(dims.d_model, dims.heads, init);
  l.ffn_norm = LayerNorm::create(dims.d_model, dims.norm_eps, init);
  l.ffn = FeedForward::create(dims.d_model, dims.d_ff, dims.d_model, init);
  l.dropout = dims.dropout;
  return l;
}

Tensor EncoderLayer::forward(const Tensor& x, const Mask* src_mask, const ForwardMode& mode) const {
  const Tensor n1 = attn_norm.forward(x);
  const Tensor h = add(x, rtal::dropout(self_attn.forward(n1, n1, n1, src_mask), dropout, mode));
  return add(h, rtal::dropout(ffn.forward(ffn_norm.forward(h)), dropout, mode));
}

void EncoderLayer::collect(const std::string& prefix, ParamList& out) const {
  attn_norm.collect(prefix + ".attn_norm", out);
  self_attn.collect(prefix + ".self_attn", out);
  ffn_norm.collect(prefix + ".ffn_norm", out);
  ffn.collect(prefix + ".ffn", out);
}

DecoderLayer DecoderLayer::create(const LayerDims& dims, Initializer& init) {
  DecoderLayer l;
  l.self_norm = LayerNorm::create(dims.d_model, dims.norm_eps, init);
  l.self_attn = MultiHeadAttention::create(dims.d_model, dims.heads, init);
  l.cross_norm = LayerNorm::create(dims.d_model, dims.norm_eps, init);
  l.cross_attn = MultiHeadAttention::create(dims.d_model, dims.heads, init);
  l.ffn_norm = LayerNorm::create(dims.d_model, dims.norm_eps, init);
  l.ffn = FeedForward::create(dims.d_model, dims.d_ff, dims.d_model, init);
  l.dropout = dims.dropout;
  return l;
}

Tensor DecoderLayer::forward(const Tensor& x, const Tensor& memory, const Mask* tgt_mask, const Mask* src_mask,
                             const ForwardMode& mode) const {
  const Tensor n1 = self_norm.forward(x);
  const Tensor h1 = add(x, rtal::dropout(self_attn.forward(n1, n1, n1, tgt_mask), dropout, mode));
  const Tensor n2 = cross_norm.forward(h1);
  const Tensor h2 = add(h1, rtal::dropout(cross_attn.forward(n2, memory, memory, src_mask), dropout, mode));
  return add(h2, rtal::dropout(ffn.forward(ffn_norm.forward(h2)), dropout, mode));
}

void DecoderLayer::collect(const std::string& prefix, ParamList& out) const {
  self_norm.collect(prefix + ".self_norm", out);
  self_attn.collect(prefix + ".self_attn", out);
  cross_norm.collect(prefix + ".cross_norm", out);
  cross_attn.collect(prefix + ".cross_attn", out);
  ffn_norm.collect(prefix + ".ffn_norm", out);
  ffn.collect(prefix + ".ffn", out);
}

Tensor sinusoidal_positions(std::size_t max_len, std::size_t d_model, DType dtype) {
  Tensor t({max_len, d_model}, dtype);
  for (std::size_t pos = 0; pos < max_len; ++pos) {
    for (std::size_t i = 0; i < d_model; ++i) {
      const double exponent = static_cast<double>(i - i % 2) / static_cast<double>(d_model);
      const double angle = static_cast<double>(pos) / std::pow(10000.0, exponent);
      t.set(pos * d_model + i, i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return t;
}

Tensor embed(const Tensor& table, const Tensor& positions, std::span<const int> ids, std::size_t batch, std::size_t len) {
  if (len > positions.dim(0)) {
    throw IndexError("sequence length " + std::to_string(len) + " exceeds max_len " + std::to_string(positions.dim(0)));
  }
  const double factor = std::sqrt(static_cast<double>(table.dim(1)));
  const Tensor tokens = scale(embedding_lookup(table, ids, {batch, len}), factor);
  return add(tokens, slice(positions, 0, 0, len));
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate < 0 || rate >= 1) throw std::invalid_argument("dropout rate must lie in [0, 1)");
  if (rate == 0) return x;
  return visit_dtype(x.dtype(), [&]<class T>() {
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    std::vector<T> factors(x.numel());
    for (T& f : factors) f = rng.uniform() >= rate ? keep_scale : T(0);
    Tensor out(x.shape(), x.dtype());
    const auto xd = x.values<T>();
    auto od = out.mutable_values<T>();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = xd[i] * factors[i];
    return record_op(out, {x}, [x, factors = std::move(factors)](const Tensor& o) {
      const auto g = o.grad_values<T>();
      Tensor tx = x;
      auto gx = tx.mutable_grad<T>();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factors[i];
    });
  });
}

Tensor dropout(const Tensor& x, double rate, const ForwardMode& mode) {
  if (!mode.training || rate == 0) return x;
  if (mode.rng == nullptr) throw std::invalid_argument("training mode needs an rng for dropout");
  return dropout(x, rate, *mode.rng);
}

Tensor label_smoothed_ce(const Tensor& logits, std::span<const int> targets, double eps_ls, int pad_id) {
  if (logits.rank() != 3) throw ShapeError("label_smoothed_ce: logits must be [batch, len, vocab], got " + to_string(logits.shape()));
  const std::size_t vocab = logits.dim(2);
  const std::size_t rows = logits.numel() / vocab;
  if (targets.size() != rows) {
    throw ShapeError("label_smoothed_ce: " + std::to_string(targets.size()) + " targets for " + std::to_string(rows) + " positions");
  }
  if (eps_ls < 0 || eps_ls >= 1) throw std::invalid_argument("label smoothing must lie in [0, 1)");
  if (vocab < 2) throw ShapeError("label_smoothed_ce: vocabulary needs at least 2 entries");
  std::size_t counted = 0;
  for (int t : targets) {
    if (t == pad_id) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) throw IndexError("label_smoothed_ce: target id " + std::to_string(t) + " outside vocabulary");
    ++counted;
  }
  if (counted == 0) throw std::invalid_argument("label_smoothed_ce: batch contains only padding");

  const double on = 1.0 - eps_ls;
  const double off = eps_ls / static_cast<double>(vocab - 1);
  // sum_c q_c log q_c, identical for every counted row
  double neg_entropy = 0;
  if (on > 0) neg_entropy += on * std::log(on);
  if (off > 0) neg_entropy += static_cast<double>(vocab - 1) * off * std::log(off);

  return visit_dtype(logits.dtype(), [&]<class T>() {
    const auto x = logits.values<T>();
    std::vector<T> probs(x.size());
    double total = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      if (targets[r] == pad_id) continue;
      const T* in = x.data() + r * vocab;
      const T mx = *std::max_element(in, in + vocab);
      double z = 0;
      for (std::size_t c = 0; c < vocab; ++c) z += std::exp(static_cast<double>(in[c] - mx));
      const double lse = static_cast<double>(mx) + std::log(z);
      double cross = 0;
      for (std::size_t c = 0; c < vocab; ++c) {
        const double logp = static_cast<double>(in[c]) - lse;
        probs[r * vocab + c] = static_cast<T>(std::exp(logp));
        cross += (static_cast<int>(c) == targets[r] ? on : off) * logp;
      }
      total += neg_entropy - cross;
    }
    Tensor out(Shape{}, logits.dtype());
    out.mutable_values<T>()[0] = static_cast<T>(total / static_cast<double>(counted));
    std::vector<int> saved(targets.begin(), targets.end());
    return record_op(out, {logits}, [logits, probs = std::move(probs), saved = std::move(saved), vocab, pad_id, on, off,
                                     counted](const Tensor& o) {
      const double g = static_cast<double>(o.grad_values<T>()[0]) / static_cast<double>(counted);
      Tensor tl = logits;
      auto gl = tl.mutable_grad<T>();
      for (std::size_t r = 0; r < saved.size(); ++r) {
        if (saved[r] == pad_id) continue;
        for (std::size_t c = 0; c < vocab; ++c) {
          const double q = static_cast<int>(c) == saved[r] ? on : off;
          gl[r * vocab + c] += static_cast<T>(g * (static_cast<double>(probs[r * vocab + c]) - q));
        }
      }
    });
  });
}

}  // namespace rtal
