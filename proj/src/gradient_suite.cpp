#include "rtal/gradient_suite.hpp"

#include <functional>

#include "rtal/aggregation.hpp"
#include "rtal/grad_check.hpp"
#include "rtal/model.hpp"
#include "rtal/nn.hpp"
#include "rtal/ops.hpp"
#include "rtal/rng.hpp"

namespace rtal {
namespace {

constexpr double kStep = 1e-5;

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape), DType::F64);
  for (double& v : t.mutable_values<double>()) v = rng.uniform(lo, hi);
  return t;
}

std::vector<Tensor> tensors_of(const ParamList& params) {
  std::vector<Tensor> out;
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

// Scalar loss sum(y * w) with fixed weights, so every output coordinate matters.
std::function<Tensor()> projected(std::function<Tensor()> f, std::uint64_t seed) {
  Rng rng(seed);
  Tensor probe = f();
  const Tensor w = random_tensor(probe.shape(), rng);
  return [f = std::move(f), w] { return sum(mul(f(), w)); };
}

}  // namespace

ModelConfig gradient_model_config() {
  ModelConfig cfg;
  cfg.num_layers = 2;
  cfg.d_model = 8;
  cfg.num_heads = 2;
  cfg.d_ff = 16;
  cfg.vocab_size = 9;
  cfg.max_len = 16;
  cfg.dropout = 0;
  cfg.aggregation = {AggStructure::RTAL, AggFormulaKind::EwpFFN, AggPosition::Both};
  cfg.dtype = DType::F64;
  cfg.seed = 7;
  return cfg;
}

std::vector<Batch::Pair> gradient_model_pairs() { return {{{3, 4, 5}, {5, 4}}, {{6, 7}, {7, 6, 8}}}; }

std::vector<GradientCheckResult> run_gradient_suite(double tolerance) {
  std::vector<GradientCheckResult> results;
  auto record = [&](std::string name, double error) {
    results.push_back({std::move(name), error, tolerance, error <= tolerance});
  };
  Rng rng(20240611);
  const std::size_t d = 8;

  {
    const Tensor x = random_tensor({3, 5}, rng, -3.0, 3.0);
    record("softmax", grad_check([](const Tensor& t) { return softmax_last_dim(t); }, x, kStep));
    const Mask mask({3, 5}, std::vector<std::uint8_t>{1, 1, 0, 1, 0, 1, 0, 0, 0, 1, 1, 1, 1, 1, 1});
    record("softmax masked", grad_check([&](const Tensor& t) { return softmax_last_dim(t, &mask); }, x, kStep));
    record("log_softmax", grad_check([](const Tensor& t) { return log_softmax_last_dim(t); }, x, kStep));
  }
  {
    Initializer init(1, DType::F64);
    LayerNorm ln = LayerNorm::create(d, 1e-6, init);
    ln.gamma = random_tensor({d}, rng, 0.5, 1.5).set_requires_grad(true);
    ln.beta_shift = random_tensor({d}, rng).set_requires_grad(true);
    const Tensor x = random_tensor({2, 3, d}, rng);
    record("layer_norm input", grad_check([&](const Tensor& t) { return ln.forward(t); }, x, kStep));
    std::vector<Tensor> params{ln.gamma, ln.beta_shift};
    record("layer_norm params", grad_check_params(projected([&] { return ln.forward(x); }, 2), params, kStep));
  }
  {
    Initializer init(2, DType::F64);
    const FeedForward ffn = FeedForward::create(d, 16, d, init);
    const Tensor x = random_tensor({2, 3, d}, rng);
    record("ffn input", grad_check([&](const Tensor& t) { return ffn.forward(t); }, x, kStep));
    ParamList named;
    ffn.collect("ffn", named);
    auto params = tensors_of(named);
    record("ffn params", grad_check_params(projected([&] { return ffn.forward(x); }, 3), params, kStep));
  }
  {
    Initializer init(3, DType::F64);
    const MultiHeadAttention mha = MultiHeadAttention::create(d, 2, init);
    const Tensor x = random_tensor({2, 3, d}, rng);
    const Tensor mem = random_tensor({2, 4, d}, rng);
    const Mask mask({2, 1, 1, 4}, std::vector<std::uint8_t>{1, 1, 1, 0, 1, 1, 1, 1});
    record("attention query", grad_check([&](const Tensor& t) { return mha.forward(t, mem, mem, &mask); }, x, kStep));
    record("attention memory", grad_check([&](const Tensor& t) { return mha.forward(x, t, t, &mask); }, mem, kStep));
    ParamList named;
    mha.collect("mha", named);
    auto params = tensors_of(named);
    record("attention params",
           grad_check_params(projected([&] { return mha.forward(x, mem, mem, &mask); }, 4), params, kStep));
  }

  const AggDims dims{d, 12, 0.0, 1e-6};
  for (AggFormulaKind kind : {AggFormulaKind::Mean, AggFormulaKind::ConcatFFN, AggFormulaKind::EwpFFN}) {
    Initializer init(4, DType::F64);
    const AggFormula f = AggFormula::create(kind, dims, init);
    const Tensor a = random_tensor({2, 3, d}, rng);
    const Tensor b = random_tensor({2, 3, d}, rng);
    const std::string name = std::string("agg ") + to_string(kind);
    record(name + " left", grad_check([&](const Tensor& t) { return f.apply(t, b); }, a, kStep));
    record(name + " right", grad_check([&](const Tensor& t) { return f.apply(a, t); }, b, kStep));
    ParamList named;
    f.collect("agg", named);
    if (!named.empty()) {
      auto params = tensors_of(named);
      record(name + " params", grad_check_params(projected([&] { return f.apply(a, b); }, 5), params, kStep));
    }
  }
  for (AggFormulaKind kind : {AggFormulaKind::Mean, AggFormulaKind::ConcatFFN, AggFormulaKind::EwpFFN}) {
    Initializer init(5, DType::F64);
    const AggTree tree = AggTree::create(4, kind, dims, init);
    std::vector<Tensor> leaves;
    for (int i = 0; i < 4; ++i) leaves.push_back(random_tensor({2, 3, d}, rng).set_requires_grad(true));
    ParamList named;
    tree.collect("tree", named);
    std::vector<Tensor> params = leaves;
    for (const auto& p : named) params.push_back(p.tensor);
    record(std::string("rtal tree 4 leaves ") + to_string(kind),
           grad_check_params(projected([&] { return rtal_aggregate(tree, leaves); }, 6), params, kStep));
  }
  {
    Initializer init(6, DType::F64);
    const LayerDims ld{d, 2, 16, 0.0, 1e-6};
    const EncoderLayer enc = EncoderLayer::create(ld, init);
    const DecoderLayer dec = DecoderLayer::create(ld, init);
    const Tensor x = random_tensor({2, 3, d}, rng);
    const Tensor mem = random_tensor({2, 4, d}, rng);
    const Mask src_mask({2, 1, 1, 4}, std::vector<std::uint8_t>{1, 1, 1, 0, 1, 1, 1, 1});
    const Mask tgt_mask({1, 1, 3, 3}, std::vector<std::uint8_t>{1, 0, 0, 1, 1, 0, 1, 1, 1});
    const ForwardMode eval = ForwardMode::eval();
    record("encoder layer input", grad_check([&](const Tensor& t) { return enc.forward(t, &src_mask, eval); }, mem, kStep));
    record("decoder layer input",
           grad_check([&](const Tensor& t) { return dec.forward(t, mem, &tgt_mask, &src_mask, eval); }, x, kStep));
    record("decoder layer memory",
           grad_check([&](const Tensor& t) { return dec.forward(x, t, &tgt_mask, &src_mask, eval); }, mem, kStep));
  }
  {
    const Seq2SeqModel model = Seq2SeqModel::build(gradient_model_config());
    const std::vector<Batch::Pair> pairs = gradient_model_pairs();
    const Batch batch = Batch::make(pairs);
    auto loss = [&] {
      return label_smoothed_ce(model.forward_train(batch, ForwardMode::eval()), batch.tgt_out, 0.1, token::kPad);
    };
    // The shared embedding feeds the source side, the target side and the
    // output projection, so its gradient covers the whole loss path.
    std::vector<Tensor> params{model.embedding};
    record("encoder-decoder loss", grad_check_params(loss, params, kStep));
  }
  return results;
}

}  // namespace rtal
