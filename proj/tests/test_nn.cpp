#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "rtal/errors.hpp"
#include "rtal/grad_check.hpp"
#include "rtal/nn.hpp"
#include "rtal/ops.hpp"
#include "rtal/tape.hpp"

using namespace rtal;

namespace {

Tensor identity(std::size_t n) {
  Tensor t({n, n}, DType::F64);
  for (std::size_t i = 0; i < n; ++i) t.set(i * n + i, 1.0);
  return t.set_requires_grad(true);
}

// Roundoff-aware gradient comparison. Central differences on a loss of
// magnitude L carry noise of order eps * L / step (about 1e-10 here), which
// swamps a purely relative metric for coordinates whose true gradient is ~0.
double param_grad_error(const std::function<Tensor()>& loss_fn, const std::vector<Tensor>& params) {
  for (Tensor p : params) p.zero_grad();
  backward(loss_fn());
  NoGradGuard guard;
  double worst = 0;
  for (Tensor p : params) {
    const auto analytic = p.grad_vector();
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double v = p.at(i);
      p.set(i, v + 1e-5);
      const double up = loss_fn().item();
      p.set(i, v - 1e-5);
      const double down = loss_fn().item();
      p.set(i, v);
      const double numeric = (up - down) / 2e-5;
      const double err = std::abs(analytic[i] - numeric) / (std::max(std::abs(analytic[i]), std::abs(numeric)) + 1e-4);
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("scaled dot attention examples") {
  const Tensor one = Tensor::from({1, 2}, {1, 0}, DType::F64);
  CHECK(scaled_dot_attention(one, one, one).to_vector() == std::vector<double>{1, 0});

  // Two keys with identical scores: output is the mean of the value rows.
  const Tensor q = Tensor::from({1, 2}, {0.3, -0.2}, DType::F64);
  const Tensor k = Tensor::from({2, 2}, {1, 1, 1, 1}, DType::F64);
  const Tensor v = Tensor::from({2, 2}, {1, 2, 3, 6}, DType::F64);
  const auto out = scaled_dot_attention(q, k, v).to_vector();
  CHECK(out[0] == doctest::Approx(2.0));
  CHECK(out[1] == doctest::Approx(4.0));

  Rng rng(1);
  const Tensor rq = oracle::random_tensor({2, 3}, rng);
  const Tensor rk = oracle::random_tensor({4, 3}, rng);
  const Tensor rv = oracle::random_tensor({4, 3}, rng);
  const auto want = oracle::attention(oracle::to_mat(rq), oracle::to_mat(rk), oracle::to_mat(rv),
                                      [](std::size_t, std::size_t) { return true; });
  const auto got = scaled_dot_attention(rq, rk, rv).to_vector();
  CHECK(oracle::max_rel_diff(got, want.v) <= 1e-12);
}

TEST_CASE("attention outputs stay in the convex hull of value rows") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor q = oracle::random_tensor({1, 3, 5, 4}, rng, DType::F64, -3, 3);
    const Tensor k = oracle::random_tensor({1, 3, 6, 4}, rng, DType::F64, -3, 3);
    const Tensor v = oracle::random_tensor({1, 3, 6, 2}, rng);
    std::vector<std::uint8_t> vis(6);
    for (auto& b : vis) b = rng.below(2);
    vis[rng.below(6)] = 1;
    const Mask mask({1, 1, 1, 6}, vis);
    const auto out = scaled_dot_attention(q, k, v, &mask).to_vector();
    const auto vv = v.to_vector();
    for (std::size_t h = 0; h < 3; ++h)
      for (std::size_t c = 0; c < 2; ++c) {
        double lo = 1e9, hi = -1e9;
        for (std::size_t j = 0; j < 6; ++j) {
          if (!vis[j]) continue;
          lo = std::min(lo, vv[(h * 6 + j) * 2 + c]);
          hi = std::max(hi, vv[(h * 6 + j) * 2 + c]);
        }
        for (std::size_t i = 0; i < 5; ++i) {
          const double o = out[(h * 5 + i) * 2 + c];
          CHECK(o >= lo - 1e-12);
          CHECK(o <= hi + 1e-12);
        }
      }
  }
}

TEST_CASE("multi-head attention") {
  Rng rng(3);
  Initializer init(3, DType::F64);
  CHECK_THROWS_AS(MultiHeadAttention::create(6, 4, init), ConfigError);

  SUBCASE("one head with identity projections is plain attention") {
    MultiHeadAttention mha = MultiHeadAttention::create(4, 1, init);
    for (Linear* l : {&mha.query, &mha.key, &mha.value, &mha.output}) {
      l->weight = identity(4);
      l->bias = Tensor({4}, DType::F64);
    }
    const Tensor x = oracle::random_tensor({1, 3, 4}, rng);
    const Tensor y = oracle::random_tensor({1, 5, 4}, rng);
    const auto got = mha.forward(x, y, y, nullptr).to_vector();
    const auto want = scaled_dot_attention(x, y, y).to_vector();
    CHECK(oracle::max_rel_diff(got, want) <= 1e-14);
  }
  SUBCASE("identical value rows give identical outputs") {
    const MultiHeadAttention mha = MultiHeadAttention::create(4, 2, init);
    const Tensor q = oracle::random_tensor({1, 3, 4}, rng);
    const Tensor k = oracle::random_tensor({1, 5, 4}, rng);
    Tensor v({1, 5, 4}, DType::F64);
    const std::vector<double> row{0.5, -1, 2, 0.25};
    for (std::size_t i = 0; i < 20; ++i) v.set(i, row[i % 4]);
    const Mask all({1, 1, 1, 5}, true);
    const auto out = mha.forward(q, k, v, &all).to_vector();
    const auto want = mha.output.forward(mha.value.forward(Tensor::from({1, 4}, row, DType::F64))).to_vector();
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == doctest::Approx(want[i % 4]).epsilon(1e-12));
  }
  SUBCASE("two heads match the scalar oracle") {
    const MultiHeadAttention mha = MultiHeadAttention::create(6, 2, init);
    const Tensor x = oracle::random_tensor({1, 3, 6}, rng);
    const Tensor y = oracle::random_tensor({1, 4, 6}, rng);
    const auto want = oracle::multi_head(mha, oracle::to_mat(x), oracle::to_mat(y),
                                         [](std::size_t, std::size_t) { return true; });
    CHECK(oracle::max_rel_diff(mha.forward(x, y, y, nullptr).to_vector(), want.v) <= 1e-12);
  }
}

TEST_CASE("position-wise feed-forward") {
  Initializer init(4, DType::F64);
  FeedForward f = FeedForward::create(2, 2, 2, init);
  f.inner.weight = identity(2);
  f.outer.weight = identity(2);
  CHECK(f.forward(Tensor::from({1, 2}, {-1, 2}, DType::F64)).to_vector() == std::vector<double>{0, 2});
  CHECK(f.forward(Tensor({1, 2}, DType::F64)).to_vector() == std::vector<double>{0, 0});

  Rng rng(5);
  const FeedForward g = FeedForward::create(4, 8, 4, init);
  const Tensor x = oracle::random_tensor({2, 4}, rng);
  CHECK(oracle::max_rel_diff(g.forward(x).to_vector(), oracle::ffn(g, oracle::to_mat(x)).v) <= 1e-12);
}

TEST_CASE("positions, embedding and dropout") {
  const Tensor pe = sinusoidal_positions(5, 6, DType::F64);
  for (std::size_t i = 0; i < 6; ++i) CHECK(pe.at(i) == (i % 2 == 0 ? 0.0 : 1.0));

  const Tensor table = Tensor::from({3, 4}, std::vector<double>(12, 1.0), DType::F64);
  const std::vector<int> ids{0, 1, 2};
  const Tensor e = embed(table, sinusoidal_positions(4, 4, DType::F64), ids, 1, 3);
  CHECK(e.at(0) == doctest::Approx(2.0));  // sqrt(4) * 1 + sin(0)
  CHECK(e.at(1) == doctest::Approx(3.0));  // sqrt(4) * 1 + cos(0)
  CHECK_THROWS_AS(embed(table, sinusoidal_positions(2, 4, DType::F64), ids, 1, 3), IndexError);
  const std::vector<int> bad{0, 3, 1};
  CHECK_THROWS_AS(embed(table, sinusoidal_positions(4, 4, DType::F64), bad, 1, 3), IndexError);

  Rng rng(6);
  const Tensor x = Tensor::full({100000}, 1.0, DType::F32);
  CHECK(dropout(x, 0.0, rng).to_vector() == x.to_vector());
  const auto dropped = dropout(x, 0.5, rng).to_vector();
  double mean = 0;
  for (double v : dropped) mean += v;
  mean /= static_cast<double>(dropped.size());
  CHECK(std::abs(mean - 1.0) <= 0.02);

  Rng a(7), b(7);
  CHECK(dropout(x, 0.3, a).to_vector() == dropout(x, 0.3, b).to_vector());
  CHECK(dropout(x, 0.3, ForwardMode::eval()).is(x));
}

TEST_CASE("label smoothed cross entropy") {
  const std::vector<int> gold{2};
  SUBCASE("confident gold token without smoothing") {
    const Tensor logits = Tensor::from({1, 1, 4}, {-1000, -1000, 0, -1000}, DType::F64);
    CHECK(label_smoothed_ce(logits, gold, 0.0, 0).item() == doctest::Approx(0.0));
  }
  SUBCASE("uniform logits give log V") {
    const Tensor logits({1, 1, 4}, DType::F64);
    CHECK(label_smoothed_ce(logits, gold, 0.0, 0).item() == doctest::Approx(std::log(4.0)));
  }
  SUBCASE("hand-evaluated smoothed case") {
    const std::vector<double> x{0.5, -1.0, 2.0, 0.0};
    const Tensor logits = Tensor::from({1, 1, 4}, x, DType::F64);
    double z = 0;
    for (double v : x) z += std::exp(v);
    double kl = 0;
    for (std::size_t c = 0; c < 4; ++c) {
      const double q = c == 2 ? 0.9 : 0.1 / 3.0;
      kl += q * (std::log(q) - (x[c] - std::log(z)));
    }
    CHECK(label_smoothed_ce(logits, gold, 0.1, 0).item() == doctest::Approx(kl).epsilon(1e-12));
  }
  SUBCASE("pad positions are ignored") {
    const Tensor logits = Tensor::from({1, 2, 4}, {0.5, -1, 2, 0, 9, 9, 9, -9}, DType::F64);
    const Tensor single = Tensor::from({1, 1, 4}, {0.5, -1, 2, 0}, DType::F64);
    const std::vector<int> targets{2, 0};
    CHECK(label_smoothed_ce(logits, targets, 0.1, 0).item() ==
          doctest::Approx(label_smoothed_ce(single, gold, 0.1, 0).item()).epsilon(1e-14));
    const std::vector<int> pads{0, 0};
    CHECK_THROWS(label_smoothed_ce(logits, pads, 0.1, 0));
  }
  SUBCASE("gradient") {
    Rng rng(8);
    const Tensor logits = oracle::random_tensor({2, 3, 5}, rng, DType::F64, -2, 2);
    const std::vector<int> targets{1, 4, 0, 2, 0, 3};
    CHECK(grad_check([&](const Tensor& t) { return label_smoothed_ce(t, targets, 0.1, 0); }, logits) <= 1e-6);
  }
}

TEST_CASE("encoder and decoder layers") {
  Rng rng(9);
  Initializer init(10, DType::F64);
  const LayerDims dims{8, 2, 16, 0.0, 1e-6};
  const EncoderLayer enc = EncoderLayer::create(dims, init);
  const DecoderLayer dec = DecoderLayer::create(dims, init);
  const Tensor x = oracle::random_tensor({2, 3, 8}, rng);
  const Tensor mem = oracle::random_tensor({2, 4, 8}, rng);
  const Mask src({2, 1, 1, 4}, std::vector<std::uint8_t>{1, 1, 1, 0, 1, 1, 1, 1});
  const Mask causal({1, 1, 3, 3}, std::vector<std::uint8_t>{1, 0, 0, 1, 1, 0, 1, 1, 1});
  const ForwardMode eval = ForwardMode::eval();

  SUBCASE("input gradients") {
    CHECK(grad_check([&](const Tensor& t) { return enc.forward(t, &src, eval); }, mem) <= 1e-5);
    CHECK(grad_check([&](const Tensor& t) { return dec.forward(t, mem, &causal, &src, eval); }, x) <= 1e-5);
    CHECK(grad_check([&](const Tensor& t) { return dec.forward(x, t, &causal, &src, eval); }, mem) <= 1e-5);
  }
  SUBCASE("parameter gradients") {
    const Tensor w_enc = oracle::random_tensor({2, 4, 8}, rng);
    const Tensor w_dec = oracle::random_tensor({2, 3, 8}, rng);
    ParamList named;
    enc.collect("enc", named);
    dec.collect("dec", named);
    std::vector<Tensor> params;
    for (const auto& p : named) params.push_back(p.tensor);
    auto loss = [&] {
      return add(sum(mul(enc.forward(mem, &src, eval), w_enc)),
                 sum(mul(dec.forward(x, mem, &causal, &src, eval), w_dec)));
    };
    CHECK(param_grad_error(loss, params) <= 1e-5);
  }
  SUBCASE("key bias gradient is exactly zero") {
    Tensor kb = enc.self_attn.key.bias;
    kb.zero_grad();
    backward(sum(enc.forward(mem, &src, eval)));
    for (double g : kb.grad_vector()) CHECK(std::abs(g) <= 1e-12);
  }
  SUBCASE("causal mask hides later positions") {
    Tensor changed = x.clone();
    for (std::size_t c = 0; c < 8; ++c) changed.set(2 * 8 + c, 5.0);  // batch 0, position 2
    const auto a = dec.forward(x, mem, &causal, &src, eval).to_vector();
    const auto b = dec.forward(changed, mem, &causal, &src, eval).to_vector();
    for (std::size_t i = 0; i < 2 * 8; ++i) CHECK(a[i] == b[i]);
    CHECK(a[2 * 8] != b[2 * 8]);
  }
  SUBCASE("evaluation mode is deterministic") {
    CHECK(enc.forward(mem, &src, eval).to_vector() == enc.forward(mem, &src, eval).to_vector());
  }
}
