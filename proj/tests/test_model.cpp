#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "rtal/errors.hpp"
#include "rtal/model.hpp"

using namespace rtal;

namespace {

ModelConfig tiny(AggStructure structure = AggStructure::None, AggFormulaKind formula = AggFormulaKind::EwpFFN,
                 AggPosition position = AggPosition::Both) {
  ModelConfig c;
  c.num_layers = 2;
  c.d_model = 8;
  c.num_heads = 2;
  c.d_ff = 16;
  c.vocab_size = 11;
  c.max_len = 16;
  c.dropout = 0;
  c.aggregation = {structure, formula, position};
  c.seed = 5;
  c.dtype = DType::F64;
  return c;
}

const std::vector<Batch::Pair> kPairs{{{3, 4, 5, 6}, {6, 5}}, {{7, 8}, {8, 7, 9}}};

std::size_t enumerate(const Seq2SeqModel& m) {
  std::size_t n = 0;
  for (const auto& p : m.parameters()) n += p.tensor.numel();
  return n;
}

}  // namespace

TEST_CASE("batch construction") {
  const Batch b = Batch::make(kPairs);
  CHECK(b.size == 2);
  CHECK(b.src_len == 5);
  CHECK(b.tgt_len == 4);
  CHECK(b.src == std::vector<int>{3, 4, 5, 6, 2, 7, 8, 2, 0, 0});
  CHECK(b.tgt_in == std::vector<int>{1, 6, 5, 0, 1, 8, 7, 9});
  CHECK(b.tgt_out == std::vector<int>{6, 5, 2, 0, 8, 7, 9, 2});
  CHECK(b.target_tokens() == 7);
  CHECK(b.src_mask.visible == std::vector<std::uint8_t>{1, 1, 1, 1, 1, 1, 1, 1, 0, 0});
  CHECK_THROWS(Batch::make(std::vector<Batch::Pair>{}));
}

TEST_CASE("configuration validation") {
  CHECK_NOTHROW(tiny().validate());
  auto expect_field = [](ModelConfig c, const std::string& field) {
    try {
      c.validate();
      FAIL("expected ConfigError for " << field);
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find(field) != std::string::npos);
    }
  };
  ModelConfig c = tiny();
  c.num_heads = 3;
  expect_field(c, "num_heads");
  c = tiny();
  c.num_layers = 0;
  expect_field(c, "num_layers");
  c = tiny();
  c.dropout = 1.0;
  expect_field(c, "dropout");
  c = tiny();
  c.vocab_size = 3;
  expect_field(c, "vocab_size");
  c = tiny(AggStructure::RTAL);
  c.num_layers = 1;
  CHECK_THROWS(c.validate());

  const ModelConfig round = ModelConfig::from_json(tiny(AggStructure::RTAL).to_json());
  CHECK(round.digest() == tiny(AggStructure::RTAL).digest());
  CHECK(tiny(AggStructure::RTAL).digest() != tiny().digest());
}

TEST_CASE("parameter counting") {
  SUBCASE("closed form matches enumeration") {
    for (AggStructure s : {AggStructure::None, AggStructure::RTAL, AggStructure::LinearCombination,
                           AggStructure::IterativeCombination, AggStructure::CnnLikeTree})
      for (AggFormulaKind f : {AggFormulaKind::Mean, AggFormulaKind::ConcatFFN, AggFormulaKind::EwpFFN})
        for (AggPosition p : {AggPosition::Encoder, AggPosition::Decoder, AggPosition::Both}) {
          ModelConfig c = tiny(s, f, p);
          c.num_layers = 3;
          const Seq2SeqModel m = Seq2SeqModel::build(c);
          CHECK(count_params(c).total == enumerate(m));
          CHECK(m.parameter_count() == enumerate(m));
        }
  }
  SUBCASE("hand-counted vanilla model") {
    ModelConfig c = tiny();
    c.num_layers = 1;
    c.d_model = 4;
    c.num_heads = 1;
    c.d_ff = 8;
    c.vocab_size = 10;
    const std::size_t attn = 4 * (4 * 4 + 4);
    const std::size_t ffn = (4 * 8 + 8) + (8 * 4 + 4);
    const std::size_t ln = 8;
    const std::size_t enc = 2 * ln + attn + ffn;
    const std::size_t dec = 3 * ln + 2 * attn + ffn;
    CHECK(count_params(c).total == 10 * 4 + enc + dec + 2 * ln);
  }
  SUBCASE("mean aggregation adds nothing") {
    CHECK(count_params(tiny(AggStructure::RTAL, AggFormulaKind::Mean)).total == count_params(tiny()).total);
  }
  SUBCASE("aggregation position") {
    const ParamReport none = count_params(tiny());
    const ParamReport enc = count_params(tiny(AggStructure::RTAL, AggFormulaKind::EwpFFN, AggPosition::Encoder));
    const ParamReport dec = count_params(tiny(AggStructure::RTAL, AggFormulaKind::EwpFFN, AggPosition::Decoder));
    const ParamReport both = count_params(tiny(AggStructure::RTAL, AggFormulaKind::EwpFFN, AggPosition::Both));
    CHECK(enc.decoder_aggregation == 0);
    CHECK(dec.encoder_aggregation == 0);
    CHECK(enc.encoder_aggregation == both.encoder_aggregation);
    CHECK(enc.total + dec.total == none.total + both.total);
    CHECK(enc.total - none.total == AggFormula::param_count(AggFormulaKind::EwpFFN, 8, 8));
  }
}

TEST_CASE("aggregated spans") {
  ModelConfig c = ModelConfig::base();
  c.aggregation.structure = AggStructure::RTAL;
  CHECK(c.aggregated_span() == std::pair<std::size_t, std::size_t>{3, 6});
  c.num_layers = 3;
  CHECK(c.aggregated_span() == std::pair<std::size_t, std::size_t>{2, 3});
  c.aggregation.structure = AggStructure::LinearCombination;
  CHECK(c.aggregated_span() == std::pair<std::size_t, std::size_t>{1, 3});
  c.aggregation.structure = AggStructure::None;
  CHECK_FALSE(c.aggregated_span().has_value());

  ModelConfig six = tiny(AggStructure::RTAL);
  six.num_layers = 6;
  const Seq2SeqModel m = Seq2SeqModel::build(six);
  REQUIRE(m.encoder_agg.has_value());
  CHECK(m.encoder_agg->span_begin() == 2);
  CHECK(std::get<AggTree>(m.encoder_agg->impl()).nodes().size() == 3);
  six.num_layers = 3;
  const Seq2SeqModel m3 = Seq2SeqModel::build(six);
  CHECK(std::get<AggTree>(m3.decoder_agg->impl()).nodes().size() == 1);
}

TEST_CASE("construction is deterministic") {
  const ModelConfig c = tiny(AggStructure::RTAL, AggFormulaKind::ConcatFFN);
  const auto a = Seq2SeqModel::build(c).parameters();
  const auto b = Seq2SeqModel::build(c).parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    CHECK(a[i].tensor.to_vector() == b[i].tensor.to_vector());
  }
  ModelConfig other = c;
  other.seed = 6;
  CHECK(Seq2SeqModel::build(other).embedding.to_vector() != Seq2SeqModel::build(c).embedding.to_vector());
}

TEST_CASE("aggregation does not disturb the layer initialization") {
  const Seq2SeqModel plain = Seq2SeqModel::build(tiny());
  const Seq2SeqModel agg = Seq2SeqModel::build(tiny(AggStructure::RTAL));
  CHECK(plain.embedding.to_vector() == agg.embedding.to_vector());
  CHECK(plain.decoder.back().ffn.outer.weight.to_vector() == agg.decoder.back().ffn.outer.weight.to_vector());
}

TEST_CASE("forward shapes and errors") {
  for (AggStructure s : {AggStructure::None, AggStructure::RTAL, AggStructure::CnnLikeTree}) {
    const Seq2SeqModel m = Seq2SeqModel::build(tiny(s));
    const Batch b = Batch::make(kPairs);
    const Tensor logits = forward_train(m, b);
    CHECK(logits.shape() == Shape{2, 4, 11});
    for (double v : logits.to_vector()) CHECK(std::isfinite(v));
  }
  const Seq2SeqModel m = Seq2SeqModel::build(tiny());
  const std::vector<Batch::Pair> too_long{{std::vector<int>(16, 3), {3}}};
  CHECK_THROWS_AS(forward_train(m, Batch::make(too_long)), IndexError);
  const std::vector<Batch::Pair> bad_token{{{3, 11}, {3}}};
  CHECK_THROWS_AS(forward_train(m, Batch::make(bad_token)), IndexError);
}

TEST_CASE("vanilla model matches the scalar reference") {
  const Seq2SeqModel m = Seq2SeqModel::build(tiny());
  const Batch b = Batch::make(kPairs);
  const auto logits = forward_train(m, b).to_vector();
  for (std::size_t i = 0; i < kPairs.size(); ++i) {
    std::vector<int> src = kPairs[i].first;
    src.push_back(token::kEos);
    std::vector<int> tgt{token::kBos};
    tgt.insert(tgt.end(), kPairs[i].second.begin(), kPairs[i].second.end());
    const oracle::Mat want = oracle::vanilla_transformer(m, src, tgt);
    // Only the unpadded target positions are meaningful.
    const std::vector<double> got(logits.begin() + static_cast<std::ptrdiff_t>(i * 4 * 11),
                                  logits.begin() + static_cast<std::ptrdiff_t>((i * 4 + tgt.size()) * 11));
    CHECK(oracle::max_rel_diff(got, want.v) <= 1e-10);
  }
}

TEST_CASE("decoder is causal") {
  const Seq2SeqModel m = Seq2SeqModel::build(tiny(AggStructure::RTAL));
  const std::vector<Batch::Pair> a{{{3, 4, 5}, {6, 7, 8}}};
  const std::vector<Batch::Pair> b{{{3, 4, 5}, {6, 7, 3}}};
  const auto la = forward_train(m, Batch::make(a)).to_vector();
  const auto lb = forward_train(m, Batch::make(b)).to_vector();
  // Positions 0..2 see BOS,6,7 in both batches; position 3 sees the changed token.
  for (std::size_t i = 0; i < 3 * 11; ++i) CHECK(la[i] == lb[i]);
  CHECK(la[3 * 11] != lb[3 * 11]);
}

TEST_CASE("incremental step matches teacher forcing") {
  for (AggStructure s : {AggStructure::None, AggStructure::RTAL, AggStructure::LinearCombination}) {
    for (AggFormulaKind f : {AggFormulaKind::Mean, AggFormulaKind::ConcatFFN, AggFormulaKind::EwpFFN}) {
      const Seq2SeqModel m = Seq2SeqModel::build(tiny(s, f));
      const std::vector<Batch::Pair> one{{{3, 9, 4}, {5, 6, 7}}};
      const Batch b = Batch::make(one);
      const Tensor logits = forward_train(m, b);
      const SourceCache cache = m.encode_source(one[0].first);
      for (std::size_t t = 0; t < b.tgt_len; ++t) {
        const std::vector<int> prefix(b.tgt_in.begin(), b.tgt_in.begin() + static_cast<std::ptrdiff_t>(t + 1));
        const auto step = forward_step(m, cache, prefix);
        // Teacher-forced log-softmax at position t.
        std::vector<double> row(11);
        double mx = -1e300;
        for (std::size_t v = 0; v < 11; ++v) mx = std::max(mx, row[v] = logits.at(t * 11 + v));
        double z = 0;
        for (double x : row) z += std::exp(x - mx);
        for (double& x : row) x = x - mx - std::log(z);
        CHECK(oracle::max_rel_diff(step, row) <= 1e-9);
      }
    }
  }
}

TEST_CASE("evaluation forward is deterministic and dropout is seeded") {
  ModelConfig c = tiny(AggStructure::RTAL);
  c.dropout = 0.3;
  const Seq2SeqModel m = Seq2SeqModel::build(c);
  const Batch b = Batch::make(kPairs);
  CHECK(forward_train(m, b).to_vector() == forward_train(m, b).to_vector());
  Rng r1(3), r2(3), r3(4);
  const auto t1 = m.forward_train(b, ForwardMode::train(r1)).to_vector();
  CHECK(t1 == m.forward_train(b, ForwardMode::train(r2)).to_vector());
  CHECK(t1 != m.forward_train(b, ForwardMode::train(r3)).to_vector());
  CHECK(t1 != forward_train(m, b).to_vector());
}
