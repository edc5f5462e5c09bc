#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "rtal/aggregation.hpp"
#include "rtal/errors.hpp"
#include "rtal/grad_check.hpp"
#include "rtal/ops.hpp"
#include "rtal/tape.hpp"

using namespace rtal;

namespace {

constexpr AggFormulaKind kFormulas[] = {AggFormulaKind::Mean, AggFormulaKind::ConcatFFN, AggFormulaKind::EwpFFN};

void fill(Tensor t, double value) {
  for (std::size_t i = 0; i < t.numel(); ++i) t.set(i, value);
}

void zero_params(const ParamList& params) {
  for (const auto& p : params) fill(p.tensor, 0.0);
}

std::vector<Tensor> random_leaves(std::size_t n, Shape shape, Rng& rng) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(oracle::random_tensor(shape, rng).set_requires_grad(true));
  return out;
}

}  // namespace

TEST_CASE("mean formula") {
  const Tensor a = Tensor::from({2}, {2, 4}, DType::F64);
  const Tensor b = Tensor::from({2}, {6, 8}, DType::F64);
  CHECK(agg_mean(a, b).to_vector() == std::vector<double>{4, 6});
  CHECK(agg_mean(a, a).to_vector() == a.to_vector());
  CHECK_THROWS_AS(agg_mean(a, Tensor({3}, DType::F64)), ShapeError);
}

TEST_CASE("concat FFN formula") {
  Initializer init(1, DType::F64);
  SUBCASE("hand-set d=1 weights") {
    AggFormula f = AggFormula::create(AggFormulaKind::ConcatFFN, AggDims{1, 1, 0, 1e-6}, init);
    zero_params([&] { ParamList p; f.collect("f", p); return p; }());
    f.ffn.inner.weight.set(0, 1);
    f.ffn.inner.weight.set(1, 1);
    f.ffn.outer.weight.set(0, 1);
    const Tensor out = agg_concat_ffn(f, Tensor::from({1}, {2}, DType::F64), Tensor::from({1}, {3}, DType::F64));
    CHECK(out.to_vector() == std::vector<double>{5});
  }
  SUBCASE("zero inputs and biases") {
    const AggFormula f = AggFormula::create(AggFormulaKind::ConcatFFN, AggDims{4, 6, 0, 1e-6}, init);
    const Tensor z({2, 4}, DType::F64);
    for (double v : agg_concat_ffn(f, z, z).to_vector()) CHECK(v == 0.0);
  }
  SUBCASE("random d=4 against the scalar oracle") {
    Rng rng(2);
    const AggFormula f = AggFormula::create(AggFormulaKind::ConcatFFN, AggDims{4, 6, 0, 1e-6}, init);
    const Tensor a = oracle::random_tensor({3, 4}, rng);
    const Tensor b = oracle::random_tensor({3, 4}, rng);
    const auto want = oracle::apply_formula(f, oracle::to_mat(a), oracle::to_mat(b));
    CHECK(oracle::max_rel_diff(agg_concat_ffn(f, a, b).to_vector(), want.v) <= 1e-12);
    CHECK_THROWS_AS(agg_concat_ffn(f, a, Tensor({3, 5}, DType::F64)), ShapeError);
  }
}

TEST_CASE("element-wise sum FFN formula") {
  Initializer init(3, DType::F64);
  const AggDims dims{4, 6, 0, 1e-6};
  SUBCASE("beta zero gives zero") {
    AggFormula f = AggFormula::create(AggFormulaKind::EwpFFN, dims, init);
    fill(f.beta, 0.0);
    fill(f.ffn.inner.bias, 0.0);
    fill(f.ffn.outer.bias, 0.0);
    Rng rng(4);
    const Tensor a = oracle::random_tensor({2, 4}, rng);
    for (double v : agg_ewp_ffn(f, a, a).to_vector()) CHECK(v == 0.0);
  }
  SUBCASE("zeroed FFN leaves the scaled sum") {
    AggFormula f = AggFormula::create(AggFormulaKind::EwpFFN, dims, init);
    zero_params([&] { ParamList p; f.ffn.collect("ffn", p); return p; }());
    fill(f.beta, 0.5);
    const Tensor v = Tensor::from({4}, {1, -2, 0.5, 3}, DType::F64);
    CHECK(agg_ewp_ffn(f, v, v).to_vector() == v.to_vector());
  }
  SUBCASE("random inputs against the scalar oracle") {
    Rng rng(5);
    AggFormula f = AggFormula::create(AggFormulaKind::EwpFFN, dims, init);
    fill(f.beta, 1.0);
    const Tensor a = oracle::random_tensor({3, 4}, rng);
    const Tensor b = oracle::random_tensor({3, 4}, rng);
    const auto want = oracle::apply_formula(f, oracle::to_mat(a), oracle::to_mat(b));
    CHECK(oracle::max_rel_diff(agg_ewp_ffn(f, a, b).to_vector(), want.v) <= 1e-12);
  }
  SUBCASE("dropout only touches the FFN branch in training") {
    AggFormula f = AggFormula::create(AggFormulaKind::EwpFFN, AggDims{4, 6, 0.5, 1e-6}, init);
    Rng rng(6);
    const Tensor a = oracle::random_tensor({3, 4}, rng);
    CHECK(agg_ewp_ffn(f, a, a).to_vector() == agg_ewp_ffn(f, a, a, ForwardMode::eval()).to_vector());
    zero_params([&] { ParamList p; f.ffn.collect("ffn", p); return p; }());
    Rng drop(7);
    const auto trained = agg_ewp_ffn(f, a, a, ForwardMode::train(drop)).to_vector();
    CHECK(trained == agg_ewp_ffn(f, a, a).to_vector());
  }
}

TEST_CASE("tree examples") {
  Initializer init(8, DType::F64);
  const AggDims dims{4, 4, 0, 1e-6};
  SUBCASE("zero leaves") {
    const AggTree tree = AggTree::create(4, AggFormulaKind::Mean, dims, init);
    const std::vector<Tensor> leaves(4, Tensor({4}, DType::F64));
    for (double v : rtal_aggregate(tree, leaves).to_vector()) CHECK(v == 0.0);
  }
  SUBCASE("two leaves") {
    const AggTree tree = AggTree::create(2, AggFormulaKind::Mean, dims, init);
    const std::vector<Tensor> leaves{Tensor::from({2}, {1, 2}, DType::F64), Tensor::from({2}, {3, 8}, DType::F64)};
    CHECK(rtal_aggregate(tree, leaves).to_vector() == std::vector<double>{2, 5});
  }
  SUBCASE("four unit vectors") {
    const AggTree tree = AggTree::create(4, AggFormulaKind::Mean, dims, init);
    std::vector<Tensor> leaves;
    for (std::size_t i = 0; i < 4; ++i) {
      Tensor e({4}, DType::F64);
      e.set(i, 1.0);
      leaves.push_back(e);
    }
    CHECK(rtal_aggregate(tree, leaves).to_vector() == std::vector<double>{0.25, 0.75, 0.25, 0.75});
  }
  SUBCASE("structure errors") {
    CHECK_THROWS_AS(AggTree::create(3, AggFormulaKind::Mean, dims, init), StructureError);
    CHECK_THROWS_AS(AggTree::create(6, AggFormulaKind::Mean, dims, init), StructureError);
    CHECK_THROWS_AS(AggTree::create(1, AggFormulaKind::Mean, dims, init), StructureError);
    const AggTree tree = AggTree::create(4, AggFormulaKind::Mean, dims, init);
    const std::vector<Tensor> three(3, Tensor({4}, DType::F64));
    CHECK_THROWS_AS(rtal_aggregate(tree, three), StructureError);
  }
}

TEST_CASE("tree structure and reference evaluation") {
  Rng rng(9);
  for (std::size_t leaves : {2u, 4u, 8u, 16u}) {
    for (AggFormulaKind kind : kFormulas) {
      Initializer init(leaves * 10 + static_cast<std::size_t>(kind), DType::F64);
      const AggTree tree = AggTree::create(leaves, kind, AggDims{4, 5, 0, 1e-6}, init);
      CHECK(tree.nodes().size() == leaves - 1);
      CHECK(tree.residual_count() == leaves - 2);
      CHECK_FALSE(tree.nodes().back().residual);

      const auto inputs = random_leaves(leaves, {3, 4}, rng);
      std::vector<oracle::Mat> mats;
      for (const auto& t : inputs) mats.push_back(oracle::to_mat(t));
      const Tensor root = rtal_aggregate(tree, inputs);
      CHECK(root.shape() == inputs[0].shape());
      CHECK(oracle::max_rel_diff(root.to_vector(), oracle::rtal_reference(tree, mats).v) <= 1e-12);

      for (auto t : inputs) t.zero_grad();
      backward(sum(root));
      for (const auto& t : inputs) {
        double norm = 0;
        for (double g : t.grad_vector()) norm += std::abs(g);
        CHECK(norm > 0);
      }
    }
  }
}

TEST_CASE("equal leaves under the mean formula") {
  Initializer init(10, DType::F64);
  const AggTree tree = AggTree::create(8, AggFormulaKind::Mean, AggDims{3, 3, 0, 1e-6}, init);
  const Tensor v = Tensor::from({3}, {1, -2, 4}, DType::F64);
  const std::vector<Tensor> leaves(8, v);
  // Every subtree over equal leaves v yields c * v: c = 1 at a leaf, a residual
  // node gives c + c = 2c, the root gives c.
  const auto root = rtal_aggregate(tree, leaves).to_vector();
  for (std::size_t i = 0; i < 3; ++i) CHECK(root[i] == doctest::Approx(4 * v.at(i)));
}

TEST_CASE("tree gradients") {
  Rng rng(11);
  for (AggFormulaKind kind : kFormulas) {
    Initializer init(12, DType::F64);
    const AggTree tree = AggTree::create(4, kind, AggDims{4, 6, 0, 1e-6}, init);
    const auto leaves = random_leaves(4, {2, 4}, rng);
    for (std::size_t i = 0; i < 4; ++i) {
      auto f = [&](const Tensor& x) {
        std::vector<Tensor> in = leaves;
        in[i] = x;
        return rtal_aggregate(tree, in);
      };
      CHECK(grad_check(f, leaves[i]) <= 1e-5);
    }
  }
}

TEST_CASE("formula parameter counts") {
  CHECK(AggFormula::param_count(AggFormulaKind::Mean, 8, 5) == 0);
  CHECK(AggFormula::param_count(AggFormulaKind::ConcatFFN, 8, 5) == (16 * 5 + 5) + (5 * 8 + 8));
  CHECK(AggFormula::param_count(AggFormulaKind::EwpFFN, 8, 5) == (8 * 5 + 5) + (5 * 8 + 8) + 16 + 1);
  for (AggFormulaKind kind : kFormulas) {
    Initializer init(13, DType::F64);
    const AggFormula f = AggFormula::create(kind, AggDims{8, 5, 0, 1e-6}, init);
    ParamList p;
    f.collect("f", p);
    std::size_t n = 0;
    for (const auto& x : p) n += x.tensor.numel();
    CHECK(n == AggFormula::param_count(kind, 8, 5));
  }
  CHECK(LayerAggregator::param_count(AggStructure::RTAL, AggFormulaKind::EwpFFN, 6, 8, 5) ==
        3 * AggFormula::param_count(AggFormulaKind::EwpFFN, 8, 5));
  CHECK(LayerAggregator::param_count(AggStructure::None, AggFormulaKind::EwpFFN, 6, 8, 5) == 0);
  CHECK(LayerAggregator::param_count(AggStructure::LinearCombination, AggFormulaKind::EwpFFN, 6, 8, 5) == 6);
}

TEST_CASE("baseline aggregators") {
  Rng rng(14);
  Initializer init(15, DType::F64);
  const AggDims dims{4, 4, 0, 1e-6};
  SUBCASE("saturated linear combination picks one layer") {
    BaselineAggregator agg = BaselineAggregator::create(BaselineKind::LinearCombination, 4, AggFormulaKind::Mean,
                                                        dims, init);
    const auto leaves = random_leaves(4, {2, 4}, rng);
    for (std::size_t k = 0; k < 4; ++k) {
      for (std::size_t i = 0; i < 4; ++i) agg.weights().set(i, i == k ? 20.0 : -20.0);
      const auto out = baseline_aggregate(agg, leaves).to_vector();
      const auto want = leaves[k].to_vector();
      for (std::size_t i = 0; i < out.size(); ++i) CHECK(std::abs(out[i] - want[i]) <= 1e-6);
    }
  }
  SUBCASE("linear combination starts as the layer mean") {
    const BaselineAggregator agg = BaselineAggregator::create(BaselineKind::LinearCombination, 3,
                                                              AggFormulaKind::Mean, dims, init);
    const auto leaves = random_leaves(3, {4}, rng);
    const auto out = baseline_aggregate(agg, leaves).to_vector();
    for (std::size_t i = 0; i < 4; ++i) {
      const double mean = (leaves[0].at(i) + leaves[1].at(i) + leaves[2].at(i)) / 3.0;
      CHECK(out[i] == doctest::Approx(mean).epsilon(1e-12));
    }
  }
  SUBCASE("iterative combination") {
    const BaselineAggregator one = BaselineAggregator::create(BaselineKind::IterativeCombination, 1,
                                                              AggFormulaKind::ConcatFFN, dims, init);
    const auto leaf = random_leaves(1, {2, 4}, rng);
    CHECK(baseline_aggregate(one, leaf).to_vector() == leaf[0].to_vector());

    const BaselineAggregator three = BaselineAggregator::create(BaselineKind::IterativeCombination, 3,
                                                                AggFormulaKind::ConcatFFN, dims, init);
    CHECK(three.steps().size() == 2);
    const auto leaves = random_leaves(3, {2, 4}, rng);
    oracle::Mat y = oracle::to_mat(leaves[0]);
    for (std::size_t l = 1; l < 3; ++l) y = oracle::apply_formula(three.steps()[l - 1], oracle::to_mat(leaves[l]), y);
    CHECK(oracle::max_rel_diff(baseline_aggregate(three, leaves).to_vector(), y.v) <= 1e-12);
  }
  SUBCASE("CNN-like tree has no residual connections") {
    const BaselineAggregator agg = BaselineAggregator::create(BaselineKind::CnnLikeTree, 4, AggFormulaKind::EwpFFN,
                                                              dims, init);
    REQUIRE(agg.tree().has_value());
    CHECK(agg.tree()->residual_count() == 0);
    const std::vector<Tensor> zeros(4, Tensor({2, 4}, DType::F64));
    for (double v : baseline_aggregate(agg, zeros).to_vector()) CHECK(std::abs(v) <= 1e-12);
    const auto leaves = random_leaves(4, {2, 4}, rng);
    std::vector<oracle::Mat> mats;
    for (const auto& t : leaves) mats.push_back(oracle::to_mat(t));
    CHECK(oracle::max_rel_diff(baseline_aggregate(agg, leaves).to_vector(),
                               oracle::rtal_reference(*agg.tree(), mats, false).v) <= 1e-12);
    CHECK_THROWS_AS(BaselineAggregator::create(BaselineKind::CnnLikeTree, 3, AggFormulaKind::Mean, dims, init),
                    StructureError);
  }
}

TEST_CASE("layer spans") {
  CHECK(LayerAggregator::span_for(AggStructure::RTAL, 6) == 4);
  CHECK(LayerAggregator::span_for(AggStructure::RTAL, 8) == 8);
  CHECK(LayerAggregator::span_for(AggStructure::RTAL, 3) == 2);
  CHECK(LayerAggregator::span_for(AggStructure::CnnLikeTree, 6) == 4);
  CHECK(LayerAggregator::span_for(AggStructure::LinearCombination, 6) == 6);
  CHECK(LayerAggregator::span_for(AggStructure::IterativeCombination, 6) == 6);
  CHECK_THROWS_AS(LayerAggregator::span_for(AggStructure::RTAL, 1), StructureError);

  Initializer init(16, DType::F64);
  const LayerAggregator agg = LayerAggregator::create(AggStructure::RTAL, AggFormulaKind::Mean, 6,
                                                      AggDims{4, 4, 0, 1e-6}, init);
  CHECK(agg.span_begin() == 2);
  CHECK(agg.span_size() == 4);
  Rng rng(17);
  const auto layers = random_leaves(6, {4}, rng);
  const std::vector<Tensor> top(layers.begin() + 2, layers.end());
  CHECK(agg.aggregate(layers).to_vector() == rtal_aggregate(std::get<AggTree>(agg.impl()), top).to_vector());
}
