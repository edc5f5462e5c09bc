#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "rtal/nn.hpp"
#include "rtal/tensor.hpp"

namespace rtal {

enum class AggFormulaKind { Mean, ConcatFFN, EwpFFN };
enum class AggStructure { None, RTAL, LinearCombination, IterativeCombination, CnnLikeTree };

const char* to_string(AggFormulaKind kind);
const char* to_string(AggStructure structure);
AggFormulaKind parse_formula(const std::string& text);
AggStructure parse_structure(const std::string& text);

struct AggDims {
  std::size_t d_model = 512;
  std::size_t inner_dim = 512;
  double dropout = 0.1;
  double norm_eps = 1e-6;
};

/// Binary fusion AGG(h_i, h_j) of two same-shape representations.
///
/// Mean holds no parameters. ConcatFFN maps concat(h_i, h_j) (2d) through a
/// one-hidden-layer ReLU FFN back to d. EwpFFN forms sumb = beta * (h_i + h_j)
/// with a trainable scalar beta and returns drop(FFN(LN(sumb))) + sumb.
struct AggFormula {
  AggFormulaKind kind = AggFormulaKind::Mean;
  FeedForward ffn;    // ConcatFFN, EwpFFN
  LayerNorm norm;     // EwpFFN
  Tensor beta;        // EwpFFN, shape [1]
  double dropout = 0;

  static AggFormula create(AggFormulaKind kind, const AggDims& dims, Initializer& init);
  /// Trainable scalars held by one formula instance.
  static std::size_t param_count(AggFormulaKind kind, std::size_t d_model, std::size_t inner_dim);

  Tensor apply(const Tensor& h_i, const Tensor& h_j, const ForwardMode& mode = {}) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

Tensor agg_mean(const Tensor& h_i, const Tensor& h_j);
Tensor agg_concat_ffn(const AggFormula& formula, const Tensor& h_i, const Tensor& h_j);
Tensor agg_ewp_ffn(const AggFormula& formula, const Tensor& h_i, const Tensor& h_j, const ForwardMode& mode = {});

/// Internal node of an aggregation tree. Children are internal node indices
/// (>= 0) or leaves encoded as -(leaf + 1).
struct AggNode {
  AggFormula formula;
  bool residual = true;
  int left = 0;
  int right = 0;
};

/// Balanced binary tree over 2^n layer outputs, nodes stored in post-order.
///
/// Each node evaluates AGG(left, right) and, when its residual flag is set,
/// adds the value of its right child (the one covering deeper layers). In an
/// RTAL tree every node but the root carries the residual connection; a
/// CNN-like tree has none.
class AggTree {
 public:
  static AggTree create(std::size_t leaves, AggFormulaKind kind, const AggDims& dims, Initializer& init,
                        bool residual = true);

  std::size_t leaf_count() const noexcept { return leaf_count_; }
  const std::vector<AggNode>& nodes() const noexcept { return nodes_; }
  std::vector<AggNode>& nodes() noexcept { return nodes_; }
  std::size_t residual_count() const;

  Tensor aggregate(std::span<const Tensor> layer_outputs, const ForwardMode& mode = {}) const;
  void collect(const std::string& prefix, ParamList& out) const;

 private:
  int build(std::size_t first, std::size_t count, AggFormulaKind kind, const AggDims& dims, Initializer& init);

  std::size_t leaf_count_ = 0;
  std::vector<AggNode> nodes_;
};

Tensor rtal_aggregate(const AggTree& tree, std::span<const Tensor> layer_outputs, const ForwardMode& mode = {});

bool is_power_of_two(std::size_t n);

enum class BaselineKind { LinearCombination, IterativeCombination, CnnLikeTree };

/// Comparison aggregators: softmax-weighted sum of layers, a left fold
/// y_l = AGG(h_l, y_{l-1}), and the tree without residual connections.
class BaselineAggregator {
 public:
  static BaselineAggregator create(BaselineKind kind, std::size_t layers, AggFormulaKind formula, const AggDims& dims,
                                   Initializer& init);

  BaselineKind kind() const noexcept { return kind_; }
  std::size_t layer_count() const noexcept { return layers_; }
  Tensor& weights() noexcept { return weights_; }
  const std::vector<AggFormula>& steps() const noexcept { return steps_; }
  const std::optional<AggTree>& tree() const noexcept { return tree_; }

  Tensor aggregate(std::span<const Tensor> layer_outputs, const ForwardMode& mode = {}) const;
  void collect(const std::string& prefix, ParamList& out) const;

 private:
  BaselineKind kind_ = BaselineKind::LinearCombination;
  std::size_t layers_ = 0;
  Tensor weights_;                 // LinearCombination, [layers], starts at 0
  std::vector<AggFormula> steps_;  // IterativeCombination, layers - 1 formulas
  std::optional<AggTree> tree_;    // CnnLikeTree
};

Tensor baseline_aggregate(const BaselineAggregator& agg, std::span<const Tensor> layer_outputs,
                          const ForwardMode& mode = {});

/// Aggregator attached to an encoder or decoder stack: selects the span of
/// layers it fuses and dispatches to the tree or baseline implementation.
class LayerAggregator {
 public:
  /// Number of trailing layers fused for a stack of `num_layers`. Trees use
  /// the last 2^floor(log2 num_layers) layers; the baselines use all layers.
  /// Throws StructureError when a tree would have fewer than two leaves.
  static std::size_t span_for(AggStructure structure, std::size_t num_layers);
  static std::size_t param_count(AggStructure structure, AggFormulaKind formula, std::size_t num_layers,
                                 std::size_t d_model, std::size_t inner_dim);
  static LayerAggregator create(AggStructure structure, AggFormulaKind formula, std::size_t num_layers,
                                const AggDims& dims, Initializer& init);

  AggStructure structure() const noexcept { return structure_; }
  /// First fused layer, 0-based.
  std::size_t span_begin() const noexcept { return begin_; }
  std::size_t span_size() const noexcept { return span_; }
  const std::variant<AggTree, BaselineAggregator>& impl() const noexcept { return impl_; }
  std::variant<AggTree, BaselineAggregator>& impl() noexcept { return impl_; }

  /// `layer_outputs` holds every layer of the stack, bottom first.
  Tensor aggregate(std::span<const Tensor> layer_outputs, const ForwardMode& mode = {}) const;
  void collect(const std::string& prefix, ParamList& out) const;

 private:
  AggStructure structure_ = AggStructure::RTAL;
  std::size_t begin_ = 0;
  std::size_t span_ = 0;
  std::variant<AggTree, BaselineAggregator> impl_;
};

}  // namespace rtal
