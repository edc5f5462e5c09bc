#include "rtal/aggregation.hpp"

#include <algorithm>
#include <cctype>

#include "rtal/errors.hpp"
#include "rtal/ops.hpp"

namespace rtal {

const char* to_string(AggFormulaKind kind) {
  switch (kind) {
    case AggFormulaKind::Mean: return "mean";
    case AggFormulaKind::ConcatFFN: return "concat_ffn";
    case AggFormulaKind::EwpFFN: return "ewp_ffn";
  }
  return "?";
}

const char* to_string(AggStructure structure) {
  switch (structure) {
    case AggStructure::None: return "none";
    case AggStructure::RTAL: return "rtal";
    case AggStructure::LinearCombination: return "linear";
    case AggStructure::IterativeCombination: return "iterative";
    case AggStructure::CnnLikeTree: return "cnn_tree";
  }
  return "?";
}

namespace {
std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}
}  // namespace

AggFormulaKind parse_formula(const std::string& text) {
  const std::string t = lower(text);
  if (t == "mean") return AggFormulaKind::Mean;
  if (t == "concat_ffn" || t == "concat") return AggFormulaKind::ConcatFFN;
  if (t == "ewp_ffn" || t == "ewp") return AggFormulaKind::EwpFFN;
  throw ConfigError("formula", "unknown aggregation formula '" + text + "' (mean, concat_ffn, ewp_ffn)");
}

AggStructure parse_structure(const std::string& text) {
  const std::string t = lower(text);
  if (t == "none") return AggStructure::None;
  if (t == "rtal") return AggStructure::RTAL;
  if (t == "linear") return AggStructure::LinearCombination;
  if (t == "iterative") return AggStructure::IterativeCombination;
  if (t == "cnn_tree") return AggStructure::CnnLikeTree;
  throw ConfigError("structure", "unknown aggregation structure '" + text + "' (none, rtal, linear, iterative, cnn_tree)");
}

// ------------------------------------------------------------------ formulas

AggFormula AggFormula::create(AggFormulaKind kind, const AggDims& dims, Initializer& init) {
  AggFormula f;
  f.kind = kind;
  f.dropout = dims.dropout;
  switch (kind) {
    case AggFormulaKind::Mean:
      break;
    case AggFormulaKind::ConcatFFN:
      f.ffn = FeedForward::create(2 * dims.d_model, dims.inner_dim, dims.d_model, init);
      break;
    case AggFormulaKind::EwpFFN:
      f.norm = LayerNorm::create(dims.d_model, dims.norm_eps, init);
      f.ffn = FeedForward::create(dims.d_model, dims.inner_dim, dims.d_model, init);
      f.beta = init.constant({1}, 1.0);
      break;
  }
  return f;
}

std::size_t AggFormula::param_count(AggFormulaKind kind, std::size_t d, std::size_t a) {
  switch (kind) {
    case AggFormulaKind::Mean: return 0;
    case AggFormulaKind::ConcatFFN: return (2 * d * a + a) + (a * d + d);
    case AggFormulaKind::EwpFFN: return (d * a + a) + (a * d + d) + 2 * d + 1;
  }
  return 0;
}

Tensor AggFormula::apply(const Tensor& h_i, const Tensor& h_j, const ForwardMode& mode) const {
  switch (kind) {
    case AggFormulaKind::Mean: return agg_mean(h_i, h_j);
    case AggFormulaKind::ConcatFFN: return agg_concat_ffn(*this, h_i, h_j);
    case AggFormulaKind::EwpFFN: return agg_ewp_ffn(*this, h_i, h_j, mode);
  }
  throw std::logic_error("unreachable");
}

void AggFormula::collect(const std::string& prefix, ParamList& out) const {
  if (kind == AggFormulaKind::Mean) return;
  if (kind == AggFormulaKind::EwpFFN) {
    norm.collect(prefix + ".norm", out);
    out.push_back({prefix + ".beta", beta});
  }
  ffn.collect(prefix + ".ffn", out);
}

namespace {
void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": layer outputs differ in shape " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}
}  // namespace

Tensor agg_mean(const Tensor& h_i, const Tensor& h_j) {
  require_same_shape(h_i, h_j, "agg_mean");
  return scale(add(h_i, h_j), 0.5);
}

Tensor agg_concat_ffn(const AggFormula& formula, const Tensor& h_i, const Tensor& h_j) {
  require_same_shape(h_i, h_j, "agg_concat_ffn");
  if (formula.kind != AggFormulaKind::ConcatFFN) throw std::invalid_argument("agg_concat_ffn: formula is not ConcatFFN");
  return formula.ffn.forward(concat_last_dim(h_i, h_j));
}

Tensor agg_ewp_ffn(const AggFormula& formula, const Tensor& h_i, const Tensor& h_j, const ForwardMode& mode) {
  require_same_shape(h_i, h_j, "agg_ewp_ffn");
  if (formula.kind != AggFormulaKind::EwpFFN) throw std::invalid_argument("agg_ewp_ffn: formula is not EwpFFN");
  const Tensor sumb = scale_by(add(h_i, h_j), formula.beta);
  return add(dropout(formula.ffn.forward(formula.norm.forward(sumb)), formula.dropout, mode), sumb);
}

// ---------------------------------------------------------------- RTAL tree

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

AggTree AggTree::create(std::size_t leaves, AggFormulaKind kind, const AggDims& dims, Initializer& init, bool residual) {
  if (leaves < 2 || !is_power_of_two(leaves)) {
    throw StructureError("aggregation tree requires the number of layers to be 2^n with n >= 1, got " +
                         std::to_string(leaves));
  }
  AggTree tree;
  tree.leaf_count_ = leaves;
  tree.nodes_.reserve(leaves - 1);
  tree.build(0, leaves, kind, dims, init);
  for (AggNode& node : tree.nodes_) node.residual = residual;
  tree.nodes_.back().residual = false;
  return tree;
}

int AggTree::build(std::size_t first, std::size_t count, AggFormulaKind kind, const AggDims& dims, Initializer& init) {
  if (count == 1) return -static_cast<int>(first) - 1;
  const int left = build(first, count / 2, kind, dims, init);
  const int right = build(first + count / 2, count / 2, kind, dims, init);
  nodes_.push_back({AggFormula::create(kind, dims, init), true, left, right});
  return static_cast<int>(nodes_.size()) - 1;
}

std::size_t AggTree::residual_count() const {
  return static_cast<std::size_t>(std::count_if(nodes_.begin(), nodes_.end(), [](const AggNode& n) { return n.residual; }));
}

Tensor AggTree::aggregate(std::span<const Tensor> layer_outputs, const ForwardMode& mode) const {
  if (layer_outputs.size() != leaf_count_ || !is_power_of_two(layer_outputs.size())) {
    throw StructureError("aggregation tree requires the number of layers to be 2^n matching its " +
                         std::to_string(leaf_count_) + " leaves, got " + std::to_string(layer_outputs.size()));
  }
  std::vector<Tensor> values(nodes_.size());
  auto value_of = [&](int ref) -> const Tensor& {
    return ref >= 0 ? values[static_cast<std::size_t>(ref)] : layer_outputs[static_cast<std::size_t>(-ref - 1)];
  };
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const AggNode& node = nodes_[i];
    const Tensor& left = value_of(node.left);
    const Tensor& right = value_of(node.right);
    const Tensor fused = node.formula.apply(left, right, mode);
    values[i] = node.residual ? add(fused, right) : fused;
  }
  return values.back();
}

void AggTree::collect(const std::string& prefix, ParamList& out) const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) nodes_[i].formula.collect(prefix + ".node" + std::to_string(i), out);
}

Tensor rtal_aggregate(const AggTree& tree, std::span<const Tensor> layer_outputs, const ForwardMode& mode) {
  return tree.aggregate(layer_outputs, mode);
}

// ---------------------------------------------------------------- baselines

BaselineAggregator BaselineAggregator::create(BaselineKind kind, std::size_t layers, AggFormulaKind formula,
                                              const AggDims& dims, Initializer& init) {
  if (layers == 0) throw StructureError("baseline aggregation needs at least one layer");
  BaselineAggregator agg;
  agg.kind_ = kind;
  agg.layers_ = layers;
  switch (kind) {
    case BaselineKind::LinearCombination:
      agg.weights_ = init.constant({layers}, 0.0);
      break;
    case BaselineKind::IterativeCombination:
      for (std::size_t l = 1; l < layers; ++l) agg.steps_.push_back(AggFormula::create(formula, dims, init));
      break;
    case BaselineKind::CnnLikeTree:
      agg.tree_ = AggTree::create(layers, formula, dims, init, /*residual=*/false);
      break;
  }
  return agg;
}

Tensor BaselineAggregator::aggregate(std::span<const Tensor> layer_outputs, const ForwardMode& mode) const {
  if (layer_outputs.size() != layers_) {
    throw StructureError("baseline aggregator expects " + std::to_string(layers_) + " layer outputs, got " +
                         std::to_string(layer_outputs.size()));
  }
  switch (kind_) {
    case BaselineKind::LinearCombination: {
      const Tensor w = softmax_last_dim(weights_);
      Tensor acc = scale_by(layer_outputs[0], slice(w, 0, 0, 1));
      for (std::size_t l = 1; l < layers_; ++l) acc = add(acc, scale_by(layer_outputs[l], slice(w, 0, l, l + 1)));
      return acc;
    }
    case BaselineKind::IterativeCombination: {
      Tensor acc = layer_outputs[0];
      for (std::size_t l = 1; l < layers_; ++l) acc = steps_[l - 1].apply(layer_outputs[l], acc, mode);
      return acc;
    }
    case BaselineKind::CnnLikeTree:
      return tree_->aggregate(layer_outputs, mode);
  }
  throw std::logic_error("unreachable");
}

void BaselineAggregator::collect(const std::string& prefix, ParamList& out) const {
  switch (kind_) {
    case BaselineKind::LinearCombination:
      out.push_back({prefix + ".weights", weights_});
      break;
    case BaselineKind::IterativeCombination:
      for (std::size_t i = 0; i < steps_.size(); ++i) steps_[i].collect(prefix + ".step" + std::to_string(i), out);
      break;
    case BaselineKind::CnnLikeTree:
      tree_->collect(prefix, out);
      break;
  }
}

Tensor baseline_aggregate(const BaselineAggregator& agg, std::span<const Tensor> layer_outputs, const ForwardMode& mode) {
  return agg.aggregate(layer_outputs, mode);
}

// ---------------------------------------------------------------- stack attachment

std::size_t LayerAggregator::span_for(AggStructure structure, std::size_t num_layers) {
  switch (structure) {
    case AggStructure::None:
      return 0;
    case AggStructure::LinearCombination:
    case AggStructure::IterativeCombination:
      return num_layers;
    case AggStructure::RTAL:
    case AggStructure::CnnLikeTree: {
      std::size_t span = 1;
      while (span * 2 <= num_layers) span *= 2;
      if (span < 2) {
        throw StructureError("tree aggregation requires the number of layers to be 2^n with n >= 1; a stack of " +
                             std::to_string(num_layers) + " layer(s) has no such span");
      }
      return span;
    }
  }
  return 0;
}

std::size_t LayerAggregator::param_count(AggStructure structure, AggFormulaKind formula, std::size_t num_layers,
                                         std::size_t d_model, std::size_t inner_dim) {
  const std::size_t span = span_for(structure, num_layers);
  const std::size_t per_node = AggFormula::param_count(formula, d_model, inner_dim);
  switch (structure) {
    case AggStructure::None: return 0;
    case AggStructure::LinearCombination: return span;
    case AggStructure::IterativeCombination:
    case AggStructure::RTAL:
    case AggStructure::CnnLikeTree: return (span - 1) * per_node;
  }
  return 0;
}

LayerAggregator LayerAggregator::create(AggStructure structure, AggFormulaKind formula, std::size_t num_layers,
                                        const AggDims& dims, Initializer& init) {
  if (structure == AggStructure::None) throw std::invalid_argument("LayerAggregator::create: structure is none");
  LayerAggregator agg;
  agg.structure_ = structure;
  agg.span_ = span_for(structure, num_layers);
  agg.begin_ = num_layers - agg.span_;
  switch (structure) {
    case AggStructure::RTAL:
      agg.impl_ = AggTree::create(agg.span_, formula, dims, init, /*residual=*/true);
      break;
    case AggStructure::LinearCombination:
      agg.impl_ = BaselineAggregator::create(BaselineKind::LinearCombination, agg.span_, formula, dims, init);
      break;
    case AggStructure::IterativeCombination:
      agg.impl_ = BaselineAggregator::create(BaselineKind::IterativeCombination, agg.span_, formula, dims, init);
      break;
    case AggStructure::CnnLikeTree:
      agg.impl_ = BaselineAggregator::create(BaselineKind::CnnLikeTree, agg.span_, formula, dims, init);
      break;
    case AggStructure::None:
      break;
  }
  return agg;
}

Tensor LayerAggregator::aggregate(std::span<const Tensor> layer_outputs, const ForwardMode& mode) const {
  if (layer_outputs.size() != begin_ + span_) {
    throw StructureError("aggregator configured for " + std::to_string(begin_ + span_) + " layers, got " +
                         std::to_string(layer_outputs.size()));
  }
  const auto fused = layer_outputs.subspan(begin_, span_);
  return std::visit([&](const auto& impl) { return impl.aggregate(fused, mode); }, impl_);
}

void LayerAggregator::collect(const std::string& prefix, ParamList& out) const {
  std::visit([&](const auto& impl) { impl.collect(prefix, out); }, impl_);
}

}  // namespace rtal
