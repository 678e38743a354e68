#pragma once

#include <span>
#include <string>
#include <vector>

#include "lcrp/errors.hpp"
#include "lcrp/graph.hpp"
#include "lcrp/ops.hpp"
#include "lcrp/tensor.hpp"

namespace lcrp {

// Every node output of one forward pass, indexed like Graph::nodes().
struct ActivationCache {
  Tensor input;
  std::vector<Tensor> outputs;

  // idx == -1 addresses the graph input.
  const Tensor& value(int idx) const { return idx < 0 ? input : outputs.at(static_cast<std::size_t>(idx)); }
  const Tensor& at(const Graph& g, const std::string& id) const { return value(g.index_of(id)); }
  const Tensor& output() const { return outputs.back(); }
};

// Multiplies the output channels of one node by `scale` right after it is
// computed. Zero entries implement concept flipping.
struct ChannelScaling {
  int node = -1;
  std::vector<float> scale;
};

namespace detail {

inline void apply_scaling(Tensor& t, const std::vector<float>& scale, const NodeSpec& n) {
  if (static_cast<int>(scale.size()) != t.shape().channels())
    throw ShapeError("channel scaling for node '" + n.id + "' has " + std::to_string(scale.size()) +
                     " entries, node has " + std::to_string(t.shape().channels()) + " channels");
  for (int c = 0; c < t.shape().channels(); ++c) {
    const float s = scale[static_cast<std::size_t>(c)];
    if (s == 1.0f) continue;
    for (float& v : t.channel(c)) v *= s;
  }
}

inline void check_finite(const Tensor& t, const NodeSpec& n) {
  if (!t.all_finite()) throw NumericalError(n.id, "non-finite activation produced by " + std::string(op_name(n.op)));
}

}  // namespace detail

// Evaluates node i given its input tensors.
inline Tensor evaluate_node(const Graph& g, int i, const std::vector<const Tensor*>& ins) {
  const auto& n = g.node(i);
  const Tensor& x = *ins.at(0);
  switch (n.op) {
    case OpKind::Conv2d:
      return ops::conv2d(x, g.weight(i, "kernel"), g.weight(i, "bias"), ops::ConvGeometry::of(n.hp, x.shape()));
    case OpKind::Dense:
      return ops::dense(x, g.weight(i, "kernel"), g.weight(i, "bias"), n.hp.out_channels);
    case OpKind::BatchNorm2d: {
      const auto a = ops::batchnorm_affine(g.weight(i, "gamma"), g.weight(i, "beta"), g.weight(i, "mean"),
                                           g.weight(i, "var"), n.hp.eps);
      return ops::channel_affine(x, a.scale, a.shift);
    }
    case OpKind::Relu:
      return ops::relu(x);
    case OpKind::MaxPool2d:
      return ops::maxpool(x, n.hp.kernel, n.hp.stride);
    case OpKind::AvgPool2d:
      return ops::avgpool(x, n.hp.kernel, n.hp.stride);
    case OpKind::GlobalAvgPool:
      return ops::global_avgpool(x);
    case OpKind::UpsampleNearest:
      return ops::upsample_nearest(x, n.hp.factor);
    case OpKind::Add: {
      Tensor y = x;
      for (std::size_t k = 1; k < ins.size(); ++k) y += *ins[k];
      return y;
    }
    case OpKind::Concat:
      return ops::concat(ins);
    case OpKind::Flatten:
      return ops::flatten(x, n.hp.cells);
  }
  throw ValidationError("unsupported op at node '" + n.id + "'");
}

// Full forward pass. `edits` rescale channels of selected nodes as they are produced.
inline ActivationCache forward(const Graph& g, const Tensor& input, std::span<const ChannelScaling> edits = {}) {
  if (!(input.shape() == g.input_shape()))
    throw ShapeError("input shape " + input.shape().str() + " does not match graph input " +
                     g.input_shape().str());
  ActivationCache cache;
  cache.input = input;
  cache.outputs.reserve(g.size());
  std::vector<const Tensor*> ins;
  for (int i = 0; i < static_cast<int>(g.size()); ++i) {
    ins.clear();
    for (int k : g.inputs_of(i)) ins.push_back(&cache.value(k));
    Tensor y = evaluate_node(g, i, ins);
    for (const auto& e : edits)
      if (e.node == i) detail::apply_scaling(y, e.scale, g.node(i));
    detail::check_finite(y, g.node(i));
    cache.outputs.push_back(std::move(y));
  }
  return cache;
}

// Re-runs only the nodes downstream of `node` after replacing its output.
inline ActivationCache forward_from(const Graph& g, const ActivationCache& base, int node, Tensor replaced) {
  if (!(replaced.shape() == base.value(node).shape()))
    throw ShapeError("replacement for node '" + g.node(node).id + "' has shape " + replaced.shape().str());
  ActivationCache cache = base;
  std::vector<char> dirty(g.size(), 0);
  cache.outputs[static_cast<std::size_t>(node)] = std::move(replaced);
  dirty[static_cast<std::size_t>(node)] = 1;
  std::vector<const Tensor*> ins;
  for (int i = node + 1; i < static_cast<int>(g.size()); ++i) {
    bool touched = false;
    for (int k : g.inputs_of(i)) touched = touched || (k >= 0 && dirty[static_cast<std::size_t>(k)]);
    if (!touched) continue;
    ins.clear();
    for (int k : g.inputs_of(i)) ins.push_back(&cache.value(k));
    Tensor y = evaluate_node(g, i, ins);
    detail::check_finite(y, g.node(i));
    cache.outputs[static_cast<std::size_t>(i)] = std::move(y);
    dirty[static_cast<std::size_t>(i)] = 1;
  }
  return cache;
}

// Same as forward_from but only returns the head output.
inline Tensor output_after_edit(const Graph& g, const ActivationCache& base, int node, Tensor replaced) {
  return forward_from(g, base, node, std::move(replaced)).output();
}

}  // namespace lcrp
