#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "lcrp/errors.hpp"
#include "lcrp/graph.hpp"

namespace lcrp {

struct CanonizationReport {
  std::vector<std::pair<std::string, std::string>> fused_pairs;  // (linear, batchnorm)
  std::vector<std::string> standalone_batchnorms;
  std::vector<std::string> sum_junctions;
};

namespace detail {

// Copies node weights into `dst`'s blob, returning the remapped refs.
inline std::map<std::string, WeightRef> copy_weights(const Graph& src, int i, Graph& dst) {
  std::map<std::string, WeightRef> refs;
  for (const auto& [name, ref] : src.node(i).weights) refs[name] = dst.append_weights(src.weight(i, name));
  return refs;
}

}  // namespace detail

// Folds every batchnorm that directly follows a conv2d/dense with no other
// consumer into that linear node. Remaining batchnorms stay in place and are
// listed as standalone.
inline std::pair<Graph, CanonizationReport> fuse_batchnorm(const Graph& g) {
  CanonizationReport report;
  const auto consumers = g.consumers();
  const int count = static_cast<int>(g.size());

  for (int i = 0; i < count; ++i) {
    const auto& n = g.node(i);
    if (n.op != OpKind::BatchNorm2d) continue;
    const auto var = g.weight(i, "var");
    for (float v : var)
      if (!(v + n.hp.eps > 0.0f))
        throw CanonizationError("batchnorm '" + n.id + "' has non-positive variance + eps");
  }

  // fused_into[bn] = linear index; absorbs[linear] = bn index
  std::vector<int> fused_into(g.size(), -1), absorbs(g.size(), -1);
  for (int i = 0; i < count; ++i) {
    const auto& n = g.node(i);
    if (n.op != OpKind::BatchNorm2d) continue;
    const int src = g.inputs_of(i).at(0);
    if (src >= 0 && is_linear(g.node(src).op) && consumers[static_cast<std::size_t>(src)].size() == 1) {
      fused_into[static_cast<std::size_t>(i)] = src;
      absorbs[static_cast<std::size_t>(src)] = i;
      report.fused_pairs.emplace_back(g.node(src).id, n.id);
    } else {
      report.standalone_batchnorms.push_back(n.id);
    }
  }

  Graph out(g.name(), g.input_shape(), g.head());
  std::map<std::string, std::string> rename;  // removed batchnorm id -> linear id
  for (int i = 0; i < count; ++i) {
    if (fused_into[static_cast<std::size_t>(i)] >= 0) {
      rename[g.node(i).id] = g.node(fused_into[static_cast<std::size_t>(i)]).id;
      continue;
    }
    NodeSpec spec = g.node(i);
    for (auto& in : spec.inputs)
      if (auto it = rename.find(in); it != rename.end()) in = it->second;

    const int bn = absorbs[static_cast<std::size_t>(i)];
    if (bn < 0) {
      spec.weights = detail::copy_weights(g, i, out);
    } else {
      const auto& bnode = g.node(bn);
      const auto gamma = g.weight(bn, "gamma");
      const auto beta = g.weight(bn, "beta");
      const auto mean = g.weight(bn, "mean");
      const auto var = g.weight(bn, "var");
      const auto kernel = g.weight(i, "kernel");
      const auto bias = g.weight(i, "bias");
      const std::size_t rows = static_cast<std::size_t>(spec.hp.out_channels);
      const std::size_t row_len = kernel.size() / rows;
      std::vector<float> k(kernel.begin(), kernel.end());
      std::vector<float> b(rows, 0.0f);
      for (std::size_t r = 0; r < rows; ++r) {
        const double s = static_cast<double>(gamma[r]) / std::sqrt(static_cast<double>(var[r]) + bnode.hp.eps);
        for (std::size_t j = 0; j < row_len; ++j) k[r * row_len + j] = static_cast<float>(kernel[r * row_len + j] * s);
        const double b0 = bias.empty() ? 0.0 : bias[r];
        b[r] = static_cast<float>((b0 - mean[r]) * s + beta[r]);
      }
      spec.weights.clear();
      // Same order as copy_weights (name order) so a second pass is a no-op.
      spec.weights["bias"] = out.append_weights(b);
      spec.weights["kernel"] = out.append_weights(k);
    }
    out.add_node(std::move(spec));
  }
  return {std::move(out), std::move(report)};
}

// Annotates every add node for the norm rule.
inline Graph mark_sum_junctions(const Graph& g, std::vector<std::string>* marked = nullptr) {
  Graph out = g;
  for (int i = 0; i < static_cast<int>(out.size()); ++i) {
    if (out.node(i).op != OpKind::Add) continue;
    NodeSpec spec = out.node(i);
    spec.hp.norm_rule = true;
    out.replace_node(i, std::move(spec));
    if (marked) marked->push_back(out.node(i).id);
  }
  return out;
}

// Batchnorm fusion followed by sum-junction annotation.
inline std::pair<Graph, CanonizationReport> canonize(const Graph& g) {
  auto [fused, report] = fuse_batchnorm(g);
  Graph marked = mark_sum_junctions(fused, &report.sum_junctions);
  return {std::move(marked), std::move(report)};
}

}  // namespace lcrp
