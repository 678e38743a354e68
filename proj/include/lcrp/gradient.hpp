#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "lcrp/forward.hpp"
#include "lcrp/graph.hpp"
#include "lcrp/ops.hpp"

namespace lcrp {

// d(seed . output)/d(value) for the graph input and every node output.
struct Gradients {
  Tensor input;
  std::vector<Tensor> nodes;

  const Tensor& value(int idx) const { return idx < 0 ? input : nodes.at(static_cast<std::size_t>(idx)); }
  const Tensor& at(const Graph& g, const std::string& id) const { return value(g.index_of(id)); }
};

namespace detail {

inline void accumulate(Tensor& slot, Tensor&& contrib) {
  if (slot.empty())
    slot = std::move(contrib);
  else
    slot += contrib;
}

}  // namespace detail

// Plain backpropagation. When `weight_grad` is non-empty it must match the
// weight blob and receives the accumulated parameter gradients
// (batchnorm running statistics are treated as constants).
inline Gradients gradient(const Graph& g, const ActivationCache& cache, const Tensor& seed,
                          std::span<float> weight_grad = {}) {
  if (!(seed.shape() == cache.output().shape()))
    throw ShapeError("gradient seed shape " + seed.shape().str() + " does not match head output " +
                     cache.output().shape().str());
  if (!weight_grad.empty() && weight_grad.size() != g.weights().size())
    throw ValidationError("weight gradient buffer does not match the weight blob");

  auto grad_span = [&](int i, const std::string& name) -> std::span<float> {
    const auto& n = g.node(i);
    auto it = n.weights.find(name);
    if (weight_grad.empty() || it == n.weights.end()) return {};
    return weight_grad.subspan(it->second.offset, it->second.length);
  };

  const int count = static_cast<int>(g.size());
  Gradients out;
  out.nodes.resize(g.size());
  out.nodes.back() = seed;

  for (int i = count - 1; i >= 0; --i) {
    auto& dy_slot = out.nodes[static_cast<std::size_t>(i)];
    if (dy_slot.empty()) dy_slot = Tensor(cache.value(i).shape());
    const Tensor& dy = dy_slot;
    const auto& n = g.node(i);
    const auto& ins = g.inputs_of(i);
    auto push = [&](int k, Tensor&& t) {
      if (k < 0)
        detail::accumulate(out.input, std::move(t));
      else
        detail::accumulate(out.nodes[static_cast<std::size_t>(k)], std::move(t));
    };
    const Tensor& x = cache.value(ins[0]);
    switch (n.op) {
      case OpKind::Conv2d: {
        const auto geo = ops::ConvGeometry::of(n.hp, x.shape());
        if (!weight_grad.empty()) ops::conv2d_param_grad(x, dy, geo, grad_span(i, "kernel"), grad_span(i, "bias"));
        push(ins[0], ops::conv2d_transpose(dy, g.weight(i, "kernel"), geo));
        break;
      }
      case OpKind::Dense:
        if (!weight_grad.empty()) ops::dense_param_grad(x, dy, grad_span(i, "kernel"), grad_span(i, "bias"));
        push(ins[0], ops::dense_transpose(dy, g.weight(i, "kernel"), x.shape()));
        break;
      case OpKind::BatchNorm2d: {
        const auto gamma = g.weight(i, "gamma");
        const auto mean = g.weight(i, "mean");
        const auto var = g.weight(i, "var");
        const auto a = ops::batchnorm_affine(gamma, g.weight(i, "beta"), mean, var, n.hp.eps);
        if (!weight_grad.empty()) {
          auto dgamma = grad_span(i, "gamma");
          auto dbeta = grad_span(i, "beta");
          for (int c = 0; c < x.shape().channels(); ++c) {
            const auto cc = static_cast<std::size_t>(c);
            const float inv = 1.0f / std::sqrt(var[cc] + n.hp.eps);
            float sg = 0.0f, sb = 0.0f;
            auto xs = x.channel(c);
            auto ds = dy.channel(c);
            for (std::size_t p = 0; p < xs.size(); ++p) {
              sg += ds[p] * (xs[p] - mean[cc]) * inv;
              sb += ds[p];
            }
            dgamma[cc] += sg;
            dbeta[cc] += sb;
          }
        }
        push(ins[0], ops::channel_affine(dy, a.scale, {}));
        break;
      }
      case OpKind::Relu: {
        Tensor dx(x.shape());
        for (std::size_t p = 0; p < x.size(); ++p) dx[p] = x[p] > 0.0f ? dy[p] : 0.0f;
        push(ins[0], std::move(dx));
        break;
      }
      case OpKind::MaxPool2d:
        push(ins[0], ops::maxpool_route(x, dy, n.hp.kernel, n.hp.stride));
        break;
      case OpKind::AvgPool2d:
        push(ins[0], ops::avgpool_spread(x.shape(), dy, n.hp.kernel, n.hp.stride,
                                         1.0f / static_cast<float>(n.hp.kernel * n.hp.kernel)));
        break;
      case OpKind::GlobalAvgPool:
        push(ins[0], ops::global_spread(x.shape(), dy, 1.0f / static_cast<float>(x.shape().spatial())));
        break;
      case OpKind::UpsampleNearest:
        push(ins[0], ops::upsample_collect(x.shape(), dy, n.hp.factor));
        break;
      case OpKind::Add:
        for (int k : ins) push(k, Tensor(dy));
        break;
      case OpKind::Concat: {
        std::vector<Shape> parts;
        for (int k : ins) parts.push_back(cache.value(k).shape());
        auto split = ops::concat_split(dy, parts);
        for (std::size_t j = 0; j < ins.size(); ++j) push(ins[j], std::move(split[j]));
        break;
      }
      case OpKind::Flatten:
        push(ins[0], ops::unflatten(x.shape(), dy, n.hp.cells));
        break;
    }
  }
  if (out.input.empty()) out.input = Tensor(cache.input.shape());
  return out;
}

}  // namespace lcrp
