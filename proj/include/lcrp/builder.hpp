#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "lcrp/graph.hpp"
#include "lcrp/random.hpp"

namespace lcrp {

// Incremental graph construction with shape tracking and seeded
// He-normal initialization. Explicit weights may be passed instead.
class GraphBuilder {
 public:
  GraphBuilder(std::string name, Shape input_shape, HeadSpec head, std::uint64_t seed = 0)
      : graph_(std::move(name), std::move(input_shape), head), rng_(seed) {}

  const Shape& shape(const std::string& id) const {
    if (id == kInputId) return graph_.input_shape();
    return shapes_.at(static_cast<std::size_t>(graph_.index_of(id)));
  }

  // bias_init: nullopt => no bias; value => constant; NaN => small random.
  std::string conv(const std::string& id, const std::string& in, int out_channels, int kernel, int stride = 1,
                   int padding = 0, bool with_bias = true, std::optional<std::vector<float>> kernel_w = std::nullopt,
                   std::optional<std::vector<float>> bias_w = std::nullopt) {
    NodeSpec n;
    n.id = id;
    n.op = OpKind::Conv2d;
    n.inputs = {in};
    n.hp.in_channels = shape(in).channels();
    n.hp.out_channels = out_channels;
    n.hp.kernel = kernel;
    n.hp.stride = stride;
    n.hp.padding = padding;
    const std::size_t fan_in = static_cast<std::size_t>(n.hp.in_channels) * kernel * kernel;
    n.weights["kernel"] = graph_.append_weights(kernel_w ? *kernel_w : he(fan_in * out_channels, fan_in));
    if (with_bias || bias_w)
      n.weights["bias"] = graph_.append_weights(bias_w ? *bias_w : small(static_cast<std::size_t>(out_channels)));
    return add(std::move(n));
  }

  std::string dense(const std::string& id, const std::string& in, int out_features, bool with_bias = true,
                    std::optional<std::vector<float>> kernel_w = std::nullopt,
                    std::optional<std::vector<float>> bias_w = std::nullopt) {
    NodeSpec n;
    n.id = id;
    n.op = OpKind::Dense;
    n.inputs = {in};
    n.hp.in_channels = static_cast<int>(shape(in).numel());
    n.hp.out_channels = out_features;
    const auto fan_in = static_cast<std::size_t>(n.hp.in_channels);
    n.weights["kernel"] = graph_.append_weights(kernel_w ? *kernel_w : he(fan_in * out_features, fan_in));
    if (with_bias || bias_w)
      n.weights["bias"] = graph_.append_weights(bias_w ? *bias_w : small(static_cast<std::size_t>(out_features)));
    return add(std::move(n));
  }

  // Random running statistics unless explicit values are given.
  std::string batchnorm(const std::string& id, const std::string& in,
                        std::optional<std::array<std::vector<float>, 4>> params = std::nullopt, float eps = 1e-5f) {
    NodeSpec n;
    n.id = id;
    n.op = OpKind::BatchNorm2d;
    n.inputs = {in};
    n.hp.eps = eps;
    const auto C = static_cast<std::size_t>(shape(in).channels());
    std::array<std::vector<float>, 4> p;
    if (params) {
      p = *params;
    } else {
      for (auto& v : p) v.resize(C);
      for (std::size_t c = 0; c < C; ++c) {
        p[0][c] = static_cast<float>(rng_.uniform(0.8, 1.2));
        p[1][c] = static_cast<float>(rng_.uniform(-0.1, 0.1));
        p[2][c] = static_cast<float>(rng_.uniform(-0.1, 0.1));
        p[3][c] = static_cast<float>(rng_.uniform(0.6, 1.4));
      }
    }
    n.weights["gamma"] = graph_.append_weights(p[0]);
    n.weights["beta"] = graph_.append_weights(p[1]);
    n.weights["mean"] = graph_.append_weights(p[2]);
    n.weights["var"] = graph_.append_weights(p[3]);
    return add(std::move(n));
  }

  std::string relu(const std::string& id, const std::string& in) { return simple(id, OpKind::Relu, {in}); }
  std::string maxpool(const std::string& id, const std::string& in, int k, int s) {
    return pool(id, OpKind::MaxPool2d, in, k, s);
  }
  std::string avgpool(const std::string& id, const std::string& in, int k, int s) {
    return pool(id, OpKind::AvgPool2d, in, k, s);
  }
  std::string global_avgpool(const std::string& id, const std::string& in) {
    return simple(id, OpKind::GlobalAvgPool, {in});
  }
  std::string upsample(const std::string& id, const std::string& in, int factor) {
    NodeSpec n;
    n.id = id;
    n.op = OpKind::UpsampleNearest;
    n.inputs = {in};
    n.hp.factor = factor;
    return add(std::move(n));
  }
  std::string add_junction(const std::string& id, std::vector<std::string> ins) {
    return simple(id, OpKind::Add, std::move(ins));
  }
  std::string concat(const std::string& id, std::vector<std::string> ins) {
    return simple(id, OpKind::Concat, std::move(ins));
  }
  std::string flatten(const std::string& id, const std::string& in, bool cells = false) {
    NodeSpec n;
    n.id = id;
    n.op = OpKind::Flatten;
    n.inputs = {in};
    n.hp.cells = cells;
    return add(std::move(n));
  }

  Rng& rng() { return rng_; }
  Graph build() {
    validate(graph_);
    return graph_;
  }
  Graph& graph() { return graph_; }

 private:
  std::string pool(const std::string& id, OpKind op, const std::string& in, int k, int s) {
    NodeSpec n;
    n.id = id;
    n.op = op;
    n.inputs = {in};
    n.hp.kernel = k;
    n.hp.stride = s;
    return add(std::move(n));
  }
  std::string simple(const std::string& id, OpKind op, std::vector<std::string> ins) {
    NodeSpec n;
    n.id = id;
    n.op = op;
    n.inputs = std::move(ins);
    return add(std::move(n));
  }
  std::string add(NodeSpec n) {
    const std::string id = n.id;
    graph_.add_node(std::move(n));
    shapes_ = infer_shapes(graph_);
    return id;
  }
  std::vector<float> he(std::size_t count, std::size_t fan_in) {
    std::vector<float> w(count);
    const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : w) v = static_cast<float>(rng_.normal() * sd);
    return w;
  }
  std::vector<float> small(std::size_t count) {
    std::vector<float> w(count);
    for (auto& v : w) v = static_cast<float>(rng_.uniform(-0.05, 0.05));
    return w;
  }

  Graph graph_;
  Rng rng_;
  std::vector<Shape> shapes_;
};

}  // namespace lcrp
