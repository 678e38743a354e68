#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "lcrp/errors.hpp"
#include "lcrp/tensor.hpp"

namespace lcrp {

enum class OpKind {
  Conv2d,
  Dense,
  BatchNorm2d,
  Relu,
  MaxPool2d,
  AvgPool2d,
  GlobalAvgPool,
  UpsampleNearest,
  Add,
  Concat,
  Flatten,
};

inline std::string_view op_name(OpKind op) {
  switch (op) {
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Dense: return "dense";
    case OpKind::BatchNorm2d: return "batchnorm2d";
    case OpKind::Relu: return "relu";
    case OpKind::MaxPool2d: return "maxpool2d";
    case OpKind::AvgPool2d: return "avgpool2d";
    case OpKind::GlobalAvgPool: return "global-avgpool";
    case OpKind::UpsampleNearest: return "upsample-nearest";
    case OpKind::Add: return "add";
    case OpKind::Concat: return "concat";
    case OpKind::Flatten: return "flatten";
  }
  return "?";
}

inline std::optional<OpKind> op_from_name(std::string_view s) {
  for (auto op : {OpKind::Conv2d, OpKind::Dense, OpKind::BatchNorm2d, OpKind::Relu,
                  OpKind::MaxPool2d, OpKind::AvgPool2d, OpKind::GlobalAvgPool,
                  OpKind::UpsampleNearest, OpKind::Add, OpKind::Concat, OpKind::Flatten})
    if (op_name(op) == s) return op;
  return std::nullopt;
}

inline bool is_linear(OpKind op) { return op == OpKind::Conv2d || op == OpKind::Dense; }

// Op-specific settings. Unused fields keep their defaults.
struct Hyperparams {
  int in_channels = 0;   // conv: input channels; dense: input features
  int out_channels = 0;  // conv: filters; dense: output features
  int kernel = 1;        // conv kernel / pool window
  int stride = 1;
  int padding = 0;
  int factor = 1;        // upsample
  float eps = 1e-5f;     // batchnorm
  bool cells = false;    // flatten (C,H,W) -> (H*W, C) instead of (C*H*W)
  bool norm_rule = false;  // add: annotated sum junction

  friend bool operator==(const Hyperparams&, const Hyperparams&) = default;
};

// Offset and length into the weight blob, in float elements.
struct WeightRef {
  std::size_t offset = 0;
  std::size_t length = 0;
  friend bool operator==(const WeightRef&, const WeightRef&) = default;
};

struct NodeSpec {
  std::string id;
  OpKind op = OpKind::Relu;
  std::vector<std::string> inputs;  // node ids, or "input" for the graph input
  Hyperparams hp;
  std::map<std::string, WeightRef> weights;  // kernel, bias, gamma, beta, mean, var

  bool has_weight(const std::string& name) const { return weights.count(name) != 0; }
  friend bool operator==(const NodeSpec&, const NodeSpec&) = default;
};

enum class HeadKind { Segmentation, Detection };

struct HeadSpec {
  HeadKind kind = HeadKind::Segmentation;
  int num_classes = 0;
  int num_cells = 0;          // detection only
  int background_class = -1;  // segmentation: class excluded from "predicted object" policies
  int grid_width = 0;         // detection: cells per row, for box decoding

  int cell_channels() const { return num_classes + 4; }
  friend bool operator==(const HeadSpec&, const HeadSpec&) = default;
};

inline constexpr std::string_view kInputId = "input";

// DAG of typed nodes in topological order. The last node is the head output.
class Graph {
 public:
  Graph() = default;
  Graph(std::string name, Shape input_shape, HeadSpec head)
      : name_(std::move(name)), input_shape_(std::move(input_shape)), head_(head) {}

  const std::string& name() const noexcept { return name_; }
  void set_name(std::string n) { name_ = std::move(n); }
  const Shape& input_shape() const noexcept { return input_shape_; }
  const HeadSpec& head() const noexcept { return head_; }
  void set_head(HeadSpec h) { head_ = h; }

  const std::vector<NodeSpec>& nodes() const noexcept { return nodes_; }
  std::size_t size() const noexcept { return nodes_.size(); }
  const NodeSpec& node(int i) const { return nodes_.at(static_cast<std::size_t>(i)); }
  int output_index() const { return static_cast<int>(nodes_.size()) - 1; }

  std::vector<float>& weights() noexcept { return weights_; }
  const std::vector<float>& weights() const noexcept { return weights_; }

  // Appends a node; its inputs must already exist.
  int add_node(NodeSpec spec) {
    if (spec.id.empty() || spec.id == kInputId)
      throw ValidationError("invalid node id '" + spec.id + "'");
    if (index_.count(spec.id)) throw ValidationError("duplicate node id '" + spec.id + "'");
    std::vector<int> ins;
    for (const auto& in : spec.inputs) {
      if (in == kInputId) {
        ins.push_back(-1);
        continue;
      }
      auto it = index_.find(in);
      if (it == index_.end())
        throw ValidationError("node '" + spec.id + "' references unknown or later node '" + in + "'");
      ins.push_back(it->second);
    }
    const int idx = static_cast<int>(nodes_.size());
    index_.emplace(spec.id, idx);
    nodes_.push_back(std::move(spec));
    inputs_.push_back(std::move(ins));
    return idx;
  }

  // Appends `values` to the blob and returns the reference.
  WeightRef append_weights(std::span<const float> values) {
    WeightRef ref{weights_.size(), values.size()};
    weights_.insert(weights_.end(), values.begin(), values.end());
    return ref;
  }

  int index_of(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw ValidationError("unknown node id '" + id + "'");
    return it->second;
  }
  bool contains(const std::string& id) const { return index_.count(id) != 0; }

  // Input indices of node i; -1 denotes the graph input.
  const std::vector<int>& inputs_of(int i) const { return inputs_.at(static_cast<std::size_t>(i)); }

  std::vector<std::vector<int>> consumers() const {
    std::vector<std::vector<int>> out(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      for (int in : inputs_[i])
        if (in >= 0) out[static_cast<std::size_t>(in)].push_back(static_cast<int>(i));
    return out;
  }

  std::span<const float> weight(int i, const std::string& name) const {
    const auto& n = node(i);
    auto it = n.weights.find(name);
    if (it == n.weights.end()) return {};
    check_ref(n, name, it->second);
    return {weights_.data() + it->second.offset, it->second.length};
  }
  std::span<float> mutable_weight(int i, const std::string& name) {
    const auto& n = node(i);
    auto it = n.weights.find(name);
    if (it == n.weights.end()) return {};
    check_ref(n, name, it->second);
    return {weights_.data() + it->second.offset, it->second.length};
  }

  // Replace a node's spec (same id and inputs) in place; used by rewrites.
  void replace_node(int i, NodeSpec spec) {
    auto& slot = nodes_.at(static_cast<std::size_t>(i));
    if (spec.id != slot.id || spec.inputs != slot.inputs)
      throw ValidationError("replace_node may not change id or inputs of '" + slot.id + "'");
    slot = std::move(spec);
  }

 private:
  void check_ref(const NodeSpec& n, const std::string& name, const WeightRef& r) const {
    if (r.offset + r.length > weights_.size())
      throw ValidationError("weight '" + name + "' of node '" + n.id + "' lies outside the blob (offset " +
                            std::to_string(r.offset) + ", length " + std::to_string(r.length) +
                            ", blob " + std::to_string(weights_.size()) + ")");
  }

  std::string name_;
  Shape input_shape_;
  HeadSpec head_;
  std::vector<NodeSpec> nodes_;
  std::vector<std::vector<int>> inputs_;
  std::unordered_map<std::string, int> index_;
  std::vector<float> weights_;
};

namespace detail {

inline int pooled(int n, int k, int s, int p) { return (n + 2 * p - k) / s + 1; }

inline std::size_t expected_weight(const NodeSpec& n, const std::string& name, const Shape& in) {
  switch (n.op) {
    case OpKind::Conv2d:
      if (name == "kernel")
        return static_cast<std::size_t>(n.hp.out_channels) * n.hp.in_channels * n.hp.kernel * n.hp.kernel;
      return static_cast<std::size_t>(n.hp.out_channels);
    case OpKind::Dense:
      if (name == "kernel") return static_cast<std::size_t>(n.hp.out_channels) * n.hp.in_channels;
      return static_cast<std::size_t>(n.hp.out_channels);
    case OpKind::BatchNorm2d:
      return static_cast<std::size_t>(in.channels());
    default:
      return 0;
  }
}

}  // namespace detail

// Output shape of every node, in node order. Throws ShapeError naming the node.
inline std::vector<Shape> infer_shapes(const Graph& g) {
  std::vector<Shape> shapes;
  shapes.reserve(g.size());
  auto shape_of = [&](int idx) -> const Shape& {
    return idx < 0 ? g.input_shape() : shapes[static_cast<std::size_t>(idx)];
  };
  for (int i = 0; i < static_cast<int>(g.size()); ++i) {
    const auto& n = g.node(i);
    const auto& ins = g.inputs_of(i);
    auto fail = [&](const std::string& what) -> ShapeError {
      return ShapeError("shape mismatch at node '" + n.id + "' (" + std::string(op_name(n.op)) + "): " + what);
    };
    const std::size_t expected_inputs =
        (n.op == OpKind::Add || n.op == OpKind::Concat) ? 0 : 1;
    if (expected_inputs == 1 && ins.size() != 1) throw fail("expected exactly one input");
    if (expected_inputs == 0 && ins.size() < 2) throw fail("expected at least two inputs");
    const Shape& in = shape_of(ins[0]);

    auto require_rank3 = [&] {
      if (in.rank() != 3) throw fail("expected (C,H,W) input, got " + in.str());
    };
    Shape out;
    switch (n.op) {
      case OpKind::Conv2d: {
        require_rank3();
        if (in.channels() != n.hp.in_channels)
          throw fail("expected " + std::to_string(n.hp.in_channels) + " input channels, got " + in.str());
        if (n.hp.kernel < 1 || n.hp.stride < 1 || n.hp.padding < 0) throw fail("invalid kernel/stride/padding");
        const int h = detail::pooled(in[1], n.hp.kernel, n.hp.stride, n.hp.padding);
        const int w = detail::pooled(in[2], n.hp.kernel, n.hp.stride, n.hp.padding);
        if (h < 1 || w < 1) throw fail("kernel larger than padded input " + in.str());
        out = Shape{n.hp.out_channels, h, w};
        break;
      }
      case OpKind::Dense:
        if (static_cast<int>(in.numel()) != n.hp.in_channels)
          throw fail("expected " + std::to_string(n.hp.in_channels) + " input features, got " + in.str());
        out = Shape{n.hp.out_channels};
        break;
      case OpKind::BatchNorm2d:
      case OpKind::Relu:
        out = in;
        break;
      case OpKind::MaxPool2d:
      case OpKind::AvgPool2d: {
        require_rank3();
        if (n.hp.kernel < 1 || n.hp.stride < 1) throw fail("invalid pool window");
        const int h = detail::pooled(in[1], n.hp.kernel, n.hp.stride, 0);
        const int w = detail::pooled(in[2], n.hp.kernel, n.hp.stride, 0);
        if (h < 1 || w < 1) throw fail("pool window larger than input " + in.str());
        out = Shape{in[0], h, w};
        break;
      }
      case OpKind::GlobalAvgPool:
        require_rank3();
        out = Shape{in[0]};
        break;
      case OpKind::UpsampleNearest:
        require_rank3();
        if (n.hp.factor < 1) throw fail("invalid upsample factor");
        out = Shape{in[0], in[1] * n.hp.factor, in[2] * n.hp.factor};
        break;
      case OpKind::Add:
        for (int k : ins)
          if (!(shape_of(k) == in))
            throw fail("expected " + in.str() + ", got " + shape_of(k).str() + " from '" +
                       (k < 0 ? std::string(kInputId) : g.node(k).id) + "'");
        out = in;
        break;
      case OpKind::Concat: {
        require_rank3();
        int c = 0;
        for (int k : ins) {
          const Shape& s = shape_of(k);
          if (s.rank() != 3 || s[1] != in[1] || s[2] != in[2])
            throw fail("expected spatial " + std::to_string(in[1]) + "x" + std::to_string(in[2]) +
                       ", got " + s.str());
          c += s[0];
        }
        out = Shape{c, in[1], in[2]};
        break;
      }
      case OpKind::Flatten:
        if (n.hp.cells) {
          require_rank3();
          out = Shape{in[1] * in[2], in[0]};
        } else {
          out = Shape{static_cast<int>(in.numel())};
        }
        break;
    }
    for (const auto& [name, ref] : n.weights) {
      const auto want = detail::expected_weight(n, name, in);
      if (ref.length != want)
        throw fail("weight '" + name + "' has " + std::to_string(ref.length) + " elements, expected " +
                   std::to_string(want));
      if (ref.offset + ref.length > g.weights().size())
        throw ValidationError("weight '" + name + "' of node '" + n.id + "' lies outside the blob");
    }
    if ((n.op == OpKind::Conv2d || n.op == OpKind::Dense) && !n.has_weight("kernel"))
      throw fail("missing kernel");
    if (n.op == OpKind::BatchNorm2d)
      for (const char* w : {"gamma", "beta", "mean", "var"})
        if (!n.has_weight(w)) throw fail(std::string("missing batchnorm parameter ") + w);
    shapes.push_back(std::move(out));
  }
  return shapes;
}

// Checks the head contract against the inferred output shape.
inline void validate_head(const Graph& g, const std::vector<Shape>& shapes) {
  if (g.size() == 0) throw ValidationError("graph has no nodes");
  const Shape& out = shapes.back();
  const auto& h = g.head();
  if (h.num_classes == 0) return;  // no head contract
  if (h.kind == HeadKind::Segmentation) {
    if (out.rank() != 3 || out[0] != h.num_classes)
      throw ShapeError("segmentation head expects (" + std::to_string(h.num_classes) +
                       ",H,W) output, got " + out.str());
  } else {
    if (out.rank() != 2 || out[0] != h.num_cells || out[1] != h.cell_channels())
      throw ShapeError("detection head expects (" + std::to_string(h.num_cells) + "," +
                       std::to_string(h.cell_channels()) + ") output, got " + out.str());
  }
}

inline std::vector<Shape> validate(const Graph& g) {
  auto shapes = infer_shapes(g);
  validate_head(g, shapes);
  return shapes;
}

}  // namespace lcrp
