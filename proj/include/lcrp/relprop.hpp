#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "lcrp/errors.hpp"
#include "lcrp/forward.hpp"
#include "lcrp/graph.hpp"
#include "lcrp/ops.hpp"
#include "lcrp/tensor.hpp"

namespace lcrp {

enum class RuleKind { Epsilon, Gamma, ZPlus, Flat, Norm, WinnerTakeAll, Passthrough };

// absorb: the bias enters the denominator z_j and its share is dropped.
// exclude: z_j is the sum of input contributions only (conservative).
enum class BiasPolicy { Absorb, Exclude };

struct Rule {
  RuleKind kind = RuleKind::Passthrough;
  float param = 0.0f;  // epsilon or gamma
  BiasPolicy bias = BiasPolicy::Absorb;

  static Rule epsilon(float eps = 1e-6f, BiasPolicy b = BiasPolicy::Absorb) {
    if (!(eps > 0.0f)) throw ValidationError("epsilon must be positive");
    return {RuleKind::Epsilon, eps, b};
  }
  static Rule gamma(float g = 0.25f, BiasPolicy b = BiasPolicy::Absorb) {
    if (!(g > 0.0f)) throw ValidationError("gamma must be positive");
    return {RuleKind::Gamma, g, b};
  }
  static Rule zplus(BiasPolicy b = BiasPolicy::Absorb) { return {RuleKind::ZPlus, 0.0f, b}; }
  static Rule flat() { return {RuleKind::Flat, 0.0f, BiasPolicy::Exclude}; }
  static Rule norm() { return {RuleKind::Norm, 0.0f, BiasPolicy::Exclude}; }
  static Rule winner_take_all() { return {RuleKind::WinnerTakeAll, 0.0f, BiasPolicy::Exclude}; }
  static Rule passthrough() { return {RuleKind::Passthrough, 0.0f, BiasPolicy::Exclude}; }

  friend bool operator==(const Rule&, const Rule&) = default;
};

inline std::string_view rule_name(RuleKind k) {
  switch (k) {
    case RuleKind::Epsilon: return "epsilon";
    case RuleKind::Gamma: return "gamma";
    case RuleKind::ZPlus: return "zplus";
    case RuleKind::Flat: return "flat";
    case RuleKind::Norm: return "norm";
    case RuleKind::WinnerTakeAll: return "winner-take-all";
    case RuleKind::Passthrough: return "passthrough";
  }
  return "?";
}

inline bool rule_fits(RuleKind k, OpKind op) {
  switch (op) {
    case OpKind::Conv2d:
    case OpKind::Dense:
      return k == RuleKind::Epsilon || k == RuleKind::Gamma || k == RuleKind::ZPlus || k == RuleKind::Flat;
    case OpKind::BatchNorm2d:
      return k == RuleKind::Epsilon;
    case OpKind::Add:
      return k == RuleKind::Norm;
    case OpKind::MaxPool2d:
      return k == RuleKind::WinnerTakeAll;
    default:
      return k == RuleKind::Passthrough;
  }
}

// Resolves one rule per node: per-node overrides first, then op-kind defaults.
class RuleAssignment {
 public:
  RuleAssignment() = default;
  explicit RuleAssignment(Rule linear, bool flat_first_conv = false)
      : linear_(linear), flat_first_conv_(flat_first_conv) {}

  // "zplus-flat", "gamma-flat", "epsilon-flat", or the same without "-flat".
  static RuleAssignment preset(std::string_view name, BiasPolicy bias = BiasPolicy::Absorb) {
    const bool flat = name.ends_with("-flat");
    const auto base = flat ? name.substr(0, name.size() - 5) : name;
    RuleAssignment ra;
    if (base == "zplus")
      ra = RuleAssignment(Rule::zplus(bias), flat);
    else if (base == "gamma")
      ra = RuleAssignment(Rule::gamma(0.25f, bias), flat);
    else if (base == "epsilon")
      ra = RuleAssignment(Rule::epsilon(1e-6f, bias), flat);
    else
      throw ValidationError("unknown rule preset '" + std::string(name) + "'");
    ra.set_batchnorm(Rule::epsilon(1e-6f, bias));
    return ra;
  }

  RuleAssignment& set_linear(Rule r) {
    linear_ = r;
    return *this;
  }
  RuleAssignment& set_batchnorm(Rule r) {
    batchnorm_ = r;
    return *this;
  }
  RuleAssignment& set_flat_first_conv(bool on) {
    flat_first_conv_ = on;
    return *this;
  }
  RuleAssignment& override_node(const std::string& id, Rule r) {
    overrides_[id] = r;
    return *this;
  }
  const Rule& linear() const noexcept { return linear_; }

  Rule resolve(const Graph& g, int i) const {
    const auto& n = g.node(i);
    Rule r;
    if (auto it = overrides_.find(n.id); it != overrides_.end()) {
      r = it->second;
    } else {
      switch (n.op) {
        case OpKind::Conv2d:
        case OpKind::Dense:
          r = (flat_first_conv_ && i == first_conv(g)) ? Rule::flat() : linear_;
          break;
        case OpKind::BatchNorm2d: r = batchnorm_; break;
        case OpKind::Add: r = Rule::norm(); break;
        case OpKind::MaxPool2d: r = Rule::winner_take_all(); break;
        default: r = Rule::passthrough(); break;
      }
    }
    if (!rule_fits(r.kind, n.op))
      throw ValidationError("rule '" + std::string(rule_name(r.kind)) + "' cannot be applied to " +
                            std::string(op_name(n.op)) + " node '" + n.id + "'");
    return r;
  }

  static int first_conv(const Graph& g) {
    for (int i = 0; i < static_cast<int>(g.size()); ++i)
      if (g.node(i).op == OpKind::Conv2d) return i;
    return -1;
  }

 private:
  Rule linear_ = Rule::zplus();
  Rule batchnorm_ = Rule::epsilon();
  bool flat_first_conv_ = false;
  std::map<std::string, Rule> overrides_;
};

struct Condition {
  std::string layer;
  std::vector<int> channels;
};

// CRP condition set: per-layer channel selections.
struct ConditionSet {
  std::vector<Condition> conditions;

  bool empty() const noexcept { return conditions.empty(); }
  static ConditionSet single(std::string layer, std::vector<int> channels) {
    return ConditionSet{{Condition{std::move(layer), std::move(channels)}}};
  }
};

struct AttributionResult {
  std::vector<Tensor> relevance;  // per node output, indexed like the graph
  Tensor input_relevance;         // (C,H,W)
  Tensor input_heatmap;           // (H,W), summed over input channels

  const Tensor& at(const Graph& g, const std::string& id) const {
    return relevance.at(static_cast<std::size_t>(g.index_of(id)));
  }
};

namespace detail {

inline float sign_nonneg(float z) { return z >= 0.0f ? 1.0f : -1.0f; }

inline void split_signs(std::span<const float> v, std::vector<float>& pos, std::vector<float>& neg) {
  pos.resize(v.size());
  neg.resize(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    pos[i] = v[i] > 0.0f ? v[i] : 0.0f;
    neg[i] = v[i] < 0.0f ? v[i] : 0.0f;
  }
}

inline Tensor positive_part(const Tensor& t) {
  Tensor o(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) o[i] = t[i] > 0.0f ? t[i] : 0.0f;
  return o;
}
inline Tensor negative_part(const Tensor& t) {
  Tensor o(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) o[i] = t[i] < 0.0f ? t[i] : 0.0f;
  return o;
}
inline bool any_negative(const Tensor& t) {
  return std::any_of(t.values().begin(), t.values().end(), [](float v) { return v < 0.0f; });
}

// x (.) y elementwise, accumulated into out.
inline void mul_acc(Tensor& out, const Tensor& x, const Tensor& y) {
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += x[i] * y[i];
}

// A linear node (conv or dense) with swappable weights.
struct LinearView {
  const Graph& g;
  int node;
  Shape in_shape;

  Tensor fwd(const Tensor& x, std::span<const float> w) const {
    const auto& n = g.node(node);
    if (n.op == OpKind::Conv2d) return ops::conv2d(x, w, {}, ops::ConvGeometry::of(n.hp, in_shape));
    return ops::dense(x, w, {}, n.hp.out_channels);
  }
  Tensor bwd(const Tensor& s, std::span<const float> w) const {
    const auto& n = g.node(node);
    if (n.op == OpKind::Conv2d) return ops::conv2d_transpose(s, w, ops::ConvGeometry::of(n.hp, in_shape));
    return ops::dense_transpose(s, w, in_shape);
  }
  // Adds bias[c] (or a transform of it) to each output channel.
  template <typename F>
  void add_bias(Tensor& z, F&& f) const {
    const auto b = g.weight(node, "bias");
    if (b.empty()) return;
    for (int c = 0; c < z.shape().channels(); ++c) {
      const float v = f(b[static_cast<std::size_t>(c)]);
      if (v == 0.0f) continue;
      for (float& e : z.channel(c)) e += v;
    }
  }
};

inline Tensor linear_epsilon(const LinearView& L, const Tensor& x, const Tensor& R, const Rule& rule) {
  const auto w = L.g.weight(L.node, "kernel");
  Tensor z = L.fwd(x, w);
  if (rule.bias == BiasPolicy::Absorb) L.add_bias(z, [](float b) { return b; });
  Tensor s(z.shape());
  for (std::size_t j = 0; j < z.size(); ++j) s[j] = R[j] / (z[j] + rule.param * sign_nonneg(z[j]));
  Tensor c = L.bwd(s, w);
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= x[i];
  return c;
}

inline Tensor linear_zplus(const LinearView& L, const Tensor& x, const Tensor& R, const Rule& rule) {
  const auto w = L.g.weight(L.node, "kernel");
  std::vector<float> wp, wn;
  split_signs(w, wp, wn);
  const bool mixed = any_negative(x);
  const Tensor xp = mixed ? positive_part(x) : x;
  Tensor z = L.fwd(xp, wp);
  Tensor xn;
  if (mixed) {
    xn = negative_part(x);
    z += L.fwd(xn, wn);
  }
  if (rule.bias == BiasPolicy::Absorb) L.add_bias(z, [](float b) { return b > 0.0f ? b : 0.0f; });
  Tensor s(z.shape());
  for (std::size_t j = 0; j < z.size(); ++j) s[j] = z[j] > 0.0f ? R[j] / z[j] : 0.0f;
  Tensor out(x.shape());
  mul_acc(out, xp, L.bwd(s, wp));
  if (mixed) mul_acc(out, xn, L.bwd(s, wn));
  return out;
}

// Sign-cased gamma: favours positive contributions where z_j > 0 and
// negative contributions otherwise.
inline Tensor linear_gamma(const LinearView& L, const Tensor& x, const Tensor& R, const Rule& rule) {
  const float gamma = rule.param;
  const auto w = L.g.weight(L.node, "kernel");
  std::vector<float> wp, wn;
  split_signs(w, wp, wn);
  const bool mixed = any_negative(x);
  const Tensor xp = mixed ? positive_part(x) : x;
  const Tensor xn = mixed ? negative_part(x) : Tensor();
  const bool absorb = rule.bias == BiasPolicy::Absorb;

  Tensor z = L.fwd(x, w);
  Tensor zpos = L.fwd(xp, wp);
  Tensor zneg = L.fwd(xp, wn);
  if (mixed) {
    zpos += L.fwd(xn, wn);
    zneg += L.fwd(xn, wp);
  }
  if (absorb) {
    L.add_bias(z, [](float b) { return b; });
    L.add_bias(zpos, [](float b) { return b > 0.0f ? b : 0.0f; });
    L.add_bias(zneg, [](float b) { return b < 0.0f ? b : 0.0f; });
  }
  Tensor sp(z.shape()), sn(z.shape()), sall(z.shape());
  for (std::size_t j = 0; j < z.size(); ++j) {
    if (z[j] > 0.0f) {
      const float d = z[j] + gamma * zpos[j];
      sp[j] = R[j] / d;
      sall[j] = sp[j];
    } else {
      const float d = z[j] + gamma * zneg[j];
      sn[j] = d != 0.0f ? R[j] / d : 0.0f;
      sall[j] = sn[j];
    }
  }
  Tensor out(x.shape());
  mul_acc(out, x, L.bwd(sall, w));
  Tensor pos_part(x.shape());
  mul_acc(pos_part, xp, L.bwd(sp, wp));
  mul_acc(pos_part, xp, L.bwd(sn, wn));
  if (mixed) {
    mul_acc(pos_part, xn, L.bwd(sp, wn));
    mul_acc(pos_part, xn, L.bwd(sn, wp));
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += gamma * pos_part[i];
  return out;
}

// Uniform split over connected inputs; padding positions are not connected.
inline Tensor linear_flat(const LinearView& L, const Tensor& x, const Tensor& R) {
  const auto w = L.g.weight(L.node, "kernel");
  std::vector<float> ones_w(w.size(), 1.0f);
  Tensor ones_x(x.shape(), 1.0f);
  Tensor count = L.fwd(ones_x, ones_w);
  Tensor s(count.shape());
  for (std::size_t j = 0; j < s.size(); ++j) s[j] = count[j] > 0.0f ? R[j] / count[j] : 0.0f;
  return L.bwd(s, ones_w);
}

}  // namespace detail

// Redistributes the relevance of node i's output onto each of its inputs.
inline std::vector<Tensor> decompose_layer(const Graph& g, int i, const ActivationCache& cache, const Tensor& R,
                                           const Rule& rule) {
  const auto& n = g.node(i);
  if (!(R.shape() == cache.value(i).shape()))
    throw ShapeError("relevance for node '" + n.id + "' has shape " + R.shape().str() + ", expected " +
                     cache.value(i).shape().str());
  if (!rule_fits(rule.kind, n.op))
    throw ValidationError("rule '" + std::string(rule_name(rule.kind)) + "' cannot be applied to " +
                          std::string(op_name(n.op)) + " node '" + n.id + "'");
  const auto& ins = g.inputs_of(i);
  const Tensor& x = cache.value(ins[0]);
  std::vector<Tensor> out;

  switch (n.op) {
    case OpKind::Conv2d:
    case OpKind::Dense: {
      detail::LinearView L{g, i, x.shape()};
      switch (rule.kind) {
        case RuleKind::Epsilon: out.push_back(detail::linear_epsilon(L, x, R, rule)); break;
        case RuleKind::ZPlus: out.push_back(detail::linear_zplus(L, x, R, rule)); break;
        case RuleKind::Gamma: out.push_back(detail::linear_gamma(L, x, R, rule)); break;
        default: out.push_back(detail::linear_flat(L, x, R)); break;
      }
      break;
    }
    case OpKind::BatchNorm2d: {
      const auto a = ops::batchnorm_affine(g.weight(i, "gamma"), g.weight(i, "beta"), g.weight(i, "mean"),
                                           g.weight(i, "var"), n.hp.eps);
      Tensor r(x.shape());
      const std::size_t sp = x.shape().spatial();
      for (std::size_t p = 0; p < x.size(); ++p) {
        const std::size_t c = p / sp;
        const float zij = x[p] * a.scale[c];
        const float zj = zij + (rule.bias == BiasPolicy::Absorb ? a.shift[c] : 0.0f);
        r[p] = zij / (zj + rule.param * detail::sign_nonneg(zj)) * R[p];
      }
      out.push_back(std::move(r));
      break;
    }
    case OpKind::Relu:
      out.push_back(R);
      break;
    case OpKind::MaxPool2d:
      out.push_back(ops::maxpool_route(x, R, n.hp.kernel, n.hp.stride));
      break;
    case OpKind::AvgPool2d:
      out.push_back(ops::avgpool_spread(x.shape(), R, n.hp.kernel, n.hp.stride,
                                        1.0f / static_cast<float>(n.hp.kernel * n.hp.kernel)));
      break;
    case OpKind::GlobalAvgPool:
      out.push_back(ops::global_spread(x.shape(), R, 1.0f / static_cast<float>(x.shape().spatial())));
      break;
    case OpKind::UpsampleNearest:
      out.push_back(ops::upsample_collect(x.shape(), R, n.hp.factor));
      break;
    case OpKind::Add: {
      const std::size_t nb = ins.size();
      for (std::size_t b = 0; b < nb; ++b) out.emplace_back(x.shape());
      for (std::size_t p = 0; p < R.size(); ++p) {
        float total = 0.0f;
        for (int k : ins) total += cache.value(k)[p];
        if (total != 0.0f) {
          const float s = R[p] / total;
          for (std::size_t b = 0; b < nb; ++b) out[b][p] = cache.value(ins[b])[p] * s;
        } else {
          for (std::size_t b = 0; b < nb; ++b) out[b][p] = R[p] / static_cast<float>(nb);
        }
      }
      break;
    }
    case OpKind::Concat: {
      std::vector<Shape> parts;
      for (int k : ins) parts.push_back(cache.value(k).shape());
      out = ops::concat_split(R, parts);
      break;
    }
    case OpKind::Flatten:
      out.push_back(ops::unflatten(x.shape(), R, n.hp.cells));
      break;
  }
  for (const auto& t : out)
    if (!t.all_finite()) throw NumericalError(n.id, "non-finite relevance under rule " + std::string(rule_name(rule.kind)));
  return out;
}

namespace detail {

struct ResolvedCondition {
  int node;
  std::vector<char> keep;
};

inline std::vector<ResolvedCondition> resolve_conditions(const Graph& g, const ActivationCache& cache,
                                                         const ConditionSet& theta) {
  std::vector<ResolvedCondition> out;
  std::set<int> seen;
  for (const auto& c : theta.conditions) {
    if (!g.contains(c.layer)) throw ValidationError("condition references unknown layer '" + c.layer + "'");
    const int idx = g.index_of(c.layer);
    if (!seen.insert(idx).second) throw ValidationError("more than one condition for layer '" + c.layer + "'");
    const int channels = cache.value(idx).shape().channels();
    ResolvedCondition rc{idx, std::vector<char>(static_cast<std::size_t>(channels), 0)};
    for (int ch : c.channels) {
      if (ch < 0 || ch >= channels)
        throw ValidationError("channel " + std::to_string(ch) + " out of range for layer '" + c.layer + "' with " +
                              std::to_string(channels) + " channels");
      rc.keep[static_cast<std::size_t>(ch)] = 1;
    }
    out.push_back(std::move(rc));
  }
  return out;
}

inline void mask_channels(Tensor& t, const std::vector<char>& keep) {
  for (int c = 0; c < t.shape().channels(); ++c)
    if (!keep[static_cast<std::size_t>(c)]) std::fill(t.channel(c).begin(), t.channel(c).end(), 0.0f);
}

inline Tensor heatmap_of(const Tensor& input_relevance) {
  const Shape& s = input_relevance.shape();
  if (s.rank() != 3) return input_relevance;
  Tensor h(Shape{s[1], s[2]});
  for (int c = 0; c < s[0]; ++c) {
    auto ch = input_relevance.channel(c);
    for (std::size_t p = 0; p < ch.size(); ++p) h[p] += ch[p];
  }
  return h;
}

// Backward sweep starting at node `start` whose output relevance is R[start].
// A conditioned node masks its relevance and drops all relevance that
// reached lower nodes without passing through it.
inline void propagate(const Graph& g, const ActivationCache& cache, std::vector<Tensor>& R, Tensor& R_input,
                      int start, const RuleAssignment& rules, const std::vector<ResolvedCondition>& conds,
                      int stop_after = -1) {
  for (int i = start; i >= 0; --i) {
    auto& slot = R[static_cast<std::size_t>(i)];
    if (slot.empty()) slot = Tensor(cache.value(i).shape());
    for (const auto& c : conds) {
      if (c.node != i) continue;
      mask_channels(slot, c.keep);
      for (int k = 0; k < i; ++k) R[static_cast<std::size_t>(k)] = Tensor();
      R_input = Tensor();
    }
    if (i == stop_after) return;
    const Rule rule = rules.resolve(g, i);
    if (slot.max_abs() == 0.0f) continue;
    auto parts = decompose_layer(g, i, cache, slot, rule);
    const auto& ins = g.inputs_of(i);
    for (std::size_t b = 0; b < ins.size(); ++b) {
      Tensor& dst = ins[b] < 0 ? R_input : R[static_cast<std::size_t>(ins[b])];
      if (dst.empty())
        dst = std::move(parts[b]);
      else
        dst += parts[b];
    }
  }
  if (R_input.empty()) R_input = Tensor(cache.input.shape());
}

}  // namespace detail

// Modified backward pass from the head initialization `init`, optionally
// conditioned on channel subsets of selected layers.
inline AttributionResult attribute(const Graph& g, const ActivationCache& cache, const Tensor& init,
                                   const RuleAssignment& rules, const ConditionSet& theta = {}) {
  if (!(init.shape() == cache.output().shape()))
    throw ShapeError("relevance initialization shape " + init.shape().str() + " does not match head output " +
                     cache.output().shape().str());
  const auto conds = detail::resolve_conditions(g, cache, theta);
  AttributionResult res;
  res.relevance.resize(g.size());
  res.relevance.back() = init;
  detail::propagate(g, cache, res.relevance, res.input_relevance, g.output_index(), rules, conds);
  res.input_heatmap = detail::heatmap_of(res.input_relevance);
  return res;
}

// Starts the backward pass at an intermediate node with the given relevance.
inline AttributionResult attribute_from(const Graph& g, const ActivationCache& cache, int node, const Tensor& R_node,
                                        const RuleAssignment& rules) {
  if (!(R_node.shape() == cache.value(node).shape()))
    throw ShapeError("relevance for node '" + g.node(node).id + "' has shape " + R_node.shape().str());
  AttributionResult res;
  res.relevance.resize(g.size());
  for (int i = node + 1; i < static_cast<int>(g.size()); ++i)
    res.relevance[static_cast<std::size_t>(i)] = Tensor(cache.value(i).shape());
  res.relevance[static_cast<std::size_t>(node)] = R_node;
  detail::propagate(g, cache, res.relevance, res.input_relevance, node, rules, {});
  res.input_heatmap = detail::heatmap_of(res.input_relevance);
  return res;
}

// Relevance arriving at `layer` (before any masking) from an unconditioned pass.
inline Tensor relevance_at(const Graph& g, const ActivationCache& cache, const Tensor& init,
                           const RuleAssignment& rules, int layer) {
  if (!(init.shape() == cache.output().shape()))
    throw ShapeError("relevance initialization shape " + init.shape().str() + " does not match head output");
  std::vector<Tensor> R(g.size());
  Tensor R_in;
  R.back() = init;
  detail::propagate(g, cache, R, R_in, g.output_index(), rules, {}, layer);
  return R[static_cast<std::size_t>(layer)];
}

// One conditional input heatmap per listed channel of `layer`; shares the
// backward pass above the layer.
inline std::vector<Tensor> conditional_heatmaps(const Graph& g, const ActivationCache& cache, const Tensor& init,
                                                const RuleAssignment& rules, const std::string& layer,
                                                const std::vector<int>& channels) {
  const int idx = g.index_of(layer);
  const Tensor above = relevance_at(g, cache, init, rules, idx);
  std::vector<Tensor> out;
  out.reserve(channels.size());
  for (int ch : channels) {
    if (ch < 0 || ch >= above.shape().channels())
      throw ValidationError("channel " + std::to_string(ch) + " out of range for layer '" + layer + "'");
    Tensor masked(above.shape());
    auto src = above.channel(ch);
    std::copy(src.begin(), src.end(), masked.channel(ch).begin());
    out.push_back(attribute_from(g, cache, idx, masked, rules).input_heatmap);
  }
  return out;
}

// Spatial sum of a layer's relevance, per channel.
inline std::vector<double> channel_relevance(const Graph& g, const AttributionResult& r, const std::string& layer) {
  if (!g.contains(layer)) throw ValidationError("unknown layer '" + layer + "'");
  return channel_sums(r.at(g, layer));
}

}  // namespace lcrp
