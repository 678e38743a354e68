#pragma once

// Concept scores, faithfulness curves (concept flipping / insertion) and
// complexity measures of concept attributions.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lcrp/errors.hpp"
#include "lcrp/forward.hpp"
#include "lcrp/gradient.hpp"
#include "lcrp/graph.hpp"
#include "lcrp/heads.hpp"
#include "lcrp/random.hpp"
#include "lcrp/relprop.hpp"

namespace lcrp {

enum class ScoreMethod { LrpZplus, LrpGamma, LrpEpsilon, Gradient, MaxAct, MeanAct, SumAct };

inline constexpr ScoreMethod kAllScoreMethods[] = {ScoreMethod::LrpZplus, ScoreMethod::LrpGamma,
                                                   ScoreMethod::LrpEpsilon, ScoreMethod::Gradient,
                                                   ScoreMethod::MaxAct,   ScoreMethod::MeanAct,
                                                   ScoreMethod::SumAct};

inline std::string_view method_name(ScoreMethod m) {
  switch (m) {
    case ScoreMethod::LrpZplus: return "lrp-zplus";
    case ScoreMethod::LrpGamma: return "lrp-gamma";
    case ScoreMethod::LrpEpsilon: return "lrp-epsilon";
    case ScoreMethod::Gradient: return "gradient";
    case ScoreMethod::MaxAct: return "max-act";
    case ScoreMethod::MeanAct: return "mean-act";
    case ScoreMethod::SumAct: return "sum-act";
  }
  return "?";
}

inline ScoreMethod method_from_name(std::string_view s) {
  for (auto m : kAllScoreMethods)
    if (method_name(m) == s) return m;
  throw ValidationError("unknown concept score method '" + std::string(s) + "'");
}

struct ScoreOptions {
  bool plain_gradient = false;  // gradient method: spatial sum of the gradient alone
  BiasPolicy bias = BiasPolicy::Absorb;
};

namespace detail {

inline int concept_layer(const Graph& g, const ActivationCache& cache, const std::string& layer) {
  if (!g.contains(layer)) throw ValidationError("unknown layer '" + layer + "'");
  const int idx = g.index_of(layer);
  if (idx == g.output_index()) throw ValidationError("layer '" + layer + "' is the head output");
  if (cache.value(idx).shape().rank() != 3)
    throw ValidationError("layer '" + layer + "' has no channels");
  return idx;
}

inline const char* lrp_preset(ScoreMethod m) {
  switch (m) {
    case ScoreMethod::LrpZplus: return "zplus";
    case ScoreMethod::LrpGamma: return "gamma";
    default: return "epsilon";
  }
}

}  // namespace detail

// One scalar per channel of `layer` for the given target.
inline std::vector<double> concept_scores(ScoreMethod method, const Graph& g, const ActivationCache& cache,
                                          const TargetSpec& target, const std::string& layer,
                                          const ScoreOptions& opt = {}) {
  const int idx = detail::concept_layer(g, cache, layer);
  const Tensor& act = cache.value(idx);
  const int C = act.shape().channels();
  std::vector<double> s(static_cast<std::size_t>(C), 0.0);
  switch (method) {
    case ScoreMethod::LrpZplus:
    case ScoreMethod::LrpGamma:
    case ScoreMethod::LrpEpsilon: {
      const Tensor init = target_init(g.head(), cache.output(), target);
      const auto rules = RuleAssignment::preset(detail::lrp_preset(method), opt.bias);
      return channel_sums(relevance_at(g, cache, init, rules, idx));
    }
    case ScoreMethod::Gradient: {
      const auto q = TargetQuantity::make(g.head(), cache.output(), target);
      const auto grads = gradient(g, cache, q.seed(cache.output().shape()));
      const Tensor& gr = grads.value(idx);
      for (int c = 0; c < C; ++c) {
        const auto a = act.channel(c), d = gr.channel(c);
        double acc = 0.0;
        for (std::size_t p = 0; p < a.size(); ++p) acc += opt.plain_gradient ? d[p] : static_cast<double>(a[p]) * d[p];
        s[static_cast<std::size_t>(c)] = acc;
      }
      return s;
    }
    case ScoreMethod::MaxAct:
    case ScoreMethod::MeanAct:
    case ScoreMethod::SumAct:
      for (int c = 0; c < C; ++c) {
        const auto a = act.channel(c);
        double acc = method == ScoreMethod::MaxAct ? a[0] : 0.0;
        for (float v : a) acc = method == ScoreMethod::MaxAct ? std::max(acc, static_cast<double>(v)) : acc + v;
        if (method == ScoreMethod::MeanAct) acc /= static_cast<double>(a.size());
        s[static_cast<std::size_t>(c)] = acc;
      }
      return s;
  }
  return s;
}

enum class CurveMode { Flip, Insert };

inline std::string_view mode_name(CurveMode m) { return m == CurveMode::Flip ? "flip" : "insert"; }
inline CurveMode mode_from_name(std::string_view s) {
  if (s == "flip") return CurveMode::Flip;
  if (s == "insert") return CurveMode::Insert;
  throw ValidationError("unknown curve mode '" + std::string(s) + "'");
}

struct FaithfulnessCurve {
  CurveMode mode = CurveMode::Flip;
  std::string layer;
  std::vector<double> fractions;  // 0 .. 1
  std::vector<double> values;     // target quantity per step
  double f0 = 0.0;                // unmodified model output
};

// Number of channels changed after each step: 1..C for narrow layers, doubling for wide ones.
inline std::vector<int> flip_schedule(int channels) {
  std::vector<int> steps;
  if (channels <= 64) {
    for (int k = 1; k <= channels; ++k) steps.push_back(k);
    return steps;
  }
  for (int k = 1; k < channels; k *= 2) steps.push_back(k);
  steps.push_back(channels);
  return steps;
}

// Channel order by descending score; equal scores keep the lower channel first.
inline std::vector<int> rank_channels(const std::vector<double>& scores) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  return order;
}

inline FaithfulnessCurve faithfulness_curve(const Graph& g, const ActivationCache& cache, const TargetSpec& target,
                                            const std::string& layer, const std::vector<double>& scores,
                                            CurveMode mode) {
  const int idx = detail::concept_layer(g, cache, layer);
  const Tensor& act = cache.value(idx);
  const int C = act.shape().channels();
  if (static_cast<int>(scores.size()) != C)
    throw ValidationError("got " + std::to_string(scores.size()) + " scores for " + std::to_string(C) +
                          " channels of layer '" + layer + "'");
  const auto q = TargetQuantity::make(g.head(), cache.output(), target);
  const auto order = rank_channels(scores);

  FaithfulnessCurve curve;
  curve.mode = mode;
  curve.layer = layer;
  curve.f0 = q.evaluate(cache.output());
  Tensor edited = act;
  if (mode == CurveMode::Insert) std::fill(edited.values().begin(), edited.values().end(), 0.0f);
  curve.fractions.push_back(0.0);
  curve.values.push_back(mode == CurveMode::Flip ? curve.f0 : q.evaluate(output_after_edit(g, cache, idx, edited)));
  int done = 0;
  for (int k : flip_schedule(C)) {
    for (; done < k; ++done) {
      const int ch = order[static_cast<std::size_t>(done)];
      auto dst = edited.channel(ch);
      if (mode == CurveMode::Flip)
        std::fill(dst.begin(), dst.end(), 0.0f);
      else
        std::copy(act.channel(ch).begin(), act.channel(ch).end(), dst.begin());
    }
    curve.fractions.push_back(static_cast<double>(k) / C);
    curve.values.push_back(q.evaluate(output_after_edit(g, cache, idx, edited)));
  }
  return curve;
}

// Area between the normalized curve and its start (flip) or under it
// (insert); nullopt when f0 is zero.
inline std::optional<double> curve_area(const FaithfulnessCurve& c) {
  if (c.f0 == 0.0) return std::nullopt;
  const double n = std::fabs(c.f0);
  double area = 0.0;
  for (std::size_t i = 1; i < c.fractions.size(); ++i) {
    const double dx = c.fractions[i] - c.fractions[i - 1];
    const double a = c.values[i - 1] / n, b = c.values[i] / n;
    area += dx * 0.5 * (a + b);
  }
  return c.mode == CurveMode::Flip ? c.f0 / n - area : area;
}

struct FaithfulnessScore {
  double score = 0.0;
  std::map<std::string, double> per_layer;
  std::size_t used = 0;
  std::size_t skipped = 0;  // curves with f0 == 0
};

// Mean over samples within each layer, then over layers.
inline FaithfulnessScore faithfulness_score(const std::vector<FaithfulnessCurve>& curves) {
  if (curves.empty()) throw ValidationError("faithfulness score needs at least one curve");
  std::map<std::string, std::pair<double, std::size_t>> acc;
  FaithfulnessScore out;
  for (const auto& c : curves) {
    const auto a = curve_area(c);
    if (!a) {
      ++out.skipped;
      continue;
    }
    auto& slot = acc[c.layer];
    slot.first += *a;
    slot.second += 1;
    ++out.used;
  }
  for (const auto& [layer, v] : acc) {
    out.per_layer[layer] = v.first / static_cast<double>(v.second);
    out.score += out.per_layer[layer];
  }
  if (!acc.empty()) out.score /= static_cast<double>(acc.size());
  return out;
}

// Scores that order the channels by a uniformly random permutation.
inline std::vector<double> random_scores(int channels, Rng& rng) {
  std::vector<double> s(static_cast<std::size_t>(channels));
  std::iota(s.begin(), s.end(), 0.0);
  rng.shuffle(s);
  return s;
}

// Fraction of channels needed for 80% of the absolute attribution mass.
inline double complexity_concepts80(const std::vector<double>& attribution) {
  if (attribution.empty()) throw ValidationError("empty attribution vector");
  std::vector<double> a(attribution.size());
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) total += a[i] = std::fabs(attribution[i]);
  if (total == 0.0) throw ValidationError("attribution vector is zero");
  std::sort(a.begin(), a.end(), std::greater<>());
  double cum = 0.0;
  for (std::size_t n = 0; n < a.size(); ++n) {
    cum += a[n] / total;
    // tolerance so that e.g. 0.5+0.3 counts as reaching 0.8
    if (cum >= 0.8 - 1e-12) return static_cast<double>(n + 1) / static_cast<double>(a.size());
  }
  return 1.0;
}

struct ComplexityStd {
  double sigma = 0.0;
  std::vector<double> per_class;       // aligned with the input classes; NaN when excluded
  std::vector<std::size_t> excluded;   // classes with fewer than two samples
};

// Attribution variation: per class, per-channel sample standard deviation of
// the unit-absolute-sum normalized vectors, averaged over channels; then over classes.
inline ComplexityStd complexity_std(const std::vector<std::vector<std::vector<double>>>& per_class) {
  ComplexityStd out;
  std::size_t counted = 0;
  for (std::size_t k = 0; k < per_class.size(); ++k) {
    const auto& samples = per_class[k];
    if (samples.size() < 2) {
      out.excluded.push_back(k);
      out.per_class.push_back(std::nan(""));
      continue;
    }
    const std::size_t C = samples[0].size();
    std::vector<std::vector<double>> norm;
    for (const auto& v : samples) {
      if (v.size() != C) throw ValidationError("attribution vectors of one class differ in length");
      double t = 0.0;
      for (double x : v) t += std::fabs(x);
      std::vector<double> u(v);
      if (t > 0.0)
        for (double& x : u) x /= t;
      norm.push_back(std::move(u));
    }
    const double n = static_cast<double>(norm.size());
    double sigma_t = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      // shifted by the first sample so identical columns give exactly 0
      const double k = norm[0][c];
      double s1 = 0.0, s2 = 0.0;
      for (const auto& u : norm) {
        const double d = u[c] - k;
        s1 += d;
        s2 += d * d;
      }
      sigma_t += std::sqrt(std::max(0.0, (s2 - s1 * s1 / n) / (n - 1.0)));
    }
    sigma_t = C ? sigma_t / static_cast<double>(C) : 0.0;
    out.per_class.push_back(sigma_t);
    out.sigma += sigma_t;
    ++counted;
  }
  if (counted == 0) throw ValidationError("complexity needs at least one class with two or more samples");
  out.sigma /= static_cast<double>(counted);
  return out;
}

struct LayerComplexity {
  std::string layer;
  double sigma = 0.0;
  double concepts80 = 0.0;  // mean over samples
  std::vector<double> sigma_per_class;
  std::vector<double> concepts80_per_class;
  std::vector<std::size_t> excluded_classes;
};

// attributions[class][sample] = channel scores for one layer.
inline LayerComplexity complexity_report(const std::string& layer,
                                         const std::vector<std::vector<std::vector<double>>>& attributions) {
  LayerComplexity r;
  r.layer = layer;
  const auto s = complexity_std(attributions);
  r.sigma = s.sigma;
  r.sigma_per_class = s.per_class;
  r.excluded_classes = s.excluded;
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& cls : attributions) {
    double c_total = 0.0;
    std::size_t c_n = 0;
    for (const auto& v : cls) {
      if (std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; })) continue;
      c_total += complexity_concepts80(v);
      ++c_n;
    }
    r.concepts80_per_class.push_back(c_n ? c_total / static_cast<double>(c_n) : std::nan(""));
    total += c_total;
    n += c_n;
  }
  r.concepts80 = n ? total / static_cast<double>(n) : std::nan("");
  return r;
}

}  // namespace lcrp
