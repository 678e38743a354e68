#pragma once

// Context-bias analysis: how much of a concept's positive attribution lies on
// the background, how strongly its relevance reacts to background
// perturbations, and forward interaction by switching concepts off.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lcrp/errors.hpp"
#include "lcrp/forward.hpp"
#include "lcrp/graph.hpp"
#include "lcrp/heads.hpp"
#include "lcrp/parallel.hpp"
#include "lcrp/random.hpp"
#include "lcrp/relprop.hpp"

namespace lcrp {

enum class ContextSource { Lcrp, LatentRelevance, LatentActivation };

inline constexpr ContextSource kAllContextSources[] = {ContextSource::Lcrp, ContextSource::LatentRelevance,
                                                       ContextSource::LatentActivation};

inline std::string_view source_name(ContextSource s) {
  switch (s) {
    case ContextSource::Lcrp: return "lcrp";
    case ContextSource::LatentRelevance: return "latent-relevance";
    case ContextSource::LatentActivation: return "latent-activation";
  }
  return "?";
}

inline ContextSource source_from_name(std::string_view s) {
  if (s == "lcrp") return ContextSource::Lcrp;
  if (s == "latent-relevance" || s == "latent-rel") return ContextSource::LatentRelevance;
  if (s == "latent-activation" || s == "latent-act") return ContextSource::LatentActivation;
  throw ValidationError("unknown context source '" + std::string(s) + "'");
}

struct ContextScore {
  double value = 0.0;  // C in [0,1]
  std::size_t used = 0;
  std::size_t excluded = 0;  // samples without positive attribution
};

// Fraction of one map's positive attribution on background pixels; nullopt
// when the map has no positive entry.
inline std::optional<double> background_fraction(const Tensor& a, const Tensor& background) {
  if (!(a.shape() == background.shape()))
    throw ShapeError("attribution map " + a.shape().str() + " and background mask " + background.shape().str() +
                     " differ in shape");
  double pos = 0.0, bg = 0.0;
  for (std::size_t p = 0; p < a.size(); ++p) {
    if (a[p] <= 0.0f) continue;
    pos += a[p];
    if (background[p] != 0.0f) bg += a[p];
  }
  if (pos <= 0.0) return std::nullopt;
  return std::clamp(bg / pos, 0.0, 1.0);
}

inline ContextScore context_score(const std::vector<Tensor>& maps, const std::vector<Tensor>& backgrounds) {
  if (maps.size() != backgrounds.size()) throw ValidationError("need one background mask per attribution map");
  ContextScore c;
  for (std::size_t j = 0; j < maps.size(); ++j) {
    const auto f = background_fraction(maps[j], backgrounds[j]);
    if (!f) {
      ++c.excluded;
      continue;
    }
    c.value += *f;
    ++c.used;
  }
  if (c.used) c.value /= static_cast<double>(c.used);
  return c;
}

// Nearest-neighbour resize of an (H,W) mask to (h,w).
inline Tensor resize_mask_nearest(const Tensor& m, int h, int w) {
  const int H = m.shape()[0], W = m.shape()[1];
  Tensor out(Shape{h, w});
  for (int y = 0; y < h; ++y) {
    const int sy = std::min(H - 1, static_cast<int>((y + 0.5) * H / h));
    for (int x = 0; x < w; ++x) {
      const int sx = std::min(W - 1, static_cast<int>((x + 0.5) * W / w));
      out[static_cast<std::size_t>(y) * w + x] = m[static_cast<std::size_t>(sy) * W + sx];
    }
  }
  return out;
}

// One channel of a (C,h,w) tensor as an (h,w) map.
inline Tensor channel_map(const Tensor& t, int ch) {
  const auto v = t.channel(ch);
  return Tensor(Shape{t.shape()[1], t.shape()[2]}, std::vector<float>(v.begin(), v.end()));
}

enum class PerturbKind { GrayNoise, RgbNoise, GrayConstant, RandomColor };

inline std::string_view perturb_name(PerturbKind k) {
  switch (k) {
    case PerturbKind::GrayNoise: return "gray-noise";
    case PerturbKind::RgbNoise: return "rgb-noise";
    case PerturbKind::GrayConstant: return "gray-constant";
    case PerturbKind::RandomColor: return "random-color";
  }
  return "?";
}

struct Perturbation {
  PerturbKind kind = PerturbKind::GrayConstant;
  double alpha = 1.0;
};

// The eight variants: four kinds at full and half blending.
inline std::vector<Perturbation> perturbation_suite() {
  std::vector<Perturbation> v;
  for (auto k : {PerturbKind::GrayNoise, PerturbKind::RgbNoise, PerturbKind::GrayConstant, PerturbKind::RandomColor})
    for (double a : {1.0, 0.5}) v.push_back({k, a});
  return v;
}

// Blends the background pixels (mask != 0) towards the perturbation.
inline Tensor perturb_background(const Tensor& image, const Tensor& background, PerturbKind kind, double alpha,
                                 std::uint64_t seed) {
  const Shape& s = image.shape();
  if (s.rank() != 3 || background.shape().rank() != 2 || background.shape()[0] != s[1] ||
      background.shape()[1] != s[2])
    throw ShapeError("background mask " + background.shape().str() + " does not fit image " + s.str());
  Rng rng(seed);
  const int C = s[0];
  const std::size_t P = s.spatial();
  std::vector<float> color(static_cast<std::size_t>(C));
  for (auto& c : color) c = static_cast<float>(rng.uniform());
  Tensor out = image;
  const float a = static_cast<float>(alpha);
  for (std::size_t p = 0; p < P; ++p) {
    // draw noise for every pixel so the stream does not depend on the mask
    const float gray = static_cast<float>(rng.uniform());
    for (int c = 0; c < C; ++c) {
      float v = 0.5f;
      switch (kind) {
        case PerturbKind::GrayNoise: v = gray; break;
        case PerturbKind::RgbNoise: v = static_cast<float>(rng.uniform()); break;
        case PerturbKind::GrayConstant: v = 0.5f; break;
        case PerturbKind::RandomColor: v = color[static_cast<std::size_t>(c)]; break;
      }
      if (background[p] == 0.0f) continue;
      float& o = out[static_cast<std::size_t>(c) * P + p];
      o = (1.0f - a) * o + a * v;
    }
  }
  return out;
}

// Relative change of one relevance value, capped at 1 (a sign flip counts as
// a full change); 0 when both are zero.
inline double relevance_distance(double r, double r_tilde) {
  const double m = std::max(std::fabs(r), std::fabs(r_tilde));
  return m == 0.0 ? 0.0 : std::min(1.0, std::fabs(r - r_tilde) / m);
}

// A target in one image plus its background mask (1 = background).
struct ContextSample {
  Tensor image;
  Tensor background;
  TargetSpec target;
};

namespace detail {

// Relevance initialization for a target that must still be present in
// `output` (same cell for detection, same winning pixels for segmentation).
inline std::optional<Tensor> reidentified_init(const HeadSpec& head, const Tensor& output, const TargetSpec& t) {
  if (const auto* d = std::get_if<DetTarget>(&t)) {
    check_det_target(head, *d);
    const float logit = output[static_cast<std::size_t>(d->box) * head.cell_channels() + static_cast<std::size_t>(d->cls)];
    if (!(logit > 0.0f)) return std::nullopt;
    return det_target_init(head, output, *d);
  }
  try {
    return seg_target_init(head, output, std::get<SegTarget>(t));
  } catch (const TargetError&) {
    return std::nullopt;
  }
}

// Segmentation targets are pinned to the pixels that won originally.
inline TargetSpec pin_target(const HeadSpec& head, const Tensor& output, const TargetSpec& t) {
  const auto* s = std::get_if<SegTarget>(&t);
  if (!s) return t;
  const auto win = winning_pixels(output, s->cls, s->roi ? &*s->roi : nullptr);
  if (win.empty()) throw TargetError("class " + std::to_string(s->cls) + " not predicted");
  Tensor roi(Shape{output.shape()[1], output.shape()[2]});
  for (std::size_t p : win) roi[p] = 1.0f;
  return SegTarget{s->cls, roi, s->weighting};
}

}  // namespace detail

// Per (sample, perturbation) channel relevances of one layer with and without
// the perturbed background. Missing entries mark vanished targets.
struct SensitivityTable {
  std::vector<std::vector<double>> clean;                               // [sample][channel]
  std::vector<std::vector<std::optional<std::vector<double>>>> perturbed;  // [sample][variant][channel]
};

inline SensitivityTable sensitivity_table(const Graph& g, const std::vector<ContextSample>& samples,
                                          const std::string& layer, const RuleAssignment& rules, std::uint64_t seed,
                                          int threads = 1) {
  const int idx = g.index_of(layer);
  const auto suite = perturbation_suite();
  struct Row {
    std::vector<double> clean;
    std::vector<std::optional<std::vector<double>>> perturbed;
  };
  auto rows = parallel_map(samples.size(), threads, [&](std::size_t j) {
    const auto& s = samples[j];
    const auto cache = forward(g, s.image);
    const auto init = detail::reidentified_init(g.head(), cache.output(), s.target);
    if (!init) throw TargetError("target of sample " + std::to_string(j) + " is not predicted");
    const TargetSpec pinned = detail::pin_target(g.head(), cache.output(), s.target);
    Row row;
    row.clean = channel_sums(relevance_at(g, cache, *init, rules, idx));
    for (std::size_t v = 0; v < suite.size(); ++v) {
      const Tensor x = perturb_background(s.image, s.background, suite[v].kind, suite[v].alpha,
                                          Rng::stream(seed, j * suite.size() + v).bits());
      const auto c2 = forward(g, x);
      const auto init2 = detail::reidentified_init(g.head(), c2.output(), pinned);
      if (!init2) {
        row.perturbed.emplace_back(std::nullopt);
        continue;
      }
      row.perturbed.emplace_back(channel_sums(relevance_at(g, c2, *init2, rules, idx)));
    }
    return row;
  });
  SensitivityTable t;
  for (auto& r : rows) {
    t.clean.push_back(std::move(r.clean));
    t.perturbed.push_back(std::move(r.perturbed));
  }
  return t;
}

struct Sensitivity {
  double value = 0.0;  // S in [0,1]
  std::size_t pairs = 0;
  std::size_t skipped = 0;  // target vanished under perturbation
};

// Mean relative relevance change over all samples and perturbation variants.
inline Sensitivity background_sensitivity(const SensitivityTable& t, int channel) {
  Sensitivity s;
  for (std::size_t j = 0; j < t.clean.size(); ++j) {
    const double r = t.clean[j].at(static_cast<std::size_t>(channel));
    for (const auto& p : t.perturbed[j]) {
      if (!p) {
        ++s.skipped;
        continue;
      }
      s.value += relevance_distance(r, p->at(static_cast<std::size_t>(channel)));
      ++s.pairs;
    }
  }
  if (s.pairs) s.value /= static_cast<double>(s.pairs);
  return s;
}

inline Sensitivity background_sensitivity(const Graph& g, const std::vector<ContextSample>& samples,
                                          const std::string& layer, int channel, std::uint64_t seed,
                                          const RuleAssignment& rules = RuleAssignment::preset("zplus")) {
  return background_sensitivity(sensitivity_table(g, samples, layer, rules, seed), channel);
}

struct ContextAgreement {
  std::optional<double> rho;  // undefined for constant vectors
  double rmsd = 0.0;
};

inline ContextAgreement evaluate_context(const std::vector<double>& c, const std::vector<double>& s) {
  if (c.size() != s.size()) throw ValidationError("context and sensitivity vectors differ in length");
  if (c.size() < 2) throw ValidationError("context evaluation needs at least two concepts");
  const double n = static_cast<double>(c.size());
  const double mc = std::accumulate(c.begin(), c.end(), 0.0) / n;
  const double ms = std::accumulate(s.begin(), s.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    sxy += (c[i] - mc) * (s[i] - ms);
    sxx += (c[i] - mc) * (c[i] - mc);
    syy += (s[i] - ms) * (s[i] - ms);
    sq += (c[i] - s[i]) * (c[i] - s[i]);
  }
  ContextAgreement r;
  if (sxx > 0.0 && syy > 0.0) r.rho = sxy / std::sqrt(sxx * syy);
  r.rmsd = std::sqrt(sq / n);
  return r;
}

struct FlipOutcome {
  double original = 0.0;
  double flipped = 0.0;
  double relative_delta = 0.0;  // (flipped - original) / |original|
};

// Forward pass with the listed channels zeroed; reports the target quantity
// before and after.
inline FlipOutcome flip_concepts_forward(const Graph& g, const Tensor& input, const std::vector<Condition>& flips,
                                         const TargetSpec& target) {
  const auto base = forward(g, input);
  if (const auto* d = std::get_if<DetTarget>(&target)) {
    check_det_target(g.head(), *d);
    const float logit =
        base.output()[static_cast<std::size_t>(d->box) * g.head().cell_channels() + static_cast<std::size_t>(d->cls)];
    if (!(logit > 0.0f)) throw TargetError("class " + std::to_string(d->cls) + " not predicted at box " +
                                           std::to_string(d->box));
  }
  const auto q = TargetQuantity::make(g.head(), base.output(), target);
  std::vector<ChannelScaling> edits;
  for (const auto& f : flips) {
    if (!g.contains(f.layer)) throw ValidationError("unknown layer '" + f.layer + "'");
    const int idx = g.index_of(f.layer);
    const Tensor& act = base.value(idx);
    if (act.shape().rank() != 3) throw ValidationError("layer '" + f.layer + "' has no channels");
    std::vector<float> scale(static_cast<std::size_t>(act.shape().channels()), 1.0f);
    for (int ch : f.channels) {
      if (ch < 0 || ch >= act.shape().channels())
        throw ValidationError("channel " + std::to_string(ch) + " out of range for layer '" + f.layer + "'");
      scale[static_cast<std::size_t>(ch)] = 0.0f;
    }
    edits.push_back({idx, std::move(scale)});
  }
  std::sort(edits.begin(), edits.end(), [](const ChannelScaling& a, const ChannelScaling& b) { return a.node < b.node; });
  FlipOutcome r;
  r.original = q.evaluate(base.output());
  r.flipped = q.evaluate(forward(g, input, edits).output());
  r.relative_delta = r.original == 0.0 ? 0.0 : (r.flipped - r.original) / std::fabs(r.original);
  return r;
}

struct ConceptSelection {
  std::vector<double> mean_relevance;          // per channel
  std::vector<int> concepts;                   // selected channels, most relevant first
  std::vector<std::vector<std::size_t>> samples;  // per selected concept: item indices, most relevant first
};

// relevances[item][channel] -> top concepts by mean relevance and their most relevant items.
inline ConceptSelection select_concepts(const std::vector<std::vector<double>>& relevances, int top_concepts,
                                        int top_samples) {
  if (relevances.empty()) throw TargetError("class not predicted");
  if (top_concepts < 1 || top_samples < 1) throw ValidationError("concept and sample counts must be positive");
  const std::size_t C = relevances[0].size();
  ConceptSelection sel;
  sel.mean_relevance.assign(C, 0.0);
  for (const auto& r : relevances) {
    if (r.size() != C) throw ValidationError("relevance vectors differ in length");
    for (std::size_t c = 0; c < C; ++c) sel.mean_relevance[c] += r[c];
  }
  for (double& m : sel.mean_relevance) m /= static_cast<double>(relevances.size());
  std::vector<int> order(C);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return sel.mean_relevance[static_cast<std::size_t>(a)] > sel.mean_relevance[static_cast<std::size_t>(b)];
  });
  order.resize(std::min<std::size_t>(C, static_cast<std::size_t>(top_concepts)));
  sel.concepts = order;
  for (int c : sel.concepts) {
    std::vector<std::size_t> items(relevances.size());
    std::iota(items.begin(), items.end(), std::size_t{0});
    std::stable_sort(items.begin(), items.end(), [&](std::size_t a, std::size_t b) {
      return relevances[a][static_cast<std::size_t>(c)] > relevances[b][static_cast<std::size_t>(c)];
    });
    items.resize(std::min<std::size_t>(items.size(), static_cast<std::size_t>(top_samples)));
    sel.samples.push_back(std::move(items));
  }
  return sel;
}

inline ConceptSelection select_concepts_for_context(const Graph& g, const std::vector<ContextSample>& items,
                                                    const std::string& layer, int top_concepts = 50,
                                                    int top_samples = 15, int threads = 1) {
  if (items.empty()) throw TargetError("class not predicted");
  const int idx = g.index_of(layer);
  const auto rules = RuleAssignment::preset("zplus");
  const auto rel = parallel_map(items.size(), threads, [&](std::size_t j) {
    const auto cache = forward(g, items[j].image);
    return channel_sums(relevance_at(g, cache, target_init(g.head(), cache.output(), items[j].target), rules, idx));
  });
  return select_concepts(rel, top_concepts, top_samples);
}

// The map a context score is computed on for one (sample, channel).
inline Tensor concept_map(const Graph& g, const ActivationCache& cache, const Tensor& init, const RuleAssignment& rules,
                          const std::string& layer, int channel, ContextSource source) {
  const int idx = g.index_of(layer);
  switch (source) {
    case ContextSource::Lcrp: return conditional_heatmaps(g, cache, init, rules, layer, {channel}).front();
    case ContextSource::LatentRelevance: return channel_map(relevance_at(g, cache, init, rules, idx), channel);
    case ContextSource::LatentActivation: return channel_map(cache.value(idx), channel);
  }
  return {};
}

struct ConceptContext {
  int channel = 0;
  int rank = 0;  // position in the class's relevance order, 0 = most relevant
  double mean_relevance = 0.0;
  double context[3] = {0, 0, 0};  // indexed by ContextSource
  std::size_t context_samples = 0;
  Sensitivity sensitivity;
};

struct ContextSuiteConfig {
  int top_concepts = 50;
  int top_samples = 15;
  int sensitivity_samples = 60;
  std::uint64_t seed = 0;
  int threads = 1;
  std::string preset = "zplus";
};

struct ContextSuite {
  std::string layer;
  std::vector<ConceptContext> concepts;
  std::size_t items = 0;
};

// Selection, context scores from all three sources and background
// sensitivity for one class's items.
inline ContextSuite run_context_suite(const Graph& g, const std::vector<ContextSample>& items, const std::string& layer,
                                      const ContextSuiteConfig& cfg) {
  if (items.empty()) throw TargetError("class not predicted");
  const auto rules = RuleAssignment::preset(cfg.preset);
  const int idx = g.index_of(layer);
  const auto sel = select_concepts_for_context(g, items, layer, cfg.top_concepts, cfg.top_samples, cfg.threads);

  // random subset for the perturbation experiment
  std::vector<std::size_t> pick(items.size());
  std::iota(pick.begin(), pick.end(), std::size_t{0});
  Rng rng(cfg.seed);
  rng.shuffle(pick);
  pick.resize(std::min<std::size_t>(pick.size(), static_cast<std::size_t>(cfg.sensitivity_samples)));
  std::sort(pick.begin(), pick.end());
  std::vector<ContextSample> sens_items;
  for (std::size_t j : pick) sens_items.push_back(items[j]);
  const auto table = sensitivity_table(g, sens_items, layer, RuleAssignment::preset("zplus"), cfg.seed, cfg.threads);

  // every item a selected concept needs, with the maps of all three sources
  std::vector<std::vector<int>> needed(items.size());
  for (std::size_t k = 0; k < sel.concepts.size(); ++k)
    for (std::size_t j : sel.samples[k]) needed[j].push_back(sel.concepts[k]);
  struct Maps {
    std::vector<int> channels;
    std::vector<std::optional<double>> fraction[3];
  };
  const auto maps = parallel_map(items.size(), cfg.threads, [&](std::size_t j) {
    Maps m;
    m.channels = needed[j];
    if (needed[j].empty()) return m;
    const auto& it = items[j];
    const auto cache = forward(g, it.image);
    const Tensor init = target_init(g.head(), cache.output(), it.target);
    const Tensor above = relevance_at(g, cache, init, rules, idx);
    const Tensor& act = cache.value(idx);
    const Tensor small_bg = resize_mask_nearest(it.background, act.shape()[1], act.shape()[2]);
    for (int ch : needed[j]) {
      Tensor masked(above.shape());
      std::copy(above.channel(ch).begin(), above.channel(ch).end(), masked.channel(ch).begin());
      const Tensor heat = attribute_from(g, cache, idx, masked, rules).input_heatmap;
      m.fraction[0].push_back(background_fraction(heat, it.background));
      m.fraction[1].push_back(background_fraction(channel_map(above, ch), small_bg));
      m.fraction[2].push_back(background_fraction(channel_map(act, ch), small_bg));
    }
    return m;
  });

  ContextSuite suite;
  suite.layer = layer;
  suite.items = items.size();
  for (std::size_t k = 0; k < sel.concepts.size(); ++k) {
    ConceptContext cc;
    cc.channel = sel.concepts[k];
    cc.rank = static_cast<int>(k);
    cc.mean_relevance = sel.mean_relevance[static_cast<std::size_t>(cc.channel)];
    for (int s = 0; s < 3; ++s) {
      double sum = 0.0;
      std::size_t n = 0;
      for (std::size_t j : sel.samples[k]) {
        const auto& m = maps[j];
        const auto pos = static_cast<std::size_t>(std::find(m.channels.begin(), m.channels.end(), cc.channel) -
                                                  m.channels.begin());
        if (const auto& f = m.fraction[s][pos]) {
          sum += *f;
          ++n;
        }
      }
      cc.context[s] = n ? sum / static_cast<double>(n) : 0.0;
      if (s == 0) cc.context_samples = n;
    }
    cc.sensitivity = background_sensitivity(table, cc.channel);
    suite.concepts.push_back(cc);
  }
  return suite;
}

}  // namespace lcrp
