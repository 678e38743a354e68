#pragma once

// Reference samples for a concept (ranked by relevance) and localization of
// the concept inside one sample.

#include <algorithm>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "lcrp/box.hpp"
#include "lcrp/errors.hpp"
#include "lcrp/forward.hpp"
#include "lcrp/graph.hpp"
#include "lcrp/heads.hpp"
#include "lcrp/parallel.hpp"
#include "lcrp/relprop.hpp"

namespace lcrp {

struct Localization {
  Tensor heatmap;  // (H,W) conditional input heatmap
  Tensor mask;     // (H,W) binary
  Box box;
  Tensor crop;  // (3,h,w) image inside the box, zero outside the mask
  bool degenerate = false;  // all-zero heatmap; box covers the full image
};

// Threshold |h| > tau * max|h|, tight box, masked crop.
inline Localization localize_heatmap(const Tensor& image, Tensor heatmap, double tau = 0.2) {
  const int H = heatmap.shape()[0], W = heatmap.shape()[1];
  if (image.shape().rank() != 3 || image.shape()[1] != H || image.shape()[2] != W)
    throw ShapeError("heatmap " + heatmap.shape().str() + " does not fit image " + image.shape().str());
  Localization loc;
  loc.mask = Tensor(Shape{H, W});
  const float peak = heatmap.max_abs();
  if (peak == 0.0f) {
    loc.degenerate = true;
    std::fill(loc.mask.values().begin(), loc.mask.values().end(), 1.0f);
  } else {
    const float thr = static_cast<float>(tau) * peak;
    for (std::size_t p = 0; p < heatmap.size(); ++p) loc.mask[p] = std::fabs(heatmap[p]) > thr ? 1.0f : 0.0f;
    // tau >= 1 would leave nothing; keep the peak
    if (loc.mask.max_abs() == 0.0f)
      for (std::size_t p = 0; p < heatmap.size(); ++p) loc.mask[p] = std::fabs(heatmap[p]) == peak ? 1.0f : 0.0f;
  }
  loc.box = tight_box(loc.mask);
  const int C = image.shape()[0];
  loc.crop = Tensor(Shape{C, loc.box.height(), loc.box.width()});
  for (int c = 0; c < C; ++c)
    for (int y = loc.box.y0; y <= loc.box.y1; ++y)
      for (int x = loc.box.x0; x <= loc.box.x1; ++x)
        if (loc.mask[static_cast<std::size_t>(y) * W + x] != 0.0f)
          loc.crop.at(c, y - loc.box.y0, x - loc.box.x0) = image.at(c, y, x);
  loc.heatmap = std::move(heatmap);
  return loc;
}

inline Localization localize_concept(const Graph& g, const ActivationCache& cache, const std::string& layer,
                                     int channel, const TargetSpec& target,
                                     const RuleAssignment& rules = RuleAssignment::preset("zplus-flat"),
                                     double tau = 0.2) {
  const Tensor init = target_init(g.head(), cache.output(), target);
  auto heat = conditional_heatmaps(g, cache, init, rules, layer, {channel}).front();
  return localize_heatmap(cache.input, std::move(heat), tau);
}

enum class TargetPolicy { Predicted, Fixed };

// The target a sample is explained for: the highest-scoring detection or the
// predicted non-background class covering most pixels; with a fixed class,
// that class (its best cell for detection). nullopt when nothing qualifies.
inline std::optional<TargetSpec> choose_target(const HeadSpec& head, const Tensor& output, TargetPolicy policy,
                                               int fixed_class = -1) {
  if (policy == TargetPolicy::Fixed && (fixed_class < 0 || fixed_class >= head.num_classes))
    throw ValidationError("fixed target class " + std::to_string(fixed_class) + " out of range");
  if (head.kind == HeadKind::Detection) {
    const auto dets = predict_detections(head, output, 0.0f, head.num_cells);
    for (const auto& d : dets)
      if (policy == TargetPolicy::Predicted || d.cls == fixed_class) return DetTarget{d.cell, d.cls};
    return std::nullopt;
  }
  std::vector<std::size_t> count(static_cast<std::size_t>(head.num_classes), 0);
  const std::size_t P = output.shape().spatial();
  for (std::size_t p = 0; p < P; ++p) ++count[static_cast<std::size_t>(argmax_class(output, p))];
  if (policy == TargetPolicy::Fixed)
    return count[static_cast<std::size_t>(fixed_class)] ? std::optional<TargetSpec>(SegTarget{fixed_class})
                                                        : std::nullopt;
  int best = -1;
  for (int c = 0; c < head.num_classes; ++c) {
    if (c == head.background_class || count[static_cast<std::size_t>(c)] == 0) continue;
    if (best < 0 || count[static_cast<std::size_t>(c)] > count[static_cast<std::size_t>(best)]) best = c;
  }
  if (best < 0) return std::nullopt;
  return SegTarget{best};
}

struct ReferenceEntry {
  std::size_t sample = 0;
  double score = 0.0;
  TargetSpec target;
  Box box;
  Tensor mask;
  Tensor crop;
  bool degenerate = false;
};

struct ReferenceSet {
  std::string layer;
  int channel = 0;
  std::vector<ReferenceEntry> entries;
  bool no_prediction = false;  // no sample had a usable target
  std::size_t skipped = 0;     // samples without a usable target
};

struct ReferenceOptions {
  int k = 8;
  TargetPolicy policy = TargetPolicy::Predicted;
  int fixed_class = -1;
  double tau = 0.2;
  bool localize = true;
  int threads = 1;
};

// Top-k samples by the signed relevance of (layer, channel) for each sample's target.
inline std::vector<std::size_t> top_k_by_score(const std::vector<double>& scores, int k) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(std::max(0, k))));
  return order;
}

inline ReferenceSet collect_reference_samples(const Graph& g, const std::vector<Tensor>& dataset,
                                              const std::string& layer, int channel, const ReferenceOptions& opt = {},
                                              const RuleAssignment& rules = RuleAssignment::preset("zplus-flat")) {
  if (dataset.empty()) throw ValidationError("reference search needs a nonempty dataset");
  if (!g.contains(layer)) throw ValidationError("unknown layer '" + layer + "'");
  const int idx = g.index_of(layer);
  struct Scored {
    std::optional<TargetSpec> target;
    double score = 0.0;
  };
  const auto scored = parallel_map(dataset.size(), opt.threads, [&](std::size_t j) {
    const auto cache = forward(g, dataset[j]);
    const Tensor& act = cache.value(idx);
    if (act.shape().rank() != 3 || channel < 0 || channel >= act.shape().channels())
      throw ValidationError("channel " + std::to_string(channel) + " out of range for layer '" + layer + "'");
    Scored s;
    s.target = choose_target(g.head(), cache.output(), opt.policy, opt.fixed_class);
    if (!s.target) return s;
    const Tensor init = target_init(g.head(), cache.output(), *s.target);
    const Tensor R = relevance_at(g, cache, init, rules, idx);
    const auto v = R.channel(channel);
    s.score = std::accumulate(v.begin(), v.end(), 0.0);
    return s;
  });

  ReferenceSet set;
  set.layer = layer;
  set.channel = channel;
  std::vector<std::size_t> usable;
  std::vector<double> scores;
  for (std::size_t j = 0; j < scored.size(); ++j) {
    if (!scored[j].target) {
      ++set.skipped;
      continue;
    }
    usable.push_back(j);
    scores.push_back(scored[j].score);
  }
  if (usable.empty()) {
    set.no_prediction = true;
    return set;
  }
  for (std::size_t pos : top_k_by_score(scores, opt.k)) {
    const std::size_t j = usable[pos];
    ReferenceEntry e;
    e.sample = j;
    e.score = scores[pos];
    e.target = *scored[j].target;
    if (opt.localize) {
      const auto loc = localize_concept(g, forward(g, dataset[j]), layer, channel, e.target, rules, opt.tau);
      e.box = loc.box;
      e.mask = loc.mask;
      e.crop = loc.crop;
      e.degenerate = loc.degenerate;
    }
    set.entries.push_back(std::move(e));
  }
  return set;
}

}  // namespace lcrp
