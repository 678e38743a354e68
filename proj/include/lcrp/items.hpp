#pragma once

// Context samples built from annotated fixture scenes.

#include <algorithm>
#include <cstddef>
#include <limits>
#include <vector>

#include "lcrp/context.hpp"
#include "lcrp/fixtures.hpp"

namespace lcrp {

// Instances of head class `cls` that the model predicts.
// Detection: one item per object of that class whose cell logit is > 0; the
// background is everything outside the object's box.
// Segmentation: one item per scene where `cls` wins at least one pixel; the
// background is everything outside the ground-truth masks of that class
// (head class k + 1 is object class k).
inline std::vector<ContextSample> context_items(const Graph& g, const std::vector<FixtureScene>& scenes, int cls,
                                                std::size_t limit = std::numeric_limits<std::size_t>::max()) {
  const auto& head = g.head();
  if (cls < 0 || cls >= head.num_classes)
    throw ValidationError("class " + std::to_string(cls) + " outside the head's " + std::to_string(head.num_classes) +
                          " classes");
  std::vector<ContextSample> items;
  for (const auto& s : scenes) {
    if (items.size() >= limit) break;
    if (s.objects.empty()) continue;
    const Tensor out = forward(g, s.image).output();
    if (head.kind == HeadKind::Detection) {
      std::vector<int> seen;
      for (std::size_t i = 0; i < s.objects.size() && items.size() < limit; ++i) {
        if (s.objects[i].cls != cls) continue;
        const int cell = object_cell(s, i, head);
        if (std::find(seen.begin(), seen.end(), cell) != seen.end()) continue;
        seen.push_back(cell);
        if (out[static_cast<std::size_t>(cell) * head.cell_channels() + static_cast<std::size_t>(cls)] <= 0.0f) continue;
        items.push_back({s.image, s.box_background(i), DetTarget{cell, cls}});
      }
    } else {
      if (cls == head.background_class) continue;
      if (winning_pixels(out, cls).empty()) continue;
      Tensor bg(Shape{s.image.shape()[1], s.image.shape()[2]}, 1.0f);
      for (const auto& o : s.objects)
        if (o.cls + 1 == cls)
          for (std::size_t p = 0; p < bg.size(); ++p)
            if (o.mask[p] != 0.0f) bg[p] = 0.0f;
      items.push_back({s.image, bg, SegTarget{cls}});
    }
  }
  return items;
}

}  // namespace lcrp
