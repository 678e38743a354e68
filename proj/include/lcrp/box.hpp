#pragma once

#include <algorithm>

#include "lcrp/tensor.hpp"

namespace lcrp {

// Inclusive pixel box.
struct Box {
  int x0 = 0, y0 = 0, x1 = -1, y1 = -1;
  int width() const { return x1 - x0 + 1; }
  int height() const { return y1 - y0 + 1; }
  bool empty() const { return x1 < x0 || y1 < y0; }
  bool contains(int x, int y) const { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
  friend bool operator==(const Box&, const Box&) = default;
};

// Tight box around the nonzero entries of an (H,W) map; empty box when there are none.
inline Box tight_box(const Tensor& m) {
  const int H = m.shape()[0], W = m.shape()[1];
  Box b{W, H, -1, -1};
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      if (m[static_cast<std::size_t>(y) * W + x] != 0.0f) {
        b.x0 = std::min(b.x0, x);
        b.y0 = std::min(b.y0, y);
        b.x1 = std::max(b.x1, x);
        b.y1 = std::max(b.y1, y);
      }
  return b;
}

}  // namespace lcrp
