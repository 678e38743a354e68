#pragma once

#include <algorithm>
#include <array>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "lcrp/errors.hpp"
#include "lcrp/graph.hpp"
#include "lcrp/tensor.hpp"

namespace lcrp {

enum class Weighting { Uniform, Confidence };

struct SegTarget {
  int cls = 0;
  std::optional<Tensor> roi;  // (H,W) binary; nonzero = inside
  Weighting weighting = Weighting::Uniform;
};

struct DetTarget {
  int box = 0;
  int cls = 0;
};

using TargetSpec = std::variant<SegTarget, DetTarget>;

struct Detection {
  int cell = 0;
  int cls = 0;
  float logit = 0.0f;
  std::array<float, 4> box{};  // raw box channels of the cell
};

// Class index with the largest logit at pixel p; ties go to the lower index.
inline int argmax_class(const Tensor& logits, std::size_t p) {
  const int C = logits.shape()[0];
  const std::size_t plane = logits.shape().spatial();
  int best = 0;
  float bv = logits[p];
  for (int c = 1; c < C; ++c) {
    const float v = logits[static_cast<std::size_t>(c) * plane + p];
    if (v > bv) {
      bv = v;
      best = c;
    }
  }
  return best;
}

// Pixels (flat spatial index) where `cls` wins the argmax, restricted to the RoI.
inline std::vector<std::size_t> winning_pixels(const Tensor& logits, int cls, const Tensor* roi = nullptr) {
  std::vector<std::size_t> out;
  const std::size_t plane = logits.shape().spatial();
  for (std::size_t p = 0; p < plane; ++p) {
    if (roi && (*roi)[p] == 0.0f) continue;
    if (argmax_class(logits, p) == cls) out.push_back(p);
  }
  return out;
}

inline Tensor seg_target_init(const HeadSpec& head, const Tensor& output, const SegTarget& t) {
  if (head.kind != HeadKind::Segmentation) throw ValidationError("segmentation target on a detection head");
  if (t.cls < 0 || t.cls >= head.num_classes)
    throw ValidationError("class " + std::to_string(t.cls) + " out of range [0," + std::to_string(head.num_classes) + ")");
  const Shape& s = output.shape();
  if (t.roi && !(t.roi->shape() == Shape{s[1], s[2]}))
    throw ShapeError("RoI mask shape " + t.roi->shape().str() + " does not match output " + s.str());
  const auto win = winning_pixels(output, t.cls, t.roi ? &*t.roi : nullptr);
  if (win.empty()) throw TargetError("class not predicted: class " + std::to_string(t.cls) + " wins no pixel");
  Tensor init(s);
  const std::size_t off = static_cast<std::size_t>(t.cls) * s.spatial();
  for (std::size_t p : win) init[off + p] = t.weighting == Weighting::Uniform ? 1.0f : output[off + p];
  return init;
}

inline void check_det_target(const HeadSpec& head, const DetTarget& t) {
  if (head.kind != HeadKind::Detection) throw ValidationError("detection target on a segmentation head");
  if (t.box < 0 || t.box >= head.num_cells)
    throw ValidationError("box " + std::to_string(t.box) + " out of range [0," + std::to_string(head.num_cells) + ")");
  if (t.cls < 0 || t.cls >= head.num_classes)
    throw ValidationError("class " + std::to_string(t.cls) + " out of range [0," + std::to_string(head.num_classes) + ")");
}

inline Tensor det_target_init(const HeadSpec& head, const Tensor& output, const DetTarget& t) {
  check_det_target(head, t);
  Tensor init(output.shape());
  const std::size_t i = static_cast<std::size_t>(t.box) * head.cell_channels() + static_cast<std::size_t>(t.cls);
  init[i] = output[i];
  return init;
}

inline Tensor target_init(const HeadSpec& head, const Tensor& output, const TargetSpec& t) {
  return std::visit(
      [&](const auto& tt) -> Tensor {
        if constexpr (std::is_same_v<std::decay_t<decltype(tt)>, SegTarget>)
          return seg_target_init(head, output, tt);
        else
          return det_target_init(head, output, tt);
      },
      t);
}

// Cells ranked by their best class logit, thresholded and truncated.
inline std::vector<Detection> predict_detections(const HeadSpec& head, const Tensor& output, float score_threshold,
                                                 int top_k) {
  if (head.kind != HeadKind::Detection) throw ValidationError("predict_detections requires a detection head");
  std::vector<Detection> dets;
  const int K = head.cell_channels();
  for (int cell = 0; cell < head.num_cells; ++cell) {
    const float* row = output.data() + static_cast<std::size_t>(cell) * K;
    int best = 0;
    for (int c = 1; c < head.num_classes; ++c)
      if (row[c] > row[best]) best = c;
    if (!(row[best] > score_threshold)) continue;
    Detection d{cell, best, row[best], {}};
    for (int b = 0; b < 4; ++b) d.box[static_cast<std::size_t>(b)] = row[head.num_classes + b];
    dets.push_back(d);
  }
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.logit != b.logit) return a.logit > b.logit;
    return a.cell < b.cell;
  });
  if (top_k >= 0 && static_cast<int>(dets.size()) > top_k) dets.resize(static_cast<std::size_t>(top_k));
  return dets;
}

// Class predicted at a detection cell.
inline int cell_class(const HeadSpec& head, const Tensor& output, int cell) {
  const float* row = output.data() + static_cast<std::size_t>(cell) * head.cell_channels();
  int best = 0;
  for (int c = 1; c < head.num_classes; ++c)
    if (row[c] > row[best]) best = c;
  return best;
}

// The scalar a faithfulness or interaction experiment tracks: the chosen
// box's class logit, or the mean class logit over the originally winning pixels.
class TargetQuantity {
 public:
  static TargetQuantity make(const HeadSpec& head, const Tensor& output, const TargetSpec& t) {
    TargetQuantity q;
    q.head_ = head;
    if (const auto* d = std::get_if<DetTarget>(&t)) {
      check_det_target(head, *d);
      q.indices_ = {static_cast<std::size_t>(d->box) * head.cell_channels() + static_cast<std::size_t>(d->cls)};
    } else {
      const auto& s = std::get<SegTarget>(t);
      (void)seg_target_init(head, output, s);  // validates and raises when not predicted
      const auto win = winning_pixels(output, s.cls, s.roi ? &*s.roi : nullptr);
      const std::size_t off = static_cast<std::size_t>(s.cls) * output.shape().spatial();
      for (std::size_t p : win) q.indices_.push_back(off + p);
    }
    return q;
  }

  double evaluate(const Tensor& output) const {
    double s = 0.0;
    for (std::size_t i : indices_) s += output[i];
    return s / static_cast<double>(indices_.size());
  }

  // Seed whose gradient is d(evaluate)/d(output) up to the 1/n mean factor.
  Tensor seed(const Shape& output_shape) const {
    Tensor t(output_shape);
    for (std::size_t i : indices_) t[i] = 1.0f;
    return t;
  }

  const std::vector<std::size_t>& indices() const noexcept { return indices_; }

 private:
  HeadSpec head_;
  std::vector<std::size_t> indices_;
};

}  // namespace lcrp
