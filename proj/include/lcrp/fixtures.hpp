#pragma once

// Synthetic scenes with ground truth, the two toy model presets and a
// minimal SGD trainer.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lcrp/box.hpp"
#include "lcrp/builder.hpp"
#include "lcrp/errors.hpp"
#include "lcrp/forward.hpp"
#include "lcrp/gradient.hpp"
#include "lcrp/graph.hpp"
#include "lcrp/heads.hpp"
#include "lcrp/random.hpp"
#include "lcrp/tensor.hpp"

namespace lcrp {

enum class ShapeKind { Disk, Square, Triangle };
enum class Texture { Plain, Stripes, Dots };

inline std::string_view shape_name(ShapeKind s) {
  switch (s) {
    case ShapeKind::Disk: return "disk";
    case ShapeKind::Square: return "square";
    case ShapeKind::Triangle: return "triangle";
  }
  return "?";
}
inline std::string_view texture_name(Texture t) {
  switch (t) {
    case Texture::Plain: return "plain";
    case Texture::Stripes: return "stripes";
    case Texture::Dots: return "dots";
  }
  return "?";
}
inline ShapeKind shape_from_name(std::string_view s) {
  for (auto k : {ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle})
    if (shape_name(k) == s) return k;
  throw ValidationError("unknown shape '" + std::string(s) + "'");
}
inline Texture texture_from_name(std::string_view s) {
  for (auto k : {Texture::Plain, Texture::Stripes, Texture::Dots})
    if (texture_name(k) == s) return k;
  throw ValidationError("unknown texture '" + std::string(s) + "'");
}

// With probability p a scene whose primary object has class `cls` gets the
// texture (or an additional object of class `co_class`).
struct BiasRule {
  int cls = 0;
  std::optional<Texture> texture;
  std::optional<int> co_class;
  double p = 1.0;
};

struct FixtureSpec {
  int image_size = 32;
  std::vector<ShapeKind> classes{ShapeKind::Disk, ShapeKind::Square};
  std::vector<Texture> textures{Texture::Plain, Texture::Stripes, Texture::Dots};
  std::vector<BiasRule> rules;
  int count = 100;
  std::uint64_t seed = 0;
  int min_size = 8;  // object extent in pixels
  int max_size = 14;
  double noise = 0.02;
  std::optional<int> texture_channel;  // fixed strong channel of the texture color; random if unset

  void validate() const {
    if (image_size < 4) throw ValidationError("image size must be at least 4");
    if (classes.empty()) throw ValidationError("fixture spec needs at least one class");
    if (textures.empty()) throw ValidationError("fixture spec needs at least one texture");
    if (min_size < 2 || max_size < min_size) throw ValidationError("invalid object size range");
    if (count < 0) throw ValidationError("negative scene count");
    if (texture_channel && (*texture_channel < 0 || *texture_channel > 2))
      throw ValidationError("texture channel must be 0, 1 or 2");
    for (const auto& r : rules) {
      if (!(r.p >= 0.0 && r.p <= 1.0)) throw ValidationError("bias probability outside [0,1]");
      if (r.cls < 0 || r.cls >= static_cast<int>(classes.size())) throw ValidationError("bias rule class out of range");
      if (r.texture.has_value() == r.co_class.has_value())
        throw ValidationError("bias rule needs exactly one of texture or co-occurring class");
      if (r.co_class && (*r.co_class < 0 || *r.co_class >= static_cast<int>(classes.size())))
        throw ValidationError("co-occurring class out of range");
      if (r.texture && std::find(textures.begin(), textures.end(), *r.texture) == textures.end())
        throw ValidationError("bias texture not in the texture list");
    }
  }
};

struct Instance {
  int cls = 0;
  ShapeKind shape = ShapeKind::Disk;
  Tensor mask;  // (H,W) binary
  Box box;
};

struct FixtureScene {
  Tensor image;  // (3,H,W) in [0,1]
  std::vector<Instance> objects;
  Texture texture = Texture::Plain;
  bool cooccurrence = false;  // a bias rule fired
  std::uint64_t seed = 0;
  std::size_t index = 0;

  // Pixel label map: 0 background, k+1 for class k.
  std::vector<int> labels() const {
    std::vector<int> l(objects.empty() ? 0 : objects[0].mask.size(), 0);
    if (l.empty()) l.assign(image.shape().spatial(), 0);
    for (const auto& o : objects)
      for (std::size_t p = 0; p < l.size(); ++p)
        if (o.mask[p] != 0.0f) l[p] = o.cls + 1;
    return l;
  }
  // 1 = background (outside every object mask).
  Tensor background_mask() const {
    Tensor m(Shape{image.shape()[1], image.shape()[2]}, 1.0f);
    for (const auto& o : objects)
      for (std::size_t p = 0; p < m.size(); ++p)
        if (o.mask[p] != 0.0f) m[p] = 0.0f;
    return m;
  }
  // 1 = outside the object's bounding box.
  Tensor box_background(std::size_t object) const {
    const int H = image.shape()[1], W = image.shape()[2];
    Tensor m(Shape{H, W}, 1.0f);
    const Box& b = objects.at(object).box;
    for (int y = b.y0; y <= b.y1; ++y)
      for (int x = b.x0; x <= b.x1; ++x) m[static_cast<std::size_t>(y) * W + x] = 0.0f;
    return m;
  }
};

namespace detail {

inline Tensor render_mask(ShapeKind s, int H, int W, double cx, double cy, int size) {
  Tensor m(Shape{H, W});
  const double r = size / 2.0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double px = x + 0.5 - cx, py = y + 0.5 - cy;
      bool in = false;
      switch (s) {
        case ShapeKind::Disk: in = px * px + py * py <= r * r; break;
        case ShapeKind::Square: in = std::fabs(px) <= r && std::fabs(py) <= r; break;
        case ShapeKind::Triangle: {
          // apex up, base at the bottom of the extent
          const double t = (py + r) / (2 * r);
          in = t >= 0.0 && t <= 1.0 && std::fabs(px) <= r * t;
          break;
        }
      }
      if (in) m[static_cast<std::size_t>(y) * W + x] = 1.0f;
    }
  return m;
}

inline std::array<float, 3> gray_color(Rng& rng, double lo, double hi, double jitter) {
  const double v = rng.uniform(lo, hi);
  std::array<float, 3> c{};
  for (auto& x : c) x = static_cast<float>(std::clamp(v + rng.uniform(-jitter, jitter), 0.0, 1.0));
  return c;
}

// One strong channel, the others low: never confused with the grayish objects.
inline std::array<float, 3> saturated_color(Rng& rng, std::optional<int> channel = std::nullopt) {
  std::array<float, 3> c{};
  for (auto& x : c) x = static_cast<float>(rng.uniform(0.0, 0.25));
  const auto drawn = rng.below(3);
  c[channel ? static_cast<std::size_t>(*channel) : drawn] = static_cast<float>(rng.uniform(0.75, 1.0));
  return c;
}

// Dark grayish base; the texture's second color is saturated.
inline void paint_background(Tensor& img, Texture t, Rng& rng, std::optional<int> channel = std::nullopt) {
  const int H = img.shape()[1], W = img.shape()[2];
  const auto base = gray_color(rng, 0.15, 0.4, 0.05);
  const auto alt = saturated_color(rng, channel);
  const int period = 4 + static_cast<int>(rng.below(2));
  const int phase = static_cast<int>(rng.below(static_cast<std::uint64_t>(period)));
  const bool vertical = rng.bernoulli(0.5);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      bool second = false;
      switch (t) {
        case Texture::Plain: break;
        case Texture::Stripes: second = (((vertical ? x : y) + phase) % period) < period / 2; break;
        case Texture::Dots: second = ((x + phase) % period == 0) && ((y + phase) % period == 0); break;
      }
      const auto& col = second ? alt : base;
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = col[static_cast<std::size_t>(c)];
    }
}

}  // namespace detail

// Deterministic in (spec.seed, index).
inline FixtureScene generate_scene(const FixtureSpec& spec, std::size_t index) {
  spec.validate();
  const int S = spec.image_size;
  if (spec.max_size + 2 > S) throw ValidationError("objects of size " + std::to_string(spec.max_size) +
                                                   " cannot fit into a " + std::to_string(S) + " image");
  Rng rng = Rng::stream(spec.seed, index);
  FixtureScene scene;
  scene.seed = spec.seed;
  scene.index = index;
  scene.image = Tensor(Shape{3, S, S});

  const int ncls = static_cast<int>(spec.classes.size());
  const int primary = static_cast<int>(rng.below(static_cast<std::uint64_t>(ncls)));

  // Textures claimed by a rule are reserved for the rule's class.
  std::vector<Texture> free_textures;
  for (Texture t : spec.textures) {
    bool claimed = false;
    for (const auto& r : spec.rules) claimed = claimed || (r.texture && *r.texture == t);
    if (!claimed) free_textures.push_back(t);
  }
  if (free_textures.empty()) free_textures = spec.textures;

  std::optional<int> extra;
  scene.texture = free_textures[rng.below(free_textures.size())];
  for (const auto& r : spec.rules) {
    if (r.cls != primary) continue;
    const bool fire = rng.bernoulli(r.p);
    if (r.texture) {
      if (fire) {
        scene.texture = *r.texture;
      } else {
        std::vector<Texture> others;
        for (Texture t : spec.textures)
          if (t != *r.texture) others.push_back(t);
        if (!others.empty()) scene.texture = others[rng.below(others.size())];
      }
    } else if (fire) {
      extra = *r.co_class;
    }
    scene.cooccurrence = scene.cooccurrence || fire;
  }
  detail::paint_background(scene.image, scene.texture, rng, spec.texture_channel);

  std::vector<int> to_place{primary};
  if (extra) to_place.push_back(*extra);
  Tensor occupied(Shape{S, S});
  for (int cls : to_place) {
    const ShapeKind kind = spec.classes[static_cast<std::size_t>(cls)];
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      const int size = rng.between(spec.min_size, spec.max_size);
      const double r = size / 2.0;
      const double cx = rng.uniform(r + 1, S - r - 1), cy = rng.uniform(r + 1, S - r - 1);
      Tensor m = detail::render_mask(kind, S, S, cx, cy, size);
      bool clash = false;
      for (std::size_t p = 0; p < m.size() && !clash; ++p) clash = m[p] != 0.0f && occupied[p] != 0.0f;
      if (clash || m.max_abs() == 0.0f) continue;
      for (std::size_t p = 0; p < m.size(); ++p)
        if (m[p] != 0.0f) occupied[p] = 1.0f;
      Instance inst{cls, kind, m, tight_box(m)};
      scene.objects.push_back(std::move(inst));
      placed = true;
    }
    if (!placed) throw ValidationError("could not place object of class " + std::to_string(cls) + " in scene " +
                                       std::to_string(index));
  }

  for (const auto& o : scene.objects) {
    const auto col = detail::gray_color(rng, 0.7, 1.0, 0.05);
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x)
        if (o.mask[static_cast<std::size_t>(y) * S + x] != 0.0f)
          for (int c = 0; c < 3; ++c) scene.image.at(c, y, x) = col[static_cast<std::size_t>(c)];
  }
  if (spec.noise > 0.0)
    for (std::size_t i = 0; i < scene.image.size(); ++i)
      scene.image[i] = std::clamp(static_cast<float>(scene.image[i] + spec.noise * rng.normal()), 0.0f, 1.0f);
  return scene;
}

inline std::vector<FixtureScene> generate_scenes(const FixtureSpec& spec, std::size_t first = 0) {
  std::vector<FixtureScene> out;
  out.reserve(static_cast<std::size_t>(spec.count));
  for (int i = 0; i < spec.count; ++i) out.push_back(generate_scene(spec, first + static_cast<std::size_t>(i)));
  return out;
}

enum class ToyPreset { SegSmall, DetSmall };

struct ToyOptions {
  int width = 8;
  bool with_bias = true;
  bool with_batchnorm = true;
  int num_classes = 3;  // segmentation: output classes incl. background; detection: object classes
  int image_size = 32;
};

inline ToyPreset toy_preset_from_name(std::string_view s) {
  if (s == "seg-small") return ToyPreset::SegSmall;
  if (s == "det-small") return ToyPreset::DetSmall;
  throw ValidationError("unknown model preset '" + std::string(s) + "'");
}

// Conv blocks use ids cK, bnK, rK; the relu outputs rK are the concept layers.
inline Graph build_toy_model(ToyPreset preset, std::uint64_t seed, const ToyOptions& o = {}) {
  const int S = o.image_size, w = o.width;
  if (S % 4 != 0) throw ValidationError("toy models need an image size divisible by 4");
  auto block = [&](GraphBuilder& b, int k, const std::string& in, int out_c) {
    const std::string id = std::to_string(k);
    std::string x = b.conv("c" + id, in, out_c, 3, 1, 1, o.with_bias);
    if (o.with_batchnorm) {
      const auto C = static_cast<std::size_t>(out_c);
      x = b.batchnorm("bn" + id, x,
                      std::array<std::vector<float>, 4>{std::vector<float>(C, 1.0f), std::vector<float>(C, 0.0f),
                                                        std::vector<float>(C, 0.0f), std::vector<float>(C, 1.0f)});
    }
    return b.relu("r" + id, x);
  };
  if (preset == ToyPreset::SegSmall) {
    HeadSpec head{HeadKind::Segmentation, o.num_classes, 0, 0, 0};
    GraphBuilder b("seg-small", Shape{3, S, S}, head, seed);
    const auto r1 = block(b, 1, "input", w);
    const auto p1 = b.maxpool("pool1", r1, 2, 2);
    const auto r2 = block(b, 2, p1, 2 * w);
    const auto r3 = block(b, 3, r2, 2 * w);
    const auto up = b.upsample("up", r3, 2);
    const auto r4 = block(b, 4, up, w);
    const auto sum = b.add_junction("skip", {r1, r4});
    const auto r5 = block(b, 5, sum, w);
    b.conv("head", r5, o.num_classes, 1, 1, 0, o.with_bias);
    return b.build();
  }
  const int grid = S / 4;
  HeadSpec head{HeadKind::Detection, o.num_classes, grid * grid, -1, grid};
  GraphBuilder b("det-small", Shape{3, S, S}, head, seed);
  auto x = block(b, 1, "input", w);
  x = b.maxpool("pool1", x, 2, 2);
  x = block(b, 2, x, 2 * w);
  x = b.maxpool("pool2", x, 2, 2);
  x = block(b, 3, x, 2 * w);
  x = block(b, 4, x, 2 * w);
  x = b.conv("head", x, o.num_classes + 4, 1, 1, 0, o.with_bias);
  b.flatten("cells", x, true);
  return b.build();
}

// Ground-truth detection target: the grid cell holding the box centre.
struct CellTarget {
  int cell = 0;
  int cls = 0;
  std::array<float, 4> box{};  // centre offset within the cell (x, y), width and height over image size
};

// Grid cell holding the centre of an object's box.
inline int object_cell(const FixtureScene& s, std::size_t object, const HeadSpec& head) {
  const Box& b = s.objects.at(object).box;
  const int grid = head.grid_width;
  const double cell_px = static_cast<double>(s.image.shape()[1]) / grid;
  const double cx = (b.x0 + b.x1 + 1) / 2.0, cy = (b.y0 + b.y1 + 1) / 2.0;
  const int gx = std::min(grid - 1, static_cast<int>(cx / cell_px));
  const int gy = std::min(grid - 1, static_cast<int>(cy / cell_px));
  return gy * grid + gx;
}

inline std::vector<CellTarget> cell_targets(const FixtureScene& s, const HeadSpec& head) {
  std::vector<CellTarget> out;
  const int S = s.image.shape()[1];
  const int grid = head.grid_width;
  const double cell_px = static_cast<double>(S) / grid;
  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    const auto& o = s.objects[i];
    const double cx = (o.box.x0 + o.box.x1 + 1) / 2.0, cy = (o.box.y0 + o.box.y1 + 1) / 2.0;
    const int gx = std::min(grid - 1, static_cast<int>(cx / cell_px));
    const int gy = std::min(grid - 1, static_cast<int>(cy / cell_px));
    CellTarget t;
    t.cell = object_cell(s, i, head);
    t.cls = o.cls;
    t.box = {static_cast<float>(cx / cell_px - gx), static_cast<float>(cy / cell_px - gy),
             static_cast<float>(o.box.width()) / S, static_cast<float>(o.box.height()) / S};
    if (std::none_of(out.begin(), out.end(), [&](const CellTarget& c) { return c.cell == t.cell; })) out.push_back(t);
  }
  return out;
}

struct TrainConfig {
  double learning_rate = 0.05;
  int epochs = 5;
  int batch_size = 8;
  std::uint64_t seed = 0;
  double box_weight = 1.0;       // detection box L2
  double negative_weight = 0.1;  // detection: hinge on class logits of empty cells
};

struct EpochStats {
  int epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;  // seg: pixel accuracy; det: class accuracy at object cells
  double iou = 0.0;       // seg: mean IoU over classes; det: box IoU at object cells
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
};

namespace detail {

// Loss and d(loss)/d(output) for one sample.
inline double seg_loss(const Tensor& out, const std::vector<int>& labels, Tensor& grad) {
  const int C = out.shape()[0];
  const std::size_t P = out.shape().spatial();
  grad = Tensor(out.shape());
  double loss = 0.0;
  std::vector<double> e(static_cast<std::size_t>(C));
  for (std::size_t p = 0; p < P; ++p) {
    double m = out[p];
    for (int c = 1; c < C; ++c) m = std::max(m, static_cast<double>(out[c * P + p]));
    double z = 0.0;
    for (int c = 0; c < C; ++c) z += e[static_cast<std::size_t>(c)] = std::exp(out[c * P + p] - m);
    const int y = labels[p];
    loss -= std::log(e[static_cast<std::size_t>(y)] / z);
    for (int c = 0; c < C; ++c)
      grad[c * P + p] = static_cast<float>((e[static_cast<std::size_t>(c)] / z - (c == y ? 1.0 : 0.0)) / P);
  }
  return loss / static_cast<double>(P);
}

inline double det_loss(const Tensor& out, const HeadSpec& head, const std::vector<CellTarget>& targets,
                       const TrainConfig& cfg, Tensor& grad) {
  const int K = head.cell_channels(), nc = head.num_classes;
  grad = Tensor(out.shape());
  double loss = 0.0;
  std::vector<char> positive(static_cast<std::size_t>(head.num_cells), 0);
  const double norm = static_cast<double>(std::max<std::size_t>(1, targets.size()));
  for (const auto& t : targets) {
    positive[static_cast<std::size_t>(t.cell)] = 1;
    const std::size_t row = static_cast<std::size_t>(t.cell) * K;
    double m = out[row];
    for (int c = 1; c < nc; ++c) m = std::max(m, static_cast<double>(out[row + c]));
    double z = 0.0;
    std::vector<double> e(static_cast<std::size_t>(nc));
    for (int c = 0; c < nc; ++c) z += e[static_cast<std::size_t>(c)] = std::exp(out[row + c] - m);
    loss -= std::log(e[static_cast<std::size_t>(t.cls)] / z) / norm;
    for (int c = 0; c < nc; ++c)
      grad[row + c] += static_cast<float>((e[static_cast<std::size_t>(c)] / z - (c == t.cls ? 1.0 : 0.0)) / norm);
    // the target logit should clear the detection threshold 0 with margin 1
    const double short_by = 1.0 - out[row + t.cls];
    if (short_by > 0) {
      loss += 0.5 * short_by * short_by / norm;
      grad[row + t.cls] -= static_cast<float>(short_by / norm);
    }
    for (int b = 0; b < 4; ++b) {
      const double d = out[row + nc + b] - t.box[static_cast<std::size_t>(b)];
      loss += cfg.box_weight * 0.5 * d * d / norm;
      grad[row + nc + b] += static_cast<float>(cfg.box_weight * d / norm);
    }
  }
  const double neg_norm = static_cast<double>(head.num_cells);
  for (int cell = 0; cell < head.num_cells; ++cell) {
    if (positive[static_cast<std::size_t>(cell)]) continue;
    const std::size_t row = static_cast<std::size_t>(cell) * K;
    for (int c = 0; c < nc; ++c) {
      const double over = out[row + c] + 1.0;  // empty cells should stay below -1
      if (over <= 0) continue;
      loss += cfg.negative_weight * 0.5 * over * over / neg_norm;
      grad[row + c] += static_cast<float>(cfg.negative_weight * over / neg_norm);
    }
  }
  return loss;
}

// Parameters the trainer updates: everything except batchnorm running statistics.
inline std::vector<char> trainable_mask(const Graph& g) {
  std::vector<char> m(g.weights().size(), 0);
  for (const auto& n : g.nodes())
    for (const auto& [name, ref] : n.weights) {
      if (name == "mean" || name == "var") continue;
      std::fill(m.begin() + static_cast<std::ptrdiff_t>(ref.offset),
                m.begin() + static_cast<std::ptrdiff_t>(ref.offset + ref.length), 1);
    }
  return m;
}

}  // namespace detail

struct SegMetrics {
  double pixel_accuracy = 0.0;
  double mean_iou = 0.0;
  double foreground_iou = 0.0;  // IoU of "any object" vs background
};

inline SegMetrics evaluate_segmentation(const Graph& g, const std::vector<FixtureScene>& scenes) {
  const int C = g.head().num_classes;
  std::vector<double> inter(static_cast<std::size_t>(C), 0), uni(static_cast<std::size_t>(C), 0);
  double correct = 0, total = 0, fg_i = 0, fg_u = 0;
  for (const auto& s : scenes) {
    const Tensor out = forward(g, s.image).output();
    const auto labels = s.labels();
    for (std::size_t p = 0; p < labels.size(); ++p) {
      const int pred = argmax_class(out, p), y = labels[p];
      correct += pred == y;
      total += 1;
      for (int c = 0; c < C; ++c) {
        const bool a = pred == c, b = y == c;
        inter[static_cast<std::size_t>(c)] += a && b;
        uni[static_cast<std::size_t>(c)] += a || b;
      }
      fg_i += pred != 0 && y != 0;
      fg_u += pred != 0 || y != 0;
    }
  }
  SegMetrics m;
  m.pixel_accuracy = total > 0 ? correct / total : 0.0;
  int counted = 0;
  for (int c = 0; c < C; ++c)
    if (uni[static_cast<std::size_t>(c)] > 0) {
      m.mean_iou += inter[static_cast<std::size_t>(c)] / uni[static_cast<std::size_t>(c)];
      ++counted;
    }
  m.mean_iou = counted ? m.mean_iou / counted : 0.0;
  m.foreground_iou = fg_u > 0 ? fg_i / fg_u : 0.0;
  return m;
}

struct DetMetrics {
  double class_accuracy = 0.0;  // argmax class at object cells
  double detected = 0.0;        // fraction of objects whose cell logit for the true class is > 0
  double false_cells = 0.0;     // fraction of empty cells with some class logit > 0
};

inline DetMetrics evaluate_detection(const Graph& g, const std::vector<FixtureScene>& scenes) {
  const auto& head = g.head();
  double correct = 0, found = 0, objects = 0, false_pos = 0, empty = 0;
  for (const auto& s : scenes) {
    const Tensor out = forward(g, s.image).output();
    const auto targets = cell_targets(s, head);
    std::vector<char> pos(static_cast<std::size_t>(head.num_cells), 0);
    for (const auto& t : targets) {
      pos[static_cast<std::size_t>(t.cell)] = 1;
      objects += 1;
      correct += cell_class(head, out, t.cell) == t.cls;
      found += out[static_cast<std::size_t>(t.cell) * head.cell_channels() + static_cast<std::size_t>(t.cls)] > 0.0f;
    }
    for (int c = 0; c < head.num_cells; ++c) {
      if (pos[static_cast<std::size_t>(c)]) continue;
      empty += 1;
      false_pos += out[static_cast<std::size_t>(c) * head.cell_channels() +
                       static_cast<std::size_t>(cell_class(head, out, c))] > 0.0f;
    }
  }
  DetMetrics m;
  m.class_accuracy = objects > 0 ? correct / objects : 0.0;
  m.detected = objects > 0 ? found / objects : 0.0;
  m.false_cells = empty > 0 ? false_pos / empty : 0.0;
  return m;
}

// Plain minibatch SGD with a fixed step size. Batchnorm running statistics
// stay fixed (the layer acts as a trainable per-channel affine map).
inline TrainHistory train_fixture(Graph& g, const std::vector<FixtureScene>& scenes, const TrainConfig& cfg) {
  if (scenes.empty()) throw ValidationError("no training scenes");
  if (cfg.batch_size < 1 || cfg.epochs < 0) throw ValidationError("invalid training configuration");
  if (g.head().num_classes == 0) throw ValidationError("training needs a segmentation or detection head");
  const bool seg = g.head().kind == HeadKind::Segmentation;
  const auto trainable = detail::trainable_mask(g);
  std::vector<std::size_t> order(scenes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(cfg.seed);
  TrainHistory hist;
  std::vector<float> grad(g.weights().size());
  std::size_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::fill(grad.begin(), grad.end(), 0.0f);
      double batch_loss = 0.0;
      for (std::size_t k = start; k < end; ++k) {
        const auto& s = scenes[order[k]];
        ActivationCache cache;
        try {
          cache = forward(g, s.image);
        } catch (const NumericalError& e) {
          throw TrainingError(step, e.what());
        }
        Tensor dout;
        const double l = seg ? detail::seg_loss(cache.output(), s.labels(), dout)
                             : detail::det_loss(cache.output(), g.head(), cell_targets(s, g.head()), cfg, dout);
        if (!std::isfinite(l)) throw TrainingError(step, "loss is not finite");
        batch_loss += l;
        gradient(g, cache, dout, grad);
      }
      const double n = static_cast<double>(end - start);
      const float scale = static_cast<float>(cfg.learning_rate / n);
      if (cfg.learning_rate != 0.0) {
        for (std::size_t i = 0; i < grad.size(); ++i) {
          if (!trainable[i]) continue;
          if (!std::isfinite(grad[i])) throw TrainingError(step, "gradient is not finite");
          g.weights()[i] -= scale * grad[i];
        }
      }
      loss_sum += batch_loss;
      ++step;
    }
    EpochStats st;
    st.epoch = epoch;
    st.loss = loss_sum / static_cast<double>(scenes.size());
    if (seg) {
      const auto m = evaluate_segmentation(g, scenes);
      st.accuracy = m.pixel_accuracy;
      st.iou = m.mean_iou;
    } else {
      const auto m = evaluate_detection(g, scenes);
      st.accuracy = m.class_accuracy;
      st.iou = m.detected;
    }
    hist.epochs.push_back(st);
  }
  return hist;
}

}  // namespace lcrp
