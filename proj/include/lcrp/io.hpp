#pragma once

// Model container (JSON manifest + raw float blob), PPM/PGM images, raw
// heatmap sidecars, run reports and atomic file output.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "lcrp/errors.hpp"
#include "lcrp/fixtures.hpp"
#include "lcrp/graph.hpp"
#include "lcrp/tensor.hpp"

namespace lcrp {

using ojson = nlohmann::ordered_json;

inline constexpr int kManifestVersion = 1;
inline constexpr int kReportSchemaVersion = 1;
inline constexpr const char* kToolVersion = "0.1.0";

static_assert(std::endian::native == std::endian::little, "blob I/O assumes a little-endian host");

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + p.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Writes to a temporary sibling and renames it into place.
inline void write_file_atomic(const std::filesystem::path& p, std::string_view bytes) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  auto tmp = p;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ValidationError("write to '" + tmp.string() + "' failed");
  }
  std::filesystem::rename(tmp, p);
}

inline std::string floats_to_bytes(std::span<const float> v) {
  std::string s(v.size() * sizeof(float), '\0');
  if (!v.empty()) std::memcpy(s.data(), v.data(), s.size());
  return s;
}

inline std::vector<float> bytes_to_floats(std::string_view b) {
  if (b.size() % sizeof(float) != 0)
    throw ValidationError("blob length " + std::to_string(b.size()) + " is not a multiple of 4");
  std::vector<float> v(b.size() / sizeof(float));
  if (!v.empty()) std::memcpy(v.data(), b.data(), b.size());
  return v;
}

// ---------------------------------------------------------------- model container

inline std::string_view head_kind_name(HeadKind k) { return k == HeadKind::Segmentation ? "segmentation" : "detection"; }

inline ojson shape_json(const Shape& s) {
  ojson a = ojson::array();
  for (int i = 0; i < s.rank(); ++i) a.push_back(s[i]);
  return a;
}

inline ojson manifest_json(const Graph& g) {
  ojson m;
  m["format"] = "lcrp-model";
  m["version"] = kManifestVersion;
  m["name"] = g.name();
  m["input_shape"] = shape_json(g.input_shape());
  const auto& h = g.head();
  m["head"] = {{"kind", head_kind_name(h.kind)},
               {"num_classes", h.num_classes},
               {"num_cells", h.num_cells},
               {"background_class", h.background_class},
               {"grid_width", h.grid_width}};
  m["weight_count"] = g.weights().size();
  ojson nodes = ojson::array();
  for (const auto& n : g.nodes()) {
    ojson j;
    j["id"] = n.id;
    j["op"] = op_name(n.op);
    j["inputs"] = n.inputs;
    const auto& hp = n.hp;
    ojson h2;
    switch (n.op) {
      case OpKind::Conv2d:
        h2 = {{"in_channels", hp.in_channels}, {"out_channels", hp.out_channels}, {"kernel", hp.kernel},
              {"stride", hp.stride}, {"padding", hp.padding}};
        break;
      case OpKind::Dense: h2 = {{"in_features", hp.in_channels}, {"out_features", hp.out_channels}}; break;
      case OpKind::BatchNorm2d: h2 = {{"eps", hp.eps}}; break;
      case OpKind::MaxPool2d:
      case OpKind::AvgPool2d: h2 = {{"kernel", hp.kernel}, {"stride", hp.stride}}; break;
      case OpKind::UpsampleNearest: h2 = {{"factor", hp.factor}}; break;
      case OpKind::Flatten: h2 = {{"cells", hp.cells}}; break;
      case OpKind::Add: h2 = {{"norm_rule", hp.norm_rule}}; break;
      default: h2 = ojson::object(); break;
    }
    j["hyperparams"] = h2;
    ojson w = ojson::object();
    for (const auto& [name, ref] : n.weights) w[name] = {{"offset", ref.offset}, {"length", ref.length}};
    j["weights"] = w;
    nodes.push_back(j);
  }
  m["nodes"] = nodes;
  return m;
}

inline std::string save_manifest(const Graph& g) { return manifest_json(g).dump(2) + "\n"; }
inline std::string save_blob(const Graph& g) { return floats_to_bytes(g.weights()); }

namespace detail {

inline std::string line_of(std::string_view text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

// Typed field access with the JSON path in errors.
struct Reader {
  const ojson& j;
  std::string path;

  const ojson& at(const std::string& key) const {
    if (!j.is_object()) throw ParseError(path, "expected an object");
    auto it = j.find(key);
    if (it == j.end()) throw ParseError(path + "." + key, "missing field");
    return *it;
  }
  bool has(const std::string& key) const { return j.is_object() && j.contains(key); }
  Reader sub(const std::string& key) const { return Reader{at(key), path + "." + key}; }

  template <typename T>
  T get(const std::string& key) const {
    const ojson& v = at(key);
    try {
      if constexpr (std::is_same_v<T, int>) {
        if (!v.is_number_integer()) throw ParseError(path + "." + key, "expected an integer");
        const auto x = v.get<std::int64_t>();
        if (x < INT32_MIN || x > INT32_MAX) throw ParseError(path + "." + key, "integer out of range");
        return static_cast<int>(x);
      } else if constexpr (std::is_same_v<T, std::size_t>) {
        if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
          throw ParseError(path + "." + key, "expected a non-negative integer");
        return v.get<std::size_t>();
      } else if constexpr (std::is_same_v<T, float>) {
        if (!v.is_number()) throw ParseError(path + "." + key, "expected a number");
        return v.get<float>();
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ParseError(path + "." + key, "expected a boolean");
        return v.get<bool>();
      } else {
        if (!v.is_string()) throw ParseError(path + "." + key, "expected a string");
        return v.get<std::string>();
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + "." + key, e.what());
    }
  }

  template <typename T>
  T get_or(const std::string& key, T fallback) const {
    return has(key) ? get<T>(key) : fallback;
  }

  void only(std::initializer_list<const char*> keys) const {
    for (auto it = j.begin(); it != j.end(); ++it) {
      bool known = false;
      for (const char* k : keys) known = known || it.key() == k;
      if (!known) throw ParseError(path + "." + it.key(), "unknown field");
    }
  }
};

inline Shape parse_shape(const Reader& r, const std::string& key) {
  const ojson& a = r.at(key);
  if (!a.is_array() || a.empty()) throw ParseError(r.path + "." + key, "expected a nonempty integer array");
  std::vector<int> dims;
  for (const auto& d : a) {
    if (!d.is_number_integer() || d.get<std::int64_t>() <= 0)
      throw ParseError(r.path + "." + key, "dimensions must be positive integers");
    dims.push_back(static_cast<int>(d.get<std::int64_t>()));
  }
  return Shape(dims);
}

}  // namespace detail

// Strict: unknown ops or fields, dangling weight references and shape
// failures are errors.
inline Graph load_model(std::string_view manifest, std::string_view blob) {
  ojson m;
  try {
    m = ojson::parse(manifest);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(detail::line_of(manifest, e.byte == 0 ? 0 : e.byte - 1), e.what());
  }
  const detail::Reader root{m, "manifest"};
  root.only({"format", "version", "name", "input_shape", "head", "weight_count", "nodes"});
  if (root.get<std::string>("format") != "lcrp-model") throw ParseError("manifest.format", "not an lcrp model");
  if (root.get<int>("version") != kManifestVersion)
    throw ParseError("manifest.version", "unsupported version " + std::to_string(root.get<int>("version")));

  const auto hr = root.sub("head");
  hr.only({"kind", "num_classes", "num_cells", "background_class", "grid_width"});
  HeadSpec head;
  const auto kind = hr.get<std::string>("kind");
  if (kind == "segmentation")
    head.kind = HeadKind::Segmentation;
  else if (kind == "detection")
    head.kind = HeadKind::Detection;
  else
    throw ParseError("manifest.head.kind", "unknown head kind '" + kind + "'");
  head.num_classes = hr.get<int>("num_classes");
  head.num_cells = hr.get_or<int>("num_cells", 0);
  head.background_class = hr.get_or<int>("background_class", -1);
  head.grid_width = hr.get_or<int>("grid_width", 0);

  Graph g(root.get<std::string>("name"), detail::parse_shape(root, "input_shape"), head);
  g.weights() = bytes_to_floats(blob);
  if (root.has("weight_count") && root.get<std::size_t>("weight_count") != g.weights().size())
    throw ValidationError("blob holds " + std::to_string(g.weights().size()) + " floats, manifest declares " +
                          std::to_string(root.get<std::size_t>("weight_count")));

  const ojson& nodes = root.at("nodes");
  if (!nodes.is_array()) throw ParseError("manifest.nodes", "expected an array");
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    const detail::Reader nr{nodes[k], "manifest.nodes[" + std::to_string(k) + "]"};
    nr.only({"id", "op", "inputs", "hyperparams", "weights"});
    NodeSpec n;
    n.id = nr.get<std::string>("id");
    const auto op_s = nr.get<std::string>("op");
    const auto op = op_from_name(op_s);
    if (!op) throw ParseError(nr.path + ".op", "unknown op '" + op_s + "'");
    n.op = *op;
    const ojson& ins = nr.at("inputs");
    if (!ins.is_array()) throw ParseError(nr.path + ".inputs", "expected an array of ids");
    for (const auto& in : ins) {
      if (!in.is_string()) throw ParseError(nr.path + ".inputs", "expected an array of ids");
      n.inputs.push_back(in.get<std::string>());
    }
    const auto hp = nr.has("hyperparams") ? nr.sub("hyperparams") : detail::Reader{ojson::object(), nr.path};
    switch (n.op) {
      case OpKind::Conv2d:
        hp.only({"in_channels", "out_channels", "kernel", "stride", "padding"});
        n.hp.in_channels = hp.get<int>("in_channels");
        n.hp.out_channels = hp.get<int>("out_channels");
        n.hp.kernel = hp.get<int>("kernel");
        n.hp.stride = hp.get_or<int>("stride", 1);
        n.hp.padding = hp.get_or<int>("padding", 0);
        break;
      case OpKind::Dense:
        hp.only({"in_features", "out_features"});
        n.hp.in_channels = hp.get<int>("in_features");
        n.hp.out_channels = hp.get<int>("out_features");
        break;
      case OpKind::BatchNorm2d:
        hp.only({"eps"});
        n.hp.eps = hp.get_or<float>("eps", 1e-5f);
        break;
      case OpKind::MaxPool2d:
      case OpKind::AvgPool2d:
        hp.only({"kernel", "stride"});
        n.hp.kernel = hp.get<int>("kernel");
        n.hp.stride = hp.get_or<int>("stride", n.hp.kernel);
        break;
      case OpKind::UpsampleNearest:
        hp.only({"factor"});
        n.hp.factor = hp.get<int>("factor");
        break;
      case OpKind::Flatten:
        hp.only({"cells"});
        n.hp.cells = hp.get_or<bool>("cells", false);
        break;
      case OpKind::Add:
        hp.only({"norm_rule"});
        n.hp.norm_rule = hp.get_or<bool>("norm_rule", false);
        break;
      default: hp.only({}); break;
    }
    if (nr.has("weights")) {
      const auto wr = nr.sub("weights");
      if (!wr.j.is_object()) throw ParseError(wr.path, "expected an object");
      for (auto it = wr.j.begin(); it != wr.j.end(); ++it) {
        const detail::Reader ref{it.value(), wr.path + "." + it.key()};
        ref.only({"offset", "length"});
        WeightRef r{ref.get<std::size_t>("offset"), ref.get<std::size_t>("length")};
        if (r.offset + r.length > g.weights().size())
          throw ValidationError("weight '" + it.key() + "' of node '" + n.id + "' references [" +
                                std::to_string(r.offset) + ", " + std::to_string(r.offset + r.length) +
                                ") but the blob holds " + std::to_string(g.weights().size()) + " floats");
        n.weights[it.key()] = r;
      }
    }
    g.add_node(std::move(n));
  }
  validate(g);
  return g;
}

// Model files: <stem>.json manifest next to <stem>.bin blob.
inline std::filesystem::path blob_path_for(const std::filesystem::path& manifest) {
  auto p = manifest;
  p.replace_extension(".bin");
  return p;
}

inline void save_model_files(const Graph& g, const std::filesystem::path& manifest) {
  write_file_atomic(blob_path_for(manifest), save_blob(g));
  write_file_atomic(manifest, save_manifest(g));
}

inline Graph load_model_files(const std::filesystem::path& manifest) {
  return load_model(read_file(manifest), read_file(blob_path_for(manifest)));
}

// ---------------------------------------------------------------- images

namespace detail {

struct Netpbm {
  std::string magic;
  int width = 0, height = 0, maxval = 0;
  std::size_t data_offset = 0;
};

inline Netpbm parse_netpbm_header(std::string_view b, const std::string& where) {
  Netpbm h;
  std::size_t i = 0;
  auto skip_space = [&] {
    while (i < b.size()) {
      if (b[i] == '#') {
        while (i < b.size() && b[i] != '\n') ++i;
      } else if (std::isspace(static_cast<unsigned char>(b[i]))) {
        ++i;
      } else {
        break;
      }
    }
  };
  auto token = [&]() -> std::string {
    skip_space();
    const std::size_t s = i;
    while (i < b.size() && !std::isspace(static_cast<unsigned char>(b[i])) && b[i] != '#') ++i;
    if (s == i) throw ParseError(where, "truncated header");
    return std::string(b.substr(s, i - s));
  };
  auto number = [&](const char* what) {
    const std::string t = token();
    if (t.find_first_not_of("0123456789") != std::string::npos || t.size() > 9)
      throw ParseError(where, std::string("invalid ") + what + " '" + t + "'");
    return std::stoi(t);
  };
  h.magic = token();
  h.width = number("width");
  h.height = number("height");
  h.maxval = number("maxval");
  if (i >= b.size() || !std::isspace(static_cast<unsigned char>(b[i]))) throw ParseError(where, "truncated header");
  h.data_offset = i + 1;
  if (h.width <= 0 || h.height <= 0) throw ParseError(where, "image dimensions must be positive");
  return h;
}

}  // namespace detail

// Binary PPM (P6, maxval 255) -> (3,H,W) in [0,1].
inline Tensor decode_ppm(std::string_view b, const std::string& where = "ppm") {
  const auto h = detail::parse_netpbm_header(b, where);
  if (h.magic != "P6") throw ParseError(where, "expected binary PPM (P6), got '" + h.magic + "'");
  if (h.maxval != 255) throw ParseError(where, "unsupported maxval " + std::to_string(h.maxval));
  const std::size_t P = static_cast<std::size_t>(h.width) * h.height;
  if (b.size() - h.data_offset < 3 * P) throw ParseError(where, "pixel data truncated");
  Tensor t(Shape{3, h.height, h.width});
  for (std::size_t p = 0; p < P; ++p)
    for (int c = 0; c < 3; ++c)
      t[static_cast<std::size_t>(c) * P + p] =
          static_cast<float>(static_cast<unsigned char>(b[h.data_offset + 3 * p + static_cast<std::size_t>(c)])) / 255.0f;
  return t;
}

// Binary PGM (P5, maxval 255) -> (H,W) raw values in [0,1].
inline Tensor decode_pgm(std::string_view b, const std::string& where = "pgm") {
  const auto h = detail::parse_netpbm_header(b, where);
  if (h.magic != "P5") throw ParseError(where, "expected binary PGM (P5), got '" + h.magic + "'");
  if (h.maxval != 255) throw ParseError(where, "unsupported maxval " + std::to_string(h.maxval));
  const std::size_t P = static_cast<std::size_t>(h.width) * h.height;
  if (b.size() - h.data_offset < P) throw ParseError(where, "pixel data truncated");
  Tensor t(Shape{h.height, h.width});
  for (std::size_t p = 0; p < P; ++p)
    t[p] = static_cast<float>(static_cast<unsigned char>(b[h.data_offset + p])) / 255.0f;
  return t;
}

// Mask semantics: nonzero pixel = 1.
inline Tensor decode_mask(std::string_view b, const std::string& where = "mask") {
  Tensor t = decode_pgm(b, where);
  for (auto& v : t.values()) v = v != 0.0f ? 1.0f : 0.0f;
  return t;
}

inline unsigned char to_byte(float v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

inline std::string encode_ppm(const Tensor& img) {
  if (img.shape().rank() != 3 || img.shape()[0] != 3) throw ShapeError("PPM needs a (3,H,W) image, got " + img.shape().str());
  const int H = img.shape()[1], W = img.shape()[2];
  std::string s = "P6\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  const std::size_t P = img.shape().spatial();
  for (std::size_t p = 0; p < P; ++p)
    for (int c = 0; c < 3; ++c) s.push_back(static_cast<char>(to_byte(img[static_cast<std::size_t>(c) * P + p])));
  return s;
}

inline std::string encode_pgm(const Tensor& gray) {
  if (gray.shape().rank() != 2) throw ShapeError("PGM needs an (H,W) map, got " + gray.shape().str());
  const int H = gray.shape()[0], W = gray.shape()[1];
  std::string s = "P5\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  for (float v : gray.values()) s.push_back(static_cast<char>(to_byte(v)));
  return s;
}

// Signed heatmap -> 8 bit: 0 maps to 128, +-scale to 255 / 1; values beyond
// the scale are clipped. scale <= 0 uses max|v|.
inline std::vector<unsigned char> heatmap_bytes(const Tensor& heat, float scale = 0.0f) {
  if (scale <= 0.0f) scale = heat.max_abs();
  std::vector<unsigned char> out(heat.size(), 128);
  if (scale <= 0.0f) return out;
  for (std::size_t i = 0; i < heat.size(); ++i) {
    const float v = std::clamp(heat[i] / scale, -1.0f, 1.0f);
    out[i] = static_cast<unsigned char>(std::lround(128.0f + 127.0f * v));
  }
  return out;
}

inline std::string encode_heatmap_pgm(const Tensor& heat, float scale = 0.0f) {
  if (heat.shape().rank() != 2) throw ShapeError("heatmap must be (H,W), got " + heat.shape().str());
  std::string s = "P5\n" + std::to_string(heat.shape()[1]) + " " + std::to_string(heat.shape()[0]) + "\n255\n";
  for (unsigned char c : heatmap_bytes(heat, scale)) s.push_back(static_cast<char>(c));
  return s;
}

inline Tensor read_image(const std::filesystem::path& p) { return decode_ppm(read_file(p), p.string()); }
inline Tensor read_mask(const std::filesystem::path& p) { return decode_mask(read_file(p), p.string()); }
inline void write_image(const std::filesystem::path& p, const Tensor& img) { write_file_atomic(p, encode_ppm(img)); }
inline void write_mask(const std::filesystem::path& p, const Tensor& m) { write_file_atomic(p, encode_pgm(m)); }

// ---------------------------------------------------------------- raw sidecar

// <stem>.f32 holds little-endian floats in row-major order; <stem>.f32.json
// records the shape.
inline void write_raw(const std::filesystem::path& p, const Tensor& t) {
  ojson meta;
  meta["dtype"] = "float32-le";
  meta["layout"] = "row-major";
  meta["shape"] = shape_json(t.shape());
  write_file_atomic(p, floats_to_bytes(t.values()));
  auto mp = p;
  mp += ".json";
  write_file_atomic(mp, meta.dump(2) + "\n");
}

inline Tensor read_raw(const std::filesystem::path& p) {
  auto mp = p;
  mp += ".json";
  const std::string text = read_file(mp);
  ojson meta;
  try {
    meta = ojson::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(mp.string(), e.what());
  }
  const detail::Reader r{meta, mp.string()};
  if (r.get<std::string>("dtype") != "float32-le") throw ParseError(mp.string() + ".dtype", "unsupported dtype");
  const Shape s = detail::parse_shape(r, "shape");
  auto v = bytes_to_floats(read_file(p));
  if (v.size() != s.numel())
    throw ValidationError("sidecar '" + p.string() + "' holds " + std::to_string(v.size()) + " floats, shape " +
                          s.str() + " needs " + std::to_string(s.numel()));
  return Tensor(s, std::move(v));
}

// Heatmap PGM plus raw sidecar next to it.
inline void write_heatmap(const std::filesystem::path& pgm, const Tensor& heat) {
  write_file_atomic(pgm, encode_heatmap_pgm(heat));
  auto raw = pgm;
  raw.replace_extension(".f32");
  write_raw(raw, heat);
}

// ---------------------------------------------------------------- datasets

// A dataset directory holds dataset.json, one PPM per scene and, for
// annotated scenes, an instance map PGM (0 background, i+1 for object i).
inline constexpr const char* kDatasetFile = "dataset.json";

inline ojson spec_json(const FixtureSpec& spec) {
  ojson j;
  j["image_size"] = spec.image_size;
  ojson cls = ojson::array();
  for (auto c : spec.classes) cls.push_back(shape_name(c));
  j["classes"] = cls;
  ojson tex = ojson::array();
  for (auto t : spec.textures) tex.push_back(texture_name(t));
  j["textures"] = tex;
  ojson rules = ojson::array();
  for (const auto& r : spec.rules) {
    ojson rj;
    rj["class"] = r.cls;
    if (r.texture) rj["texture"] = texture_name(*r.texture);
    if (r.co_class) rj["co_class"] = *r.co_class;
    rj["p"] = r.p;
    rules.push_back(rj);
  }
  j["rules"] = rules;
  j["count"] = spec.count;
  j["seed"] = spec.seed;
  j["min_size"] = spec.min_size;
  j["max_size"] = spec.max_size;
  j["noise"] = spec.noise;
  if (spec.texture_channel) j["texture_channel"] = *spec.texture_channel;
  return j;
}

inline std::string scene_stem(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%05zu", i);
  return buf;
}

inline void save_dataset(const std::filesystem::path& dir, const FixtureSpec& spec,
                         const std::vector<FixtureScene>& scenes) {
  std::filesystem::create_directories(dir);
  ojson list = ojson::array();
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto& s = scenes[i];
    const std::string stem = scene_stem(i);
    write_image(dir / (stem + ".ppm"), s.image);
    const int H = s.image.shape()[1], W = s.image.shape()[2];
    std::string inst = "P5\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
    std::string px(static_cast<std::size_t>(H) * W, '\0');
    ojson objs = ojson::array();
    for (std::size_t k = 0; k < s.objects.size(); ++k) {
      const auto& o = s.objects[k];
      for (std::size_t p = 0; p < px.size(); ++p)
        if (o.mask[p] != 0.0f) px[p] = static_cast<char>(k + 1);
      objs.push_back({{"class", o.cls},
                      {"shape", shape_name(o.shape)},
                      {"box", {o.box.x0, o.box.y0, o.box.x1, o.box.y1}}});
    }
    write_file_atomic(dir / (stem + ".inst.pgm"), inst + px);
    list.push_back({{"image", stem + ".ppm"},
                    {"instances", stem + ".inst.pgm"},
                    {"texture", texture_name(s.texture)},
                    {"cooccurrence", s.cooccurrence},
                    {"index", s.index},
                    {"objects", objs}});
  }
  ojson j;
  j["format"] = "lcrp-dataset";
  j["version"] = 1;
  j["spec"] = spec_json(spec);
  j["scenes"] = list;
  write_file_atomic(dir / kDatasetFile, j.dump(2) + "\n");
}

// Annotated scenes from dataset.json, or bare images (no objects) from the
// directory's PPM files in name order.
inline std::vector<FixtureScene> load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw ValidationError("data directory '" + dir.string() + "' does not exist");
  std::vector<FixtureScene> out;
  const auto manifest = dir / kDatasetFile;
  if (!fs::exists(manifest)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().extension() == ".ppm") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (std::size_t i = 0; i < files.size(); ++i) {
      FixtureScene s;
      s.image = read_image(files[i]);
      s.index = i;
      out.push_back(std::move(s));
    }
    if (out.empty()) throw ValidationError("no images in '" + dir.string() + "'");
    return out;
  }
  const std::string text = read_file(manifest);
  ojson j;
  try {
    j = ojson::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(manifest.string() + " " + detail::line_of(text, e.byte == 0 ? 0 : e.byte - 1), e.what());
  }
  const detail::Reader root{j, "dataset"};
  if (root.get<std::string>("format") != "lcrp-dataset") throw ParseError("dataset.format", "not an lcrp dataset");
  const ojson& scenes = root.at("scenes");
  if (!scenes.is_array()) throw ParseError("dataset.scenes", "expected an array");
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const detail::Reader sr{scenes[i], "dataset.scenes[" + std::to_string(i) + "]"};
    FixtureScene s;
    s.image = read_image(dir / sr.get<std::string>("image"));
    s.index = sr.get_or<std::size_t>("index", i);
    s.texture = texture_from_name(sr.get_or<std::string>("texture", "plain"));
    s.cooccurrence = sr.get_or<bool>("cooccurrence", false);
    const int H = s.image.shape()[1], W = s.image.shape()[2];
    const ojson& objs = sr.has("objects") ? sr.at("objects") : ojson::array();
    Tensor inst;
    if (!objs.empty()) {
      inst = decode_pgm(read_file(dir / sr.get<std::string>("instances")), sr.path + ".instances");
      if (inst.shape() != Shape{H, W}) throw ShapeError("instance map does not match image of scene " + std::to_string(i));
    }
    for (std::size_t k = 0; k < objs.size(); ++k) {
      const detail::Reader orr{objs[k], sr.path + ".objects[" + std::to_string(k) + "]"};
      Instance o;
      o.cls = orr.get<int>("class");
      o.shape = shape_from_name(orr.get_or<std::string>("shape", "disk"));
      o.mask = Tensor(Shape{H, W});
      const float id = static_cast<float>(k + 1) / 255.0f;
      for (std::size_t p = 0; p < o.mask.size(); ++p) o.mask[p] = inst[p] == id ? 1.0f : 0.0f;
      o.box = tight_box(o.mask);
      const ojson& b = orr.at("box");
      if (!b.is_array() || b.size() != 4 || o.box != Box{b[0].get<int>(), b[1].get<int>(), b[2].get<int>(), b[3].get<int>()})
        throw ValidationError("box of object " + std::to_string(k) + " in scene " + std::to_string(i) +
                              " does not match its instance mask");
      s.objects.push_back(std::move(o));
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------- reports

// Finite doubles as numbers, NaN/inf as null (JSON has no representation).
inline ojson number(double v) { return std::isfinite(v) ? ojson(v) : ojson(nullptr); }

struct RunReport {
  std::string command;
  ojson config = ojson::object();
  std::uint64_t seed = 0;
  ojson results = ojson::object();
  std::vector<std::string> warnings;

  ojson to_json() const {
    ojson j;
    j["schema_version"] = kReportSchemaVersion;
    j["tool"] = "lcrp";
    j["tool_version"] = kToolVersion;
    j["command"] = command;
    j["seed"] = seed;
    j["config"] = config;
    j["results"] = results;
    j["warnings"] = warnings;
    return j;
  }
  std::string dump() const { return to_json().dump(2) + "\n"; }
  void write(const std::filesystem::path& p) const { write_file_atomic(p, dump()); }
};

}  // namespace lcrp
