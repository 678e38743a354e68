#include <gtest/gtest.h>

#include <filesystem>

#include "lcrp/fixtures.hpp"
#include "lcrp/forward.hpp"
#include "lcrp/io.hpp"

using namespace lcrp;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("lcrp_test_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string replace_once(std::string s, const std::string& from, const std::string& to) {
  const auto pos = s.find(from);
  EXPECT_NE(pos, std::string::npos) << from;
  if (pos != std::string::npos) s.replace(pos, from.size(), to);
  return s;
}

}  // namespace

TEST(ModelContainer, RoundTripPreservesGraphAndOutputs) {
  for (auto preset : {ToyPreset::SegSmall, ToyPreset::DetSmall}) {
    const Graph g = build_toy_model(preset, 3);
    const Graph h = load_model(save_manifest(g), save_blob(g));
    EXPECT_EQ(h.nodes(), g.nodes());
    EXPECT_EQ(h.head(), g.head());
    EXPECT_EQ(h.weights(), g.weights());
    const auto x = generate_scene(FixtureSpec{}, 1).image;
    EXPECT_EQ(forward(g, x).output().vec(), forward(h, x).output().vec());
  }
}

TEST(ModelContainer, FilesRoundTrip) {
  const auto dir = scratch_dir("files");
  const Graph g = build_toy_model(ToyPreset::DetSmall, 1);
  save_model_files(g, dir / "m.json");
  EXPECT_TRUE(fs::exists(dir / "m.bin"));
  EXPECT_FALSE(fs::exists(dir / "m.json.tmp"));
  EXPECT_EQ(load_model_files(dir / "m.json").weights(), g.weights());
}

TEST(ModelContainer, MalformedJsonReportsLine) {
  const Graph g = build_toy_model(ToyPreset::DetSmall, 1);
  std::string m = save_manifest(g);
  m = replace_once(m, "\"nodes\": [", "\"nodes\": [,");
  try {
    load_model(m, save_blob(g));
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(e.where().find("line"), std::string::npos) << e.what();
  }
}

TEST(ModelContainer, UnknownOpNamesField) {
  const Graph g = build_toy_model(ToyPreset::DetSmall, 1);
  const std::string m = replace_once(save_manifest(g), "\"op\": \"relu\"", "\"op\": \"gelu\"");
  try {
    load_model(m, save_blob(g));
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(e.where().find(".op"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("gelu"), std::string::npos);
  }
}

TEST(ModelContainer, StrictFields) {
  const Graph g = build_toy_model(ToyPreset::DetSmall, 1);
  const std::string base = save_manifest(g);
  EXPECT_THROW(load_model(replace_once(base, "\"kernel\": 3", "\"kernel\": 3, \"dilation\": 2"), save_blob(g)),
               ParseError);
  EXPECT_THROW(load_model(replace_once(base, "\"kernel\": 3", "\"kernel\": \"3\""), save_blob(g)), ParseError);
  EXPECT_THROW(load_model(replace_once(base, "\"version\": 1", "\"version\": 7"), save_blob(g)), ParseError);
  EXPECT_THROW(load_model(replace_once(base, "\"kind\": \"detection\"", "\"kind\": \"pose\""), save_blob(g)),
               ParseError);
}

TEST(ModelContainer, DanglingWeightReference) {
  const Graph g = build_toy_model(ToyPreset::DetSmall, 1);
  std::string blob = save_blob(g);
  blob.resize(blob.size() - 4 * 10);
  auto m = manifest_json(g);
  m.erase("weight_count");
  try {
    load_model(m.dump(), blob);
    FAIL();
  } catch (const ParseError&) {
    FAIL() << "dangling reference is not a syntax error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("blob holds"), std::string::npos) << e.what();
  }
  EXPECT_THROW(load_model(save_manifest(g), blob), ValidationError);  // count mismatch
  EXPECT_THROW(load_model(save_manifest(g), save_blob(g) + "ab"), ValidationError);
}

TEST(ModelContainer, ShapeInconsistencyRejected) {
  const Graph g = build_toy_model(ToyPreset::DetSmall, 1);
  auto m = manifest_json(g);
  m["nodes"][0]["hyperparams"]["in_channels"] = 4;
  EXPECT_THROW(load_model(m.dump(), save_blob(g)), ValidationError);
  m = manifest_json(g);
  m["nodes"][1]["inputs"] = {"nowhere"};
  EXPECT_THROW(load_model(m.dump(), save_blob(g)), ValidationError);
}

TEST(Images, PpmRoundTripIsExactOnByteGrid) {
  Rng rng(2);
  Tensor img(Shape{3, 5, 7});
  for (auto& v : img.values()) v = static_cast<float>(rng.below(256)) / 255.0f;
  const Tensor back = decode_ppm(encode_ppm(img));
  EXPECT_EQ(back.shape(), img.shape());
  EXPECT_EQ(back.vec(), img.vec());
}

TEST(Images, HeaderCommentsAndErrors) {
  const std::string ok = "P6\n# comment\n2 1\n255\n" + std::string("\x01\x02\x03\xff\x00\x80", 6);
  const Tensor t = decode_ppm(ok);
  EXPECT_EQ(t.shape(), (Shape{3, 1, 2}));
  EXPECT_FLOAT_EQ(t.at(0, 0, 1), 1.0f);
  EXPECT_FLOAT_EQ(t.at(2, 0, 1), 128.0f / 255.0f);
  EXPECT_THROW(decode_ppm("P6\n2 1\n255\n\x01\x02"), ParseError);
  EXPECT_THROW(decode_ppm("P3\n1 1\n255\n1 2 3"), ParseError);
  EXPECT_THROW(decode_ppm("P6\n1 1\n65535\n"), ParseError);
  EXPECT_THROW(decode_pgm("P5\n0 1\n255\n"), ParseError);
}

TEST(Images, MaskIsBinary) {
  const std::string pgm = "P5\n3 1\n255\n" + std::string("\x00\x01\xff", 3);
  EXPECT_EQ(decode_mask(pgm).vec(), (std::vector<float>{0, 1, 1}));
}

TEST(Heatmaps, ZeroMapsToMidGray) {
  Tensor h(Shape{1, 5}, std::vector<float>{0.0f, 2.0f, -2.0f, 1.0f, -0.5f});
  const auto b = heatmap_bytes(h);
  EXPECT_EQ(b, (std::vector<unsigned char>{128, 255, 1, 192, 96}));
  // fixed scale clips
  EXPECT_EQ(heatmap_bytes(h, 1.0f), (std::vector<unsigned char>{128, 255, 1, 255, 65}));
  EXPECT_EQ(heatmap_bytes(Tensor(Shape{2, 2})), std::vector<unsigned char>(4, 128));
}

TEST(Heatmaps, SidecarRoundTrip) {
  const auto dir = scratch_dir("raw");
  Tensor h(Shape{3, 4});
  for (std::size_t i = 0; i < h.size(); ++i) h[i] = 1e-7f * static_cast<float>(i) - 3.5f;
  write_heatmap(dir / "h.pgm", h);
  EXPECT_EQ(read_raw(dir / "h.f32").vec(), h.vec());
  EXPECT_EQ(decode_pgm(read_file(dir / "h.pgm")).shape(), (Shape{3, 4}));
  write_file_atomic(dir / "h.f32", "abcd");
  EXPECT_THROW(read_raw(dir / "h.f32"), ValidationError);
}

TEST(Reports, NonFiniteBecomesNull) {
  RunReport r;
  r.command = "eval-faith";
  r.seed = 4;
  r.results["x"] = number(std::nan(""));
  r.results["y"] = number(0.25);
  const auto j = ojson::parse(r.dump());
  EXPECT_EQ(j["schema_version"], kReportSchemaVersion);
  EXPECT_TRUE(j["results"]["x"].is_null());
  EXPECT_EQ(j["results"]["y"], 0.25);
  EXPECT_EQ(r.dump(), r.dump());
}

TEST(ModelContainer, MinimalConvManifest) {
  const std::string m = R"({"format": "lcrp-model", "version": 1, "name": "one", "input_shape": [1, 2, 2],
    "head": {"kind": "segmentation", "num_classes": 1},
    "nodes": [{"id": "c", "op": "conv2d", "inputs": ["input"],
               "hyperparams": {"in_channels": 1, "out_channels": 1, "kernel": 1},
               "weights": {"kernel": {"offset": 0, "length": 1}}}]})";
  const Graph g = load_model(m, floats_to_bytes(std::vector<float>{2.0f}));
  ASSERT_EQ(g.size(), 1u);
  const Tensor x(Shape{1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  EXPECT_EQ(forward(g, x).output().vec(), (std::vector<float>{2, 4, 6, 8}));
}

TEST(Images, WhitePpmIsOnes) {
  const std::string ppm = "P6\n2 2\n255\n" + std::string(12, '\xff');
  EXPECT_EQ(decode_ppm(ppm).vec(), std::vector<float>(12, 1.0f));
}

TEST(Datasets, RoundTripKeepsAnnotations) {
  const auto dir = scratch_dir("dataset");
  FixtureSpec spec;
  spec.count = 6;
  spec.classes = {ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle};
  spec.rules = {BiasRule{0, std::nullopt, 2, 1.0}};
  const auto scenes = generate_scenes(spec);
  save_dataset(dir, spec, scenes);
  const auto back = load_dataset(dir);
  ASSERT_EQ(back.size(), scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    EXPECT_EQ(back[i].labels(), scenes[i].labels());
    ASSERT_EQ(back[i].objects.size(), scenes[i].objects.size());
    for (std::size_t k = 0; k < scenes[i].objects.size(); ++k) {
      EXPECT_EQ(back[i].objects[k].box, scenes[i].objects[k].box);
      EXPECT_EQ(back[i].objects[k].cls, scenes[i].objects[k].cls);
    }
    EXPECT_EQ(back[i].texture, scenes[i].texture);
    EXPECT_LE(max_abs_diff(back[i].image, scenes[i].image), 0.5f / 255.0f + 1e-6f);
  }
}

TEST(Datasets, BareImagesAndErrors) {
  const auto dir = scratch_dir("bare");
  write_image(dir / "b.ppm", Tensor(Shape{3, 2, 2}, 1.0f));
  write_image(dir / "a.ppm", Tensor(Shape{3, 2, 2}, 0.0f));
  const auto s = load_dataset(dir);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[0].image.sum(), 0.0);
  EXPECT_TRUE(s[0].objects.empty());
  EXPECT_THROW(load_dataset(dir / "missing"), ValidationError);
  write_file_atomic(dir / "dataset.json", "{\"format\": \"lcrp-dataset\", \"scenes\": [}");
  EXPECT_THROW(load_dataset(dir), ParseError);
}
