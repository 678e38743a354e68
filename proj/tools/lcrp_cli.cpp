#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "lcrp/lcrp.hpp"

namespace fs = std::filesystem;
using namespace lcrp;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::uint64_t seed = 0;
  int threads = 1;
  std::string out;
};

int to_int(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  int v = 0;
  try {
    v = std::stoi(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw UsageError(what + ": '" + s + "' is not an integer");
  return v;
}

double to_double(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw UsageError(what + ": '" + s + "' is not a number");
  return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

// "a=1,b=2,3" -> {a: "1", b: "2,3"}; bare items continue the previous value.
std::map<std::string, std::string> key_values(const std::string& s, const std::string& what) {
  std::map<std::string, std::string> kv;
  std::string last;
  for (const auto& part : split(s, ',')) {
    const auto eq = part.find('=');
    if (eq == std::string::npos) {
      if (last.empty() || part.empty()) throw UsageError(what + ": cannot parse '" + s + "'");
      kv[last] += "," + part;
      continue;
    }
    last = part.substr(0, eq);
    if (kv.count(last)) throw UsageError(what + ": '" + last + "' given twice");
    kv[last] = part.substr(eq + 1);
  }
  return kv;
}

void only_keys(const std::map<std::string, std::string>& kv, std::initializer_list<const char*> allowed,
               const std::string& what) {
  for (const auto& [k, v] : kv)
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return k == a; }))
      throw UsageError(what + ": unknown key '" + k + "'");
}

const std::string& need(const std::map<std::string, std::string>& kv, const char* key, const std::string& what) {
  const auto it = kv.find(key);
  if (it == kv.end()) throw UsageError(what + ": missing '" + key + "='");
  return it->second;
}

std::vector<int> int_list(const std::string& s, const std::string& what) {
  std::vector<int> v;
  for (const auto& p : split(s, ',')) v.push_back(to_int(p, what));
  return v;
}

Condition parse_condition(const std::string& s, const std::string& what) {
  const auto kv = key_values(s, what);
  only_keys(kv, {"layer", "channels"}, what);
  return Condition{need(kv, "layer", what), int_list(need(kv, "channels", what), what)};
}

// "auto" picks the model's own most confident prediction.
TargetSpec parse_target(const std::string& s, const Graph& g, const Tensor& image) {
  const HeadSpec& head = g.head();
  if (s == "auto") {
    const auto t = choose_target(head, forward(g, image).output(), TargetPolicy::Predicted);
    if (!t) throw TargetError("no predicted target on this input");
    return *t;
  }
  const auto colon = s.find(':');
  if (colon == std::string::npos) throw UsageError("--target: expected seg:... or det:...");
  const std::string kind = s.substr(0, colon);
  const auto kv = key_values(s.substr(colon + 1), "--target");
  if (kind == "seg") {
    only_keys(kv, {"class", "roi"}, "--target");
    if (head.kind != HeadKind::Segmentation) throw ValidationError("segmentation target on a detection model");
    SegTarget t{to_int(need(kv, "class", "--target"), "--target class")};
    if (kv.count("roi")) {
      Tensor roi = read_mask(kv.at("roi"));
      if (roi.shape()[0] != image.shape()[1] || roi.shape()[1] != image.shape()[2])
        throw ShapeError("roi mask " + roi.shape().str() + " does not match the image");
      t.roi = std::move(roi);
    }
    return t;
  }
  if (kind == "det") {
    only_keys(kv, {"box", "class"}, "--target");
    if (head.kind != HeadKind::Detection) throw ValidationError("detection target on a segmentation model");
    return DetTarget{to_int(need(kv, "box", "--target"), "--target box"),
                     to_int(need(kv, "class", "--target"), "--target class")};
  }
  throw UsageError("--target: unknown kind '" + kind + "'");
}

ojson target_json(const TargetSpec& t) {
  ojson j;
  if (const auto* s = std::get_if<SegTarget>(&t)) {
    j["kind"] = "seg";
    j["class"] = s->cls;
    j["roi"] = s->roi.has_value();
    j["weighting"] = s->weighting == Weighting::Uniform ? "uniform" : "confidence";
  } else {
    const auto& d = std::get<DetTarget>(t);
    j["kind"] = "det";
    j["box"] = d.box;
    j["class"] = d.cls;
  }
  return j;
}

ojson box_json(const Box& b) { return ojson::array({b.x0, b.y0, b.x1, b.y1}); }

ojson vec_json(const std::vector<double>& v) {
  ojson a = ojson::array();
  for (double x : v) a.push_back(number(x));
  return a;
}

void put(ojson& dst, const ojson& src) {
  for (const auto& [k, v] : src.items()) dst[k] = v;
}

Graph open_model(const std::string& path, bool raw, RunReport& rep) {
  Graph g = load_model_files(path);
  if (raw) return g;
  auto [canon, report] = canonize(g);
  ojson c;
  ojson fused = ojson::array();
  for (const auto& [lin, bn] : report.fused_pairs) fused.push_back(ojson::array({lin, bn}));
  c["fused"] = fused;
  c["standalone_batchnorms"] = report.standalone_batchnorms;
  c["sum_junctions"] = report.sum_junctions;
  rep.results["canonization"] = c;
  return std::move(canon);
}

void check_input(const Graph& g, const Tensor& x) {
  if (!(x.shape() == g.input_shape()))
    throw ShapeError("input " + x.shape().str() + " does not match model input " + g.input_shape().str());
}

std::vector<std::string> default_layers(const Graph& g) {
  std::vector<std::string> out;
  for (const auto& n : g.nodes())
    if (op_name(n.op) == "relu") out.push_back(n.id);
  return out;
}

std::vector<std::string> list_or(const std::string& s, std::vector<std::string> fallback) {
  if (s.empty()) return fallback;
  return split(s, ',');
}

std::vector<Tensor> images_of(const std::vector<FixtureScene>& scenes) {
  std::vector<Tensor> out;
  out.reserve(scenes.size());
  for (const auto& s : scenes) out.push_back(s.image);
  return out;
}

fs::path prepare_out(const Common& c) {
  fs::create_directories(c.out);
  return fs::path(c.out);
}

void finish(RunReport& rep, const Common& c, const fs::path& out) {
  rep.seed = c.seed;
  rep.write(out / "report.json");
}

// explain

struct ExplainArgs {
  std::string model, input, target, preset = "zplus-flat";
  std::vector<std::string> conditions;
  bool raw = false;
};

void run_explain(const ExplainArgs& a, const Common& c) {
  RunReport rep;
  rep.command = "explain";
  rep.config = {{"model", a.model}, {"input", a.input}, {"target", a.target}, {"preset", a.preset},
                {"conditions", a.conditions}, {"no_canonize", a.raw}};
  const Graph g = open_model(a.model, a.raw, rep);
  const Tensor x = read_image(a.input);
  check_input(g, x);
  const TargetSpec t = parse_target(a.target, g, x);
  std::vector<Condition> conds;
  for (const auto& s : a.conditions) conds.push_back(parse_condition(s, "--condition"));
  for (const auto& cd : conds)
    if (!g.contains(cd.layer)) throw ValidationError("unknown layer '" + cd.layer + "'");
  const auto rules = RuleAssignment::preset(a.preset);
  const fs::path out = prepare_out(c);

  const auto cache = forward(g, x);
  const auto q = TargetQuantity::make(g.head(), cache.output(), t);
  const Tensor init = target_init(g.head(), cache.output(), t);
  const auto res = attribute(g, cache, init, rules);
  write_heatmap(out / "heatmap.pgm", res.input_heatmap);

  rep.results["target"] = target_json(t);
  rep.results["quantity"] = number(q.evaluate(cache.output()));
  rep.results["heatmap"] = {{"file", "heatmap.pgm"},
                            {"raw", "heatmap.f32"},
                            {"sum", number(res.input_heatmap.sum())},
                            {"max_abs", number(res.input_heatmap.max_abs())},
                            {"init_sum", number(init.sum())}};
  ojson cj = ojson::array();
  for (std::size_t i = 0; i < conds.size(); ++i) {
    const auto r = attribute(g, cache, init, rules, ConditionSet{{conds[i]}});
    const std::string name = "condition_" + std::to_string(i) + ".pgm";
    write_heatmap(out / name, r.input_heatmap);
    const auto per_channel = channel_relevance(g, res, conds[i].layer);
    ojson ch = ojson::array();
    for (int k : conds[i].channels) ch.push_back(number(per_channel.at(static_cast<std::size_t>(k))));
    cj.push_back({{"layer", conds[i].layer},
                  {"channels", conds[i].channels},
                  {"file", name},
                  {"sum", number(r.input_heatmap.sum())},
                  {"channel_relevance", ch}});
  }
  rep.results["conditions"] = cj;
  finish(rep, c, out);
}

// refsamples

struct RefArgs {
  std::string model, data, layer, preset = "zplus-flat";
  int channel = 0, k = 8, cls = -1;
  double tau = 0.2;
  bool raw = false;
};

void run_refsamples(const RefArgs& a, const Common& c) {
  RunReport rep;
  rep.command = "refsamples";
  rep.config = {{"model", a.model}, {"data", a.data}, {"layer", a.layer}, {"channel", a.channel}, {"k", a.k},
                {"class", a.cls}, {"tau", a.tau}, {"no_canonize", a.raw}};
  const Graph g = open_model(a.model, a.raw, rep);
  const auto data = images_of(load_dataset(a.data));
  ReferenceOptions opt;
  opt.k = a.k;
  opt.tau = a.tau;
  opt.threads = c.threads;
  if (a.cls >= 0) {
    opt.policy = TargetPolicy::Fixed;
    opt.fixed_class = a.cls;
  }
  const auto set = collect_reference_samples(g, data, a.layer, a.channel, opt);
  const fs::path out = prepare_out(c);
  ojson entries = ojson::array();
  for (std::size_t i = 0; i < set.entries.size(); ++i) {
    const auto& e = set.entries[i];
    char stem[32];
    std::snprintf(stem, sizeof stem, "ref_%02zu", i);
    write_image(out / (std::string(stem) + ".ppm"), e.crop);
    write_mask(out / (std::string(stem) + ".mask.pgm"), e.mask);
    entries.push_back({{"rank", i},
                       {"sample", e.sample},
                       {"score", number(e.score)},
                       {"target", target_json(e.target)},
                       {"box", box_json(e.box)},
                       {"degenerate", e.degenerate},
                       {"crop", std::string(stem) + ".ppm"},
                       {"mask", std::string(stem) + ".mask.pgm"}});
  }
  put(rep.results, {{"layer", set.layer},
                 {"channel", set.channel},
                 {"entries", entries},
                 {"skipped", set.skipped},
                 {"no_prediction", set.no_prediction}});
  if (set.no_prediction) rep.warnings.push_back("no sample had a usable target");
  finish(rep, c, out);
}

// eval-faith

struct FaithArgs {
  std::string model, data, methods, layers, mode = "flip";
  int samples = 50;
  bool raw = false;
};

struct Usable {
  std::size_t index;
  TargetSpec target;
};

// Segmentation targets are weighted by their logits so relevance explains the
// quantity the curves track.
std::vector<Usable> usable_samples(const Graph& g, const std::vector<Tensor>& data, std::size_t limit,
                                   std::size_t& skipped) {
  std::vector<Usable> out;
  skipped = 0;
  for (std::size_t j = 0; j < data.size() && out.size() < limit; ++j) {
    auto t = choose_target(g.head(), forward(g, data[j]).output(), TargetPolicy::Predicted);
    if (!t) {
      ++skipped;
      continue;
    }
    if (auto* s = std::get_if<SegTarget>(&*t)) s->weighting = Weighting::Confidence;
    out.push_back({j, *t});
  }
  return out;
}

void run_eval_faith(const FaithArgs& a, const Common& c) {
  RunReport rep;
  rep.command = "eval-faith";
  const Graph g = open_model(a.model, a.raw, rep);
  std::vector<ScoreMethod> methods;
  for (const auto& m : list_or(a.methods, {"lrp-zplus", "lrp-gamma", "lrp-epsilon", "gradient", "max-act",
                                           "mean-act", "sum-act"}))
    methods.push_back(method_from_name(m));
  const auto layers = list_or(a.layers, default_layers(g));
  for (const auto& l : layers)
    if (!g.contains(l)) throw ValidationError("unknown layer '" + l + "'");
  const CurveMode mode = mode_from_name(a.mode);
  if (a.samples <= 0) throw UsageError("--samples must be positive");
  rep.config = {{"model", a.model}, {"data", a.data}, {"methods", ojson::array()}, {"layers", layers},
                {"mode", a.mode}, {"samples", a.samples}, {"no_canonize", a.raw}};
  for (auto m : methods) rep.config["methods"].push_back(method_name(m));

  const auto data = images_of(load_dataset(a.data));
  std::size_t skipped = 0;
  const auto items = usable_samples(g, data, static_cast<std::size_t>(a.samples), skipped);
  if (items.empty()) throw TargetError("no sample has a predicted target");
  const std::size_t M = methods.size(), L = layers.size();

  // curves[sample][layer][method], random baseline last
  const auto curves = parallel_map(items.size(), c.threads, [&](std::size_t s) {
    const auto& it = items[s];
    const auto cache = forward(g, data[it.index]);
    std::vector<std::vector<FaithfulnessCurve>> per_layer(L);
    for (std::size_t l = 0; l < L; ++l) {
      for (auto m : methods) {
        const auto sc = concept_scores(m, g, cache, it.target, layers[l]);
        per_layer[l].push_back(faithfulness_curve(g, cache, it.target, layers[l], sc, mode));
      }
      Rng rng = Rng::stream(c.seed, it.index * L + l);
      const int C = cache.value(g.index_of(layers[l])).shape()[0];
      per_layer[l].push_back(faithfulness_curve(g, cache, it.target, layers[l], random_scores(C, rng), mode));
    }
    return per_layer;
  });

  ojson res = ojson::object();
  const auto random_name = std::string("random");
  for (std::size_t m = 0; m <= M; ++m) {
    std::vector<FaithfulnessCurve> all;
    std::size_t wins = 0, pairs = 0;
    for (const auto& s : curves)
      for (std::size_t l = 0; l < L; ++l) {
        all.push_back(s[l][m]);
        if (m == M) continue;
        const auto am = curve_area(s[l][m]), ar = curve_area(s[l][M]);
        if (!am || !ar) continue;
        ++pairs;
        if (*am > *ar) ++wins;
      }
    const auto fs_ = faithfulness_score(all);
    ojson pl = ojson::object();
    for (const auto& [layer, v] : fs_.per_layer) pl[layer] = number(v);
    ojson mj = {{"score", number(fs_.score)}, {"per_layer", pl}, {"used", fs_.used}, {"skipped", fs_.skipped}};
    if (m < M) mj["beats_random"] = number(pairs ? static_cast<double>(wins) / static_cast<double>(pairs) : NAN);
    res[m < M ? std::string(method_name(methods[m])) : random_name] = mj;
  }
  put(rep.results, {{"mode", a.mode}, {"samples", items.size()}, {"skipped_samples", skipped}, {"methods", res}});
  if (items.size() < static_cast<std::size_t>(a.samples))
    rep.warnings.push_back("only " + std::to_string(items.size()) + " samples had a predicted target");
  finish(rep, c, prepare_out(c));
}

// eval-complexity

struct ComplexityArgs {
  std::string model, data, methods, layers;
  int samples = 50;
  bool raw = false;
};

void run_eval_complexity(const ComplexityArgs& a, const Common& c) {
  RunReport rep;
  rep.command = "eval-complexity";
  const Graph g = open_model(a.model, a.raw, rep);
  std::vector<ScoreMethod> methods;
  for (const auto& m : list_or(a.methods, {"lrp-zplus", "lrp-gamma", "lrp-epsilon", "gradient"}))
    methods.push_back(method_from_name(m));
  const auto layers = list_or(a.layers, default_layers(g));
  for (const auto& l : layers)
    if (!g.contains(l)) throw ValidationError("unknown layer '" + l + "'");
  if (a.samples <= 0) throw UsageError("--samples must be positive");
  rep.config = {{"model", a.model}, {"data", a.data}, {"methods", ojson::array()}, {"layers", layers},
                {"samples", a.samples}, {"no_canonize", a.raw}};
  for (auto m : methods) rep.config["methods"].push_back(method_name(m));

  const auto data = images_of(load_dataset(a.data));
  std::size_t skipped = 0;
  const auto items = usable_samples(g, data, static_cast<std::size_t>(a.samples), skipped);
  if (items.empty()) throw TargetError("no sample has a predicted target");

  // scores[sample][method][layer]
  const auto scores = parallel_map(items.size(), c.threads, [&](std::size_t s) {
    const auto cache = forward(g, data[items[s].index]);
    std::vector<std::vector<std::vector<double>>> v(methods.size());
    for (std::size_t m = 0; m < methods.size(); ++m)
      for (const auto& l : layers) v[m].push_back(concept_scores(methods[m], g, cache, items[s].target, l));
    return v;
  });
  const int K = g.head().num_classes;
  ojson res = ojson::object();
  for (std::size_t m = 0; m < methods.size(); ++m) {
    ojson per_layer = ojson::object();
    double sigma = 0, c80 = 0;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      std::vector<std::vector<std::vector<double>>> by_class(static_cast<std::size_t>(K));
      for (std::size_t s = 0; s < items.size(); ++s) {
        const int cls = std::visit([](const auto& t) { return t.cls; }, items[s].target);
        by_class[static_cast<std::size_t>(cls)].push_back(scores[s][m][l]);
      }
      const auto r = complexity_report(layers[l], by_class);
      sigma += r.sigma;
      c80 += r.concepts80;
      per_layer[layers[l]] = {{"sigma", number(r.sigma)},
                              {"concepts80", number(r.concepts80)},
                              {"sigma_per_class", vec_json(r.sigma_per_class)},
                              {"concepts80_per_class", vec_json(r.concepts80_per_class)},
                              {"excluded_classes", r.excluded_classes}};
    }
    const double n = static_cast<double>(layers.size());
    res[std::string(method_name(methods[m]))] = {
        {"sigma", number(sigma / n)}, {"concepts80", number(c80 / n)}, {"per_layer", per_layer}};
  }
  put(rep.results, {{"samples", items.size()}, {"skipped_samples", skipped}, {"methods", res}});
  finish(rep, c, prepare_out(c));
}

// context

struct ContextArgs {
  std::string model, data, layer, source = "all", preset = "zplus";
  int cls = -1, top_concepts = 50, top_samples = 15, sensitivity_samples = 60;
  bool raw = false;
};

void run_context(const ContextArgs& a, const Common& c) {
  RunReport rep;
  rep.command = "context";
  rep.config = {{"model", a.model}, {"data", a.data}, {"class", a.cls}, {"layer", a.layer}, {"source", a.source},
                {"top_concepts", a.top_concepts}, {"top_samples", a.top_samples},
                {"sensitivity_samples", a.sensitivity_samples}, {"preset", a.preset}, {"no_canonize", a.raw}};
  const Graph g = open_model(a.model, a.raw, rep);
  if (!g.contains(a.layer)) throw ValidationError("unknown layer '" + a.layer + "'");
  std::vector<ContextSource> sources;
  if (a.source == "all")
    sources = {ContextSource::Lcrp, ContextSource::LatentRelevance, ContextSource::LatentActivation};
  else
    sources = {source_from_name(a.source)};
  const auto scenes = load_dataset(a.data);
  if (std::all_of(scenes.begin(), scenes.end(), [](const FixtureScene& s) { return s.objects.empty(); }))
    throw ValidationError("context needs an annotated dataset (dataset.json with object masks)");
  const auto items = context_items(g, scenes, a.cls);
  if (items.empty()) throw TargetError("class not predicted: class " + std::to_string(a.cls) + " on " + a.data);
  ContextSuiteConfig cfg;
  cfg.top_concepts = a.top_concepts;
  cfg.top_samples = a.top_samples;
  cfg.sensitivity_samples = a.sensitivity_samples;
  cfg.seed = c.seed;
  cfg.threads = c.threads;
  cfg.preset = a.preset;
  const auto suite = run_context_suite(g, items, a.layer, cfg);

  ojson concepts = ojson::array();
  std::vector<double> S;
  std::vector<std::vector<double>> C(sources.size());
  for (const auto& cc : suite.concepts) {
    ojson ctx = ojson::object();
    for (std::size_t k = 0; k < sources.size(); ++k) {
      const double v = cc.context[static_cast<int>(sources[k])];
      ctx[std::string(source_name(sources[k]))] = number(v);
      C[k].push_back(v);
    }
    S.push_back(cc.sensitivity.value);
    concepts.push_back({{"channel", cc.channel},
                        {"rank", cc.rank},
                        {"mean_relevance", number(cc.mean_relevance)},
                        {"context", ctx},
                        {"context_samples", cc.context_samples},
                        {"sensitivity", number(cc.sensitivity.value)},
                        {"sensitivity_pairs", cc.sensitivity.pairs},
                        {"sensitivity_skipped", cc.sensitivity.skipped}});
  }
  ojson agreement = ojson::object();
  if (S.size() >= 2)
    for (std::size_t k = 0; k < sources.size(); ++k) {
      const auto e = evaluate_context(C[k], S);
      agreement[std::string(source_name(sources[k]))] = {{"rho", e.rho ? number(*e.rho) : ojson(nullptr)},
                                                         {"rmsd", number(e.rmsd)}};
    }
  else
    rep.warnings.push_back("fewer than two concepts; no agreement statistics");
  put(rep.results, {{"layer", suite.layer}, {"items", suite.items}, {"concepts", concepts}, {"agreement", agreement}});
  finish(rep, c, prepare_out(c));
}

// interact

struct InteractArgs {
  std::string model, input, target;
  std::vector<std::string> flips;
  bool raw = false;
};

void run_interact(const InteractArgs& a, const Common& c) {
  RunReport rep;
  rep.command = "interact";
  rep.config = {{"model", a.model}, {"input", a.input}, {"target", a.target}, {"flips", a.flips},
                {"no_canonize", a.raw}};
  const Graph g = open_model(a.model, a.raw, rep);
  const Tensor x = read_image(a.input);
  check_input(g, x);
  const TargetSpec t = parse_target(a.target, g, x);
  std::vector<Condition> flips;
  for (const auto& s : a.flips) flips.push_back(parse_condition(s, "--flip"));
  const auto r = flip_concepts_forward(g, x, flips, t);
  put(rep.results, {{"target", target_json(t)},
                 {"original", number(r.original)},
                 {"flipped", number(r.flipped)},
                 {"relative_delta", number(r.relative_delta)}});
  finish(rep, c, prepare_out(c));
}

// fixtures

struct GenArgs {
  int count = 100, image_size = 32, min_size = 8, max_size = 14, texture_channel = -1;
  double noise = 0.02;
  std::string classes = "disk,square", textures = "plain,stripes,dots";
  std::vector<std::string> bias;
};

FixtureSpec spec_from(const GenArgs& a, std::uint64_t seed) {
  FixtureSpec s;
  s.count = a.count;
  s.seed = seed;
  s.image_size = a.image_size;
  s.min_size = a.min_size;
  s.max_size = a.max_size;
  s.noise = a.noise;
  s.classes.clear();
  for (const auto& n : split(a.classes, ',')) s.classes.push_back(shape_from_name(n));
  s.textures.clear();
  for (const auto& n : split(a.textures, ',')) s.textures.push_back(texture_from_name(n));
  for (const auto& b : a.bias) {
    const auto kv = key_values(b, "--bias");
    only_keys(kv, {"class", "texture", "co", "p"}, "--bias");
    BiasRule r;
    r.cls = to_int(need(kv, "class", "--bias"), "--bias class");
    if (kv.count("texture")) r.texture = texture_from_name(kv.at("texture"));
    if (kv.count("co")) r.co_class = to_int(kv.at("co"), "--bias co");
    if (kv.count("p")) r.p = to_double(kv.at("p"), "--bias p");
    s.rules.push_back(r);
  }
  if (a.texture_channel >= 0) s.texture_channel = a.texture_channel;
  s.validate();
  return s;
}

void run_fixtures_gen(const GenArgs& a, const Common& c) {
  const FixtureSpec spec = spec_from(a, c.seed);
  const auto scenes = generate_scenes(spec);
  const fs::path out = prepare_out(c);
  save_dataset(out, spec, scenes);
  RunReport rep;
  rep.command = "fixtures gen";
  rep.config = spec_json(spec);
  std::size_t co = 0;
  std::vector<std::size_t> per_class(spec.classes.size(), 0);
  for (const auto& s : scenes) {
    co += s.cooccurrence;
    for (const auto& o : s.objects) ++per_class[static_cast<std::size_t>(o.cls)];
  }
  put(rep.results, {{"scenes", scenes.size()}, {"cooccurrence", co}, {"objects_per_class", per_class}});
  finish(rep, c, out);
}

struct TrainArgs {
  std::string preset = "det-small", data, eval_data;
  int epochs = 5, batch = 8, width = 8, classes = 0;
  double lr = 0.05;
  bool no_bias = false, no_batchnorm = false;
};

int dataset_classes(const std::string& dir, const std::vector<FixtureScene>& scenes) {
  const fs::path meta = fs::path(dir) / kDatasetFile;
  if (fs::exists(meta)) {
    const auto j = ojson::parse(read_file(meta));
    if (j.contains("spec") && j["spec"].contains("classes")) return static_cast<int>(j["spec"]["classes"].size());
  }
  int n = 0;
  for (const auto& s : scenes)
    for (const auto& o : s.objects) n = std::max(n, o.cls + 1);
  return n;
}

void run_fixtures_train(const TrainArgs& a, const Common& c) {
  const ToyPreset preset = toy_preset_from_name(a.preset);
  const auto scenes = load_dataset(a.data);
  if (std::all_of(scenes.begin(), scenes.end(), [](const FixtureScene& s) { return s.objects.empty(); }))
    throw ValidationError("training needs an annotated dataset");
  const int objects = a.classes > 0 ? a.classes : dataset_classes(a.data, scenes);
  ToyOptions opt;
  opt.width = a.width;
  opt.with_bias = !a.no_bias;
  opt.with_batchnorm = !a.no_batchnorm;
  opt.num_classes = preset == ToyPreset::SegSmall ? objects + 1 : objects;
  opt.image_size = scenes.front().image.shape()[1];
  Graph g = build_toy_model(preset, c.seed, opt);
  TrainConfig cfg;
  cfg.learning_rate = a.lr;
  cfg.epochs = a.epochs;
  cfg.batch_size = a.batch;
  cfg.seed = c.seed;
  const auto hist = train_fixture(g, scenes, cfg);

  const fs::path out = prepare_out(c);
  save_model_files(g, out / "model.json");
  RunReport rep;
  rep.command = "fixtures train";
  rep.config = {{"preset", a.preset}, {"data", a.data},     {"eval_data", a.eval_data}, {"epochs", a.epochs},
                {"lr", a.lr},         {"batch", a.batch},   {"width", a.width},         {"num_classes", opt.num_classes},
                {"bias", !a.no_bias}, {"batchnorm", !a.no_batchnorm}};
  ojson h = ojson::array();
  for (const auto& e : hist.epochs)
    h.push_back({{"epoch", e.epoch}, {"loss", number(e.loss)}, {"accuracy", number(e.accuracy)}, {"iou", number(e.iou)}});
  put(rep.results, {{"model", "model.json"}, {"weights", "model.bin"}, {"history", h}});
  if (!a.eval_data.empty()) {
    const auto held = load_dataset(a.eval_data);
    if (preset == ToyPreset::SegSmall) {
      const auto m = evaluate_segmentation(g, held);
      rep.results["eval"] = {{"pixel_accuracy", number(m.pixel_accuracy)},
                             {"mean_iou", number(m.mean_iou)},
                             {"foreground_iou", number(m.foreground_iou)}};
    } else {
      const auto m = evaluate_detection(g, held);
      rep.results["eval"] = {{"class_accuracy", number(m.class_accuracy)},
                             {"detected", number(m.detected)},
                             {"false_cells", number(m.false_cells)}};
    }
  }
  finish(rep, c, out);
}

// errors

int fail(const char* kind, int code, const std::string& message) {
  ojson e;
  e["error"] = {{"kind", kind}, {"exit_code", code}, {"message", message}};
  std::cerr << e.dump() << "\n";
  return code;
}

void add_common(CLI::App* sub, Common& c, bool out_required = true) {
  sub->add_option("--seed", c.seed, "Random seed");
  sub->add_option("--threads", c.threads, "Worker threads")->check(CLI::PositiveNumber);
  auto* o = sub->add_option("--out", c.out, "Output directory");
  if (out_required) o->required();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Concept-level relevance propagation for segmentation and detection models", "lcrp"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));
  Common c;

  ExplainArgs ex;
  auto* explain = app.add_subcommand("explain", "Heatmap and conditional heatmaps for one input");
  explain->add_option("--model", ex.model, "Model manifest")->required();
  explain->add_option("--input", ex.input, "Input image (PPM)")->required();
  explain->add_option("--target", ex.target, "seg:class=Y[,roi=mask.pgm], det:box=K,class=Y or auto")->required();
  explain->add_option("--preset", ex.preset, "Rule preset")->capture_default_str();
  explain->add_option("--condition", ex.conditions, "layer=ID,channels=a,b (repeatable)");
  explain->add_flag("--no-canonize", ex.raw, "Skip batch-norm fusion");
  add_common(explain, c);

  RefArgs rf;
  auto* refs = app.add_subcommand("refsamples", "Reference samples of one concept");
  refs->add_option("--model", rf.model, "Model manifest")->required();
  refs->add_option("--data", rf.data, "Dataset directory")->required();
  refs->add_option("--layer", rf.layer, "Concept layer")->required();
  refs->add_option("--channel", rf.channel, "Channel")->required();
  refs->add_option("--k", rf.k, "Samples to keep")->capture_default_str();
  refs->add_option("--class", rf.cls, "Fixed target class (default: predicted)");
  refs->add_option("--tau", rf.tau, "Localization threshold")->capture_default_str();
  refs->add_flag("--no-canonize", rf.raw, "Skip batch-norm fusion");
  add_common(refs, c);

  FaithArgs fa;
  auto* faith = app.add_subcommand("eval-faith", "Concept flipping / insertion curves");
  faith->add_option("--model", fa.model, "Model manifest")->required();
  faith->add_option("--data", fa.data, "Dataset directory")->required();
  faith->add_option("--methods", fa.methods, "Comma-separated score methods");
  faith->add_option("--layers", fa.layers, "Comma-separated layers (default: all ReLU outputs)");
  faith->add_option("--mode", fa.mode, "flip or insert")->capture_default_str();
  faith->add_option("--samples", fa.samples, "Samples with a predicted target")->capture_default_str();
  faith->add_flag("--no-canonize", fa.raw, "Skip batch-norm fusion");
  add_common(faith, c);

  ComplexityArgs ca;
  auto* cx = app.add_subcommand("eval-complexity", "Concept complexity of attributions");
  cx->add_option("--model", ca.model, "Model manifest")->required();
  cx->add_option("--data", ca.data, "Dataset directory")->required();
  cx->add_option("--methods", ca.methods, "Comma-separated score methods");
  cx->add_option("--layers", ca.layers, "Comma-separated layers (default: all ReLU outputs)");
  cx->add_option("--samples", ca.samples, "Samples with a predicted target")->capture_default_str();
  cx->add_flag("--no-canonize", ca.raw, "Skip batch-norm fusion");
  add_common(cx, c);

  ContextArgs co;
  auto* ctx = app.add_subcommand("context", "Context scores and background sensitivity");
  ctx->add_option("--model", co.model, "Model manifest")->required();
  ctx->add_option("--data", co.data, "Annotated dataset directory")->required();
  ctx->add_option("--class", co.cls, "Head class")->required();
  ctx->add_option("--layer", co.layer, "Concept layer")->required();
  ctx->add_option("--source", co.source, "lcrp, latent-rel, latent-act or all")->capture_default_str();
  ctx->add_option("--top-concepts", co.top_concepts, "Concepts per class")->capture_default_str();
  ctx->add_option("--top-samples", co.top_samples, "Samples per concept")->capture_default_str();
  ctx->add_option("--sensitivity-samples", co.sensitivity_samples, "Samples for the perturbation suite")
      ->capture_default_str();
  ctx->add_option("--preset", co.preset, "Rule preset")->capture_default_str();
  ctx->add_flag("--no-canonize", co.raw, "Skip batch-norm fusion");
  add_common(ctx, c);

  InteractArgs ia;
  auto* inter = app.add_subcommand("interact", "Flip concepts in the forward pass");
  inter->add_option("--model", ia.model, "Model manifest")->required();
  inter->add_option("--input", ia.input, "Input image (PPM)")->required();
  inter->add_option("--target", ia.target, "seg:class=Y[,roi=mask.pgm], det:box=K,class=Y or auto")->required();
  inter->add_option("--flip", ia.flips, "layer=ID,channels=a,b (repeatable)")->required();
  inter->add_flag("--no-canonize", ia.raw, "Skip batch-norm fusion");
  add_common(inter, c);

  auto* fix = app.add_subcommand("fixtures", "Synthetic datasets and toy models");
  fix->require_subcommand(1);
  GenArgs ga;
  auto* gen = fix->add_subcommand("gen", "Generate a fixture dataset");
  gen->add_option("--count", ga.count, "Scenes")->capture_default_str();
  gen->add_option("--image-size", ga.image_size, "Image side")->capture_default_str();
  gen->add_option("--min-size", ga.min_size, "Smallest object extent")->capture_default_str();
  gen->add_option("--max-size", ga.max_size, "Largest object extent")->capture_default_str();
  gen->add_option("--noise", ga.noise, "Pixel noise")->capture_default_str();
  gen->add_option("--classes", ga.classes, "Comma-separated shapes")->capture_default_str();
  gen->add_option("--textures", ga.textures, "Comma-separated background textures")->capture_default_str();
  gen->add_option("--bias", ga.bias, "class=K,texture=T|co=J,p=P (repeatable)");
  gen->add_option("--texture-channel", ga.texture_channel, "Fixed strong colour channel of textures (0-2)");
  add_common(gen, c);
  TrainArgs ta;
  auto* train = fix->add_subcommand("train", "Train a toy model on a fixture dataset");
  train->add_option("--preset", ta.preset, "seg-small or det-small")->capture_default_str();
  train->add_option("--data", ta.data, "Dataset directory")->required();
  train->add_option("--eval-data", ta.eval_data, "Held-out dataset directory");
  train->add_option("--epochs", ta.epochs, "Epochs")->capture_default_str();
  train->add_option("--lr", ta.lr, "Learning rate")->capture_default_str();
  train->add_option("--batch", ta.batch, "Batch size")->capture_default_str();
  train->add_option("--width", ta.width, "Base channel width")->capture_default_str();
  train->add_option("--classes", ta.classes, "Object classes (default: from the dataset)");
  train->add_flag("--no-bias", ta.no_bias, "Bias-free layers");
  train->add_flag("--no-batchnorm", ta.no_batchnorm, "No batch normalization");
  add_common(train, c);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", 1, e.what());
  }

  try {
    if (*explain) run_explain(ex, c);
    else if (*refs) run_refsamples(rf, c);
    else if (*faith) run_eval_faith(fa, c);
    else if (*cx) run_eval_complexity(ca, c);
    else if (*ctx) run_context(co, c);
    else if (*inter) run_interact(ia, c);
    else if (*gen) run_fixtures_gen(ga, c);
    else if (*train) run_fixtures_train(ta, c);
    return 0;
  } catch (const UsageError& e) {
    return fail("usage", 1, e.what());
  } catch (const TrainingError& e) {
    return fail("training", 3, e.what());
  } catch (const NumericalError& e) {
    return fail("numerical", 3, e.what());
  } catch (const TargetError& e) {
    return fail("target", 2, e.what());
  } catch (const ParseError& e) {
    return fail("parse", 2, e.what());
  } catch (const ValidationError& e) {
    return fail("validation", 2, e.what());
  } catch (const ojson::exception& e) {
    return fail("parse", 2, e.what());
  } catch (const fs::filesystem_error& e) {
    return fail("io", 2, e.what());
  } catch (const std::exception& e) {
    return fail("internal", 2, e.what());
  }
}
