#include "htcl/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace htcl {

using ordered_json = nlohmann::ordered_json;

std::int64_t Dataset::total_relations() const {
  std::int64_t n = 0;
  for (const auto& img : images) n += static_cast<std::int64_t>(img.relations.size());
  return n;
}

std::vector<double> union_visual(const SynthSceneGraph& scene, int subj, int obj) {
  const auto& a = scene.objects[static_cast<std::size_t>(subj)].visual;
  const auto& b = scene.objects[static_cast<std::size_t>(obj)].visual;
  std::vector<double> u(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) u[i] = a[i] + b[i];
  return u;
}

std::map<std::int64_t, int> build_image_index(const Dataset& d) {
  std::map<std::int64_t, int> idx;
  for (std::size_t i = 0; i < d.images.size(); ++i) idx[d.images[i].image_id] = static_cast<int>(i);
  return idx;
}

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

namespace {

template <class T>
T get_field(const nlohmann::json& j, const std::string& key, T fallback, bool required = false) {
  if (!j.contains(key)) {
    if (required) throw std::invalid_argument("gen config: missing field '" + key + "'");
    return fallback;
  }
  try {
    return j.at(key).get<T>();
  } catch (const std::exception&) {
    throw std::invalid_argument("gen config: field '" + key + "' has the wrong type");
  }
}

}  // namespace

GenConfig GenConfig::from_json_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    throw std::invalid_argument(std::string("gen config: invalid JSON: ") + e.what());
  }
  GenConfig c;
  c.num_images = get_field<int>(j, "num_images", c.num_images);
  c.num_test_images = get_field<int>(j, "num_test_images", c.num_test_images);
  c.num_obj_classes = get_field<int>(j, "N_obj", c.num_obj_classes);
  c.num_predicates = get_field<int>(j, "C", c.num_predicates);
  c.visual_dim = get_field<int>(j, "d_v", c.visual_dim);
  c.zipf_exponent = get_field<double>(j, "zipf_exponent", c.zipf_exponent);
  c.seed = get_field<std::uint64_t>(j, "seed", c.seed);
  c.min_objects = get_field<int>(j, "min_objects", c.min_objects);
  c.max_objects = get_field<int>(j, "max_objects", c.max_objects);
  c.max_relations = get_field<int>(j, "max_relations", c.max_relations);
  c.noise_sigma = get_field<double>(j, "noise_sigma", c.noise_sigma);
  c.predicate_proto_scale = get_field<double>(j, "predicate_proto_scale", c.predicate_proto_scale);
  c.object_proto_scale = get_field<double>(j, "object_proto_scale", c.object_proto_scale);
  c.object_jitter = get_field<double>(j, "object_jitter", c.object_jitter);
  c.parent_heads = get_field<int>(j, "parent_heads", c.parent_heads);
  c.tail_offset_scale = get_field<double>(j, "tail_offset_scale", c.tail_offset_scale);
  c.validate();
  return c;
}

GenConfig GenConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("gen config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

std::string GenConfig::to_json_text() const {
  ordered_json j;
  j["num_images"] = num_images;
  j["num_test_images"] = num_test_images;
  j["N_obj"] = num_obj_classes;
  j["C"] = num_predicates;
  j["d_v"] = visual_dim;
  j["zipf_exponent"] = zipf_exponent;
  j["seed"] = seed;
  j["min_objects"] = min_objects;
  j["max_objects"] = max_objects;
  j["max_relations"] = max_relations;
  j["noise_sigma"] = noise_sigma;
  j["predicate_proto_scale"] = predicate_proto_scale;
  j["object_proto_scale"] = object_proto_scale;
  j["object_jitter"] = object_jitter;
  j["parent_heads"] = parent_heads;
  j["tail_offset_scale"] = tail_offset_scale;
  return j.dump(2);
}

void GenConfig::validate() const {
  if (num_predicates < 2) throw std::invalid_argument("gen config: C must be >= 2");
  if (zipf_exponent <= 0) throw std::invalid_argument("gen config: zipf_exponent must be > 0");
  if (num_images < 0 || num_test_images < 0) throw std::invalid_argument("gen config: num_images must be >= 0");
  if (num_obj_classes < 1) throw std::invalid_argument("gen config: N_obj must be >= 1");
  if (visual_dim < 1) throw std::invalid_argument("gen config: d_v must be >= 1");
  if (min_objects < 2) throw std::invalid_argument("gen config: min_objects must be >= 2");
  if (max_objects < min_objects) throw std::invalid_argument("gen config: max_objects < min_objects");
  if (max_relations < 1) throw std::invalid_argument("gen config: max_relations must be >= 1");
  if (noise_sigma < 0) throw std::invalid_argument("gen config: noise_sigma must be >= 0");
  if (parent_heads < 0) throw std::invalid_argument("gen config: parent_heads must be >= 0");
  if (tail_offset_scale < 0) throw std::invalid_argument("gen config: tail_offset_scale must be >= 0");
}

// ---------------------------------------------------------------------------
// generation
// ---------------------------------------------------------------------------

namespace {

std::vector<double> zipf_cumulative(int classes, double exponent) {
  std::vector<double> cum(static_cast<std::size_t>(classes));
  double total = 0.0;
  for (int k = 0; k < classes; ++k) {
    total += 1.0 / std::pow(static_cast<double>(k + 1), exponent);
    cum[static_cast<std::size_t>(k)] = total;
  }
  for (double& c : cum) c /= total;
  cum.back() = 1.0;
  return cum;
}

int draw_from_cumulative(const std::vector<double>& cum, Rng& rng) {
  const double u = rng.uniform();
  const auto it = std::lower_bound(cum.begin(), cum.end(), u);
  return static_cast<int>(it - cum.begin());
}

std::vector<std::vector<double>> draw_prototypes(int count, int dim, double scale, Rng& rng) {
  std::vector<std::vector<double>> protos(static_cast<std::size_t>(count));
  for (auto& p : protos) {
    p.resize(static_cast<std::size_t>(dim));
    for (double& v : p) v = rng.normal(0.0, scale);
  }
  return protos;
}

SynthSceneGraph generate_image(const GenConfig& cfg, std::int64_t image_id,
                               const std::vector<std::vector<double>>& pred_protos,
                               const std::vector<std::vector<double>>& obj_protos,
                               const std::vector<double>& zipf_cum, Rng& rng) {
  SynthSceneGraph scene;
  scene.image_id = image_id;
  const int n = rng.uniform_int(cfg.min_objects, cfg.max_objects);
  scene.objects.resize(static_cast<std::size_t>(n));
  for (auto& o : scene.objects) {
    o.class_id = rng.uniform_int(0, cfg.num_obj_classes - 1);
    const double w = rng.uniform(0.05, 0.5);
    const double h = rng.uniform(0.05, 0.5);
    o.bbox.x1 = rng.uniform(0.0, 1.0 - w);
    o.bbox.x2 = o.bbox.x1 + w;
    o.bbox.y1 = rng.uniform(0.0, 1.0 - h);
    o.bbox.y2 = o.bbox.y1 + h;
    o.visual.resize(static_cast<std::size_t>(cfg.visual_dim));
    const auto& proto = obj_protos[static_cast<std::size_t>(o.class_id)];
    for (int d = 0; d < cfg.visual_dim; ++d)
      o.visual[static_cast<std::size_t>(d)] = proto[static_cast<std::size_t>(d)] + rng.normal(0.0, cfg.object_jitter);
  }

  // Relations use object-disjoint ordered pairs so each union feature
  // carries exactly one relation's evidence (bias effects then come from
  // class imbalance, not from entangled signals).
  std::vector<std::pair<int, int>> pairs;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i != j) pairs.emplace_back(i, j);
  rng.shuffle(pairs);
  const int want = rng.uniform_int(1, std::min(cfg.max_relations, n / 2));
  std::vector<std::pair<int, int>> chosen;
  std::vector<char> used(static_cast<std::size_t>(n), 0);
  for (const auto& p : pairs) {
    if (static_cast<int>(chosen.size()) >= want) break;
    if (!used[static_cast<std::size_t>(p.first)] && !used[static_cast<std::size_t>(p.second)]) {
      chosen.push_back(p);
      used[static_cast<std::size_t>(p.first)] = used[static_cast<std::size_t>(p.second)] = 1;
    }
  }

  for (const auto& [si, oi] : chosen) {
    SceneRelation rel;
    rel.subj = si;
    rel.obj = oi;
    rel.predicate = draw_from_cumulative(zipf_cum, rng);
    const auto& proto = pred_protos[static_cast<std::size_t>(rel.predicate)];
    for (int d = 0; d < cfg.visual_dim; ++d) {
      const double ev = proto[static_cast<std::size_t>(d)] + rng.normal(0.0, cfg.noise_sigma);
      scene.objects[static_cast<std::size_t>(si)].visual[static_cast<std::size_t>(d)] += 0.5 * ev;
      scene.objects[static_cast<std::size_t>(oi)].visual[static_cast<std::size_t>(d)] += 0.5 * ev;
    }
    scene.relations.push_back(rel);
  }
  return scene;
}

}  // namespace

GenerateResult generate(const GenConfig& cfg) {
  cfg.validate();
  Rng base(cfg.seed);
  Rng proto_rng = base.fork("prototypes");
  auto pred_protos = draw_prototypes(cfg.num_predicates, cfg.visual_dim, cfg.predicate_proto_scale, proto_rng);
  // class ids are ordered by frequency; the rarer half sits near a parent
  // from the most frequent classes, offset by a smaller displacement
  const int parents = std::min(cfg.parent_heads, cfg.num_predicates / 2);
  if (parents > 0) {
    for (int k = cfg.num_predicates / 2; k < cfg.num_predicates; ++k) {
      const int parent = k % parents;
      for (int d = 0; d < cfg.visual_dim; ++d)
        pred_protos[static_cast<std::size_t>(k)][static_cast<std::size_t>(d)] =
            pred_protos[static_cast<std::size_t>(parent)][static_cast<std::size_t>(d)] +
            proto_rng.normal(0.0, cfg.tail_offset_scale);
    }
  }
  const auto obj_protos = draw_prototypes(cfg.num_obj_classes, cfg.visual_dim, cfg.object_proto_scale, proto_rng);
  const auto zipf_cum = zipf_cumulative(cfg.num_predicates, cfg.zipf_exponent);

  GenerateResult out;
  const DatasetMeta meta{cfg.num_predicates, cfg.num_obj_classes, cfg.visual_dim, cfg.seed};
  out.train.meta = meta;
  out.test.meta = meta;

  Rng train_rng = base.fork("train");
  for (int i = 0; i < cfg.num_images; ++i)
    out.train.images.push_back(generate_image(cfg, i, pred_protos, obj_protos, zipf_cum, train_rng));
  Rng test_rng = base.fork("test");
  for (int i = 0; i < cfg.num_test_images; ++i)
    out.test.images.push_back(
        generate_image(cfg, cfg.num_images + i, pred_protos, obj_protos, zipf_cum, test_rng));

  std::vector<std::int64_t> counts(static_cast<std::size_t>(cfg.num_predicates), 0);
  for (const auto& img : out.train.images)
    for (const auto& rel : img.relations) counts[static_cast<std::size_t>(rel.predicate)]++;
  for (int c = 0; c < cfg.num_predicates; ++c)
    if (counts[static_cast<std::size_t>(c)] == 0) out.empty_classes.push_back(c);
  return out;
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

void save_dataset(const Dataset& d, const std::string& path) {
  ordered_json j;
  j["meta"] = {{"C", d.meta.num_predicates},
               {"N_obj", d.meta.num_obj_classes},
               {"d_v", d.meta.visual_dim},
               {"seed", d.meta.seed}};
  ordered_json images = ordered_json::array();
  for (const auto& img : d.images) {
    ordered_json objects = ordered_json::array();
    for (const auto& o : img.objects) {
      objects.push_back({{"class_id", o.class_id},
                         {"bbox", {o.bbox.x1, o.bbox.y1, o.bbox.x2, o.bbox.y2}},
                         {"visual", o.visual}});
    }
    ordered_json relations = ordered_json::array();
    for (const auto& r : img.relations) {
      relations.push_back({{"subj", r.subj}, {"obj", r.obj}, {"predicate", r.predicate}});
    }
    images.push_back({{"image_id", img.image_id}, {"objects", objects}, {"relations", relations}});
  }
  j["images"] = std::move(images);
  std::ofstream outf(path, std::ios::binary);
  if (!outf) throw std::runtime_error("save_dataset: cannot open '" + path + "' for writing");
  outf << j.dump(1) << "\n";
}

namespace {

[[noreturn]] void load_error(std::int64_t image_id, const std::string& path, const std::string& what) {
  std::ostringstream os;
  os << "dataset load: ";
  if (image_id >= 0) os << "image_id " << image_id << " ";
  os << "at " << path << ": " << what;
  throw std::invalid_argument(os.str());
}

}  // namespace

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("load_dataset: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw std::invalid_argument("load_dataset: invalid JSON in '" + path + "': " + e.what());
  }

  Dataset d;
  if (!j.contains("meta")) load_error(-1, "meta", "missing");
  const auto& meta = j["meta"];
  for (const char* key : {"C", "N_obj", "d_v", "seed"})
    if (!meta.contains(key) || !meta[key].is_number())
      load_error(-1, std::string("meta.") + key, "missing or not a number");
  d.meta.num_predicates = meta["C"].get<int>();
  d.meta.num_obj_classes = meta["N_obj"].get<int>();
  d.meta.visual_dim = meta["d_v"].get<int>();
  d.meta.seed = meta["seed"].get<std::uint64_t>();
  if (d.meta.num_predicates < 1) load_error(-1, "meta.C", "must be >= 1");
  if (d.meta.num_obj_classes < 1) load_error(-1, "meta.N_obj", "must be >= 1");
  if (d.meta.visual_dim < 1) load_error(-1, "meta.d_v", "must be >= 1");

  if (!j.contains("images") || !j["images"].is_array()) load_error(-1, "images", "missing or not an array");
  int img_i = 0;
  for (const auto& ji : j["images"]) {
    const std::string base = "images[" + std::to_string(img_i) + "]";
    if (!ji.contains("image_id") || !ji["image_id"].is_number_integer())
      load_error(-1, base + ".image_id", "missing or not an integer");
    SynthSceneGraph scene;
    scene.image_id = ji["image_id"].get<std::int64_t>();

    if (!ji.contains("objects") || !ji["objects"].is_array() || ji["objects"].empty())
      load_error(scene.image_id, base + ".objects", "must be a non-empty array");
    int obj_i = 0;
    for (const auto& jo : ji["objects"]) {
      const std::string opath = base + ".objects[" + std::to_string(obj_i) + "]";
      SceneObject o;
      if (!jo.contains("class_id") || !jo["class_id"].is_number_integer())
        load_error(scene.image_id, opath + ".class_id", "missing or not an integer");
      o.class_id = jo["class_id"].get<int>();
      if (o.class_id < 0 || o.class_id >= d.meta.num_obj_classes)
        load_error(scene.image_id, opath + ".class_id", "out of range [0, N_obj)");
      if (!jo.contains("bbox") || !jo["bbox"].is_array() || jo["bbox"].size() != 4)
        load_error(scene.image_id, opath + ".bbox", "must be an array of 4 numbers");
      const auto& bb = jo["bbox"];
      for (int k = 0; k < 4; ++k) {
        if (!bb[static_cast<std::size_t>(k)].is_number())
          load_error(scene.image_id, opath + ".bbox", "entries must be numbers");
        const double v = bb[static_cast<std::size_t>(k)].get<double>();
        if (!(v >= 0.0 && v <= 1.0)) load_error(scene.image_id, opath + ".bbox", "coordinates must lie in [0,1]");
      }
      o.bbox = {bb[0].get<double>(), bb[1].get<double>(), bb[2].get<double>(), bb[3].get<double>()};
      if (!(o.bbox.x1 < o.bbox.x2)) load_error(scene.image_id, opath + ".bbox", "x1 must be < x2");
      if (!(o.bbox.y1 < o.bbox.y2)) load_error(scene.image_id, opath + ".bbox", "y1 must be < y2");
      if (!jo.contains("visual") || !jo["visual"].is_array() ||
          static_cast<int>(jo["visual"].size()) != d.meta.visual_dim)
        load_error(scene.image_id, opath + ".visual", "must be an array of d_v numbers");
      o.visual.reserve(static_cast<std::size_t>(d.meta.visual_dim));
      for (const auto& v : jo["visual"]) {
        const double x = v.get<double>();
        if (!std::isfinite(x)) load_error(scene.image_id, opath + ".visual", "non-finite entry");
        o.visual.push_back(x);
      }
      scene.objects.push_back(std::move(o));
      ++obj_i;
    }

    if (ji.contains("relations")) {
      if (!ji["relations"].is_array()) load_error(scene.image_id, base + ".relations", "must be an array");
      int rel_i = 0;
      for (const auto& jr : ji["relations"]) {
        const std::string rpath = base + ".relations[" + std::to_string(rel_i) + "]";
        SceneRelation r;
        for (const char* key : {"subj", "obj", "predicate"})
          if (!jr.contains(key) || !jr[key].is_number_integer())
            load_error(scene.image_id, rpath + "." + key, "missing or not an integer");
        r.subj = jr["subj"].get<int>();
        r.obj = jr["obj"].get<int>();
        r.predicate = jr["predicate"].get<int>();
        const int n = static_cast<int>(scene.objects.size());
        if (r.subj < 0 || r.subj >= n) load_error(scene.image_id, rpath + ".subj", "object index out of range");
        if (r.obj < 0 || r.obj >= n) load_error(scene.image_id, rpath + ".obj", "object index out of range");
        if (r.subj == r.obj) load_error(scene.image_id, rpath, "subj == obj");
        if (r.predicate < 0 || r.predicate >= d.meta.num_predicates)
          load_error(scene.image_id, rpath + ".predicate", "out of range [0, C)");
        scene.relations.push_back(r);
        ++rel_i;
      }
    }
    d.images.push_back(std::move(scene));
    ++img_i;
  }
  return d;
}

// ---------------------------------------------------------------------------
// class statistics and balanced resampling
// ---------------------------------------------------------------------------

double effective_number_weight(double beta, std::int64_t n) {
  if (n < 1) throw std::invalid_argument("effective_number_weight: n must be >= 1");
  // beta^n by binary exponentiation keeps results independent of libm pow
  double result = 1.0;
  double base = beta;
  std::int64_t e = n;
  while (e > 0) {
    if (e & 1) result *= base;
    base *= base;
    e >>= 1;
  }
  return (1.0 - beta) / (1.0 - result);
}

bool ClassStats::is_head(int class_id) const {
  return std::find(head_set.begin(), head_set.end(), class_id) != head_set.end();
}

ClassStats class_stats(const Dataset& split, double beta, int h) {
  if (!(beta > 0.0 && beta < 1.0)) throw std::invalid_argument("class_stats: beta must be in (0,1)");
  const int classes = split.meta.num_predicates;
  if (h < 1 || h > classes) throw std::invalid_argument("class_stats: h must be in [1, C]");

  ClassStats st;
  st.counts.assign(static_cast<std::size_t>(classes), 0);
  for (const auto& img : split.images)
    for (const auto& rel : img.relations) st.counts[static_cast<std::size_t>(rel.predicate)]++;

  st.order.resize(static_cast<std::size_t>(classes));
  for (int c = 0; c < classes; ++c) st.order[static_cast<std::size_t>(c)] = c;
  std::sort(st.order.begin(), st.order.end(), [&](int a, int b) {
    if (st.counts[static_cast<std::size_t>(a)] != st.counts[static_cast<std::size_t>(b)])
      return st.counts[static_cast<std::size_t>(a)] > st.counts[static_cast<std::size_t>(b)];
    return a < b;
  });
  st.head_set.assign(st.order.begin(), st.order.begin() + h);

  st.weights.assign(static_cast<std::size_t>(classes), 0.0);
  double max_observed = 0.0;
  bool any = false;
  for (int c = 0; c < classes; ++c) {
    if (st.counts[static_cast<std::size_t>(c)] >= 1) {
      const double w = effective_number_weight(beta, st.counts[static_cast<std::size_t>(c)]);
      st.weights[static_cast<std::size_t>(c)] = w;
      max_observed = std::max(max_observed, w);
      any = true;
    }
  }
  for (int c = 0; c < classes; ++c) {
    if (st.counts[static_cast<std::size_t>(c)] == 0) {
      st.weights[static_cast<std::size_t>(c)] = any ? max_observed : 1.0;
      st.empty_classes.push_back(c);
    }
  }
  return st;
}

BalancedIndex balanced_resample(const Dataset& split, int target, std::uint64_t seed) {
  if (target < 1) throw std::invalid_argument("balanced_resample: target must be >= 1");
  if (split.total_relations() == 0) throw std::invalid_argument("balanced_resample: empty split");

  const int classes = split.meta.num_predicates;
  std::vector<std::vector<SampleRef>> pools(static_cast<std::size_t>(classes));
  for (const auto& img : split.images) {
    for (std::size_t ri = 0; ri < img.relations.size(); ++ri) {
      pools[static_cast<std::size_t>(img.relations[ri].predicate)].push_back(
          {img.image_id, static_cast<int>(ri)});
    }
  }

  BalancedIndex out;
  out.target = target;
  out.per_class.resize(static_cast<std::size_t>(classes));
  Rng rng(seed);
  Rng pick = rng.fork("resample");
  for (int c = 0; c < classes; ++c) {
    auto& pool = pools[static_cast<std::size_t>(c)];
    if (pool.empty()) {
      out.missing_classes.push_back(c);
      continue;
    }
    auto& dst = out.per_class[static_cast<std::size_t>(c)];
    const int n = static_cast<int>(pool.size());
    if (n >= target) {
      pick.shuffle(pool);
      dst.assign(pool.begin(), pool.begin() + target);
    } else {
      dst.reserve(static_cast<std::size_t>(target));
      for (int i = 0; i < target; ++i) dst.push_back(pool[static_cast<std::size_t>(pick.uniform_int(0, n - 1))]);
    }
    out.order.insert(out.order.end(), dst.begin(), dst.end());
  }
  Rng shuf = rng.fork("order");
  shuf.shuffle(out.order);
  return out;
}

}  // namespace htcl
