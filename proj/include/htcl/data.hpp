#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "htcl/rng.hpp"

namespace htcl {

struct BBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

struct SceneObject {
  int class_id = 0;
  BBox bbox;
  std::vector<double> visual;
};

struct SceneRelation {
  int subj = 0;
  int obj = 0;
  int predicate = 0;
};

/// One image: ground-truth objects and predicate-labelled relations.
struct SynthSceneGraph {
  std::int64_t image_id = 0;
  std::vector<SceneObject> objects;
  std::vector<SceneRelation> relations;
};

struct DatasetMeta {
  int num_predicates = 0;   // C
  int num_obj_classes = 0;  // N_obj
  int visual_dim = 0;       // d_v
  std::uint64_t seed = 0;
};

struct Dataset {
  DatasetMeta meta;
  std::vector<SynthSceneGraph> images;
  std::int64_t total_relations() const;
};

/// Union visual evidence of an ordered object pair. The generator injects
/// each relation's evidence into the subject and object visuals, so their
/// sum carries the full predicate signal.
std::vector<double> union_visual(const SynthSceneGraph& scene, int subj, int obj);

std::map<std::int64_t, int> build_image_index(const Dataset& d);

// ---------------------------------------------------------------------------

struct GenConfig {
  int num_images = 2000;
  int num_test_images = 500;
  int num_obj_classes = 10;  // N_obj
  int num_predicates = 20;   // C
  int visual_dim = 32;       // d_v
  double zipf_exponent = 1.5;
  std::uint64_t seed = 42;
  int min_objects = 4;
  int max_objects = 7;
  int max_relations = 4;
  double noise_sigma = 0.5;
  double predicate_proto_scale = 0.4;
  double object_proto_scale = 0.2;
  double object_jitter = 0.05;
  // Rare predicates are fine-grained satellites of coarse frequent ones
  // (the long-tail structure of real predicate vocabularies): the rarer
  // half of the classes take a frequent parent's prototype plus an offset.
  int parent_heads = 3;
  double tail_offset_scale = 0.2;

  static GenConfig from_json_file(const std::string& path);
  static GenConfig from_json_text(const std::string& text);
  std::string to_json_text() const;
  void validate() const;
};

struct GenerateResult {
  Dataset train;
  Dataset test;
  std::vector<int> empty_classes;  // predicate classes unseen in the train split
};

/// Deterministic synthetic long-tail scene-graph generation. Predicate labels
/// follow a Zipf distribution; each relation's visual evidence is its class
/// prototype plus Gaussian noise, injected into the endpoint visuals.
GenerateResult generate(const GenConfig& config);

void save_dataset(const Dataset& d, const std::string& path);
Dataset load_dataset(const std::string& path);

// ---------------------------------------------------------------------------

struct ClassStats {
  std::vector<std::int64_t> counts;  // n_i per predicate class
  std::vector<int> order;            // class ids by descending count, ties to lower id
  std::vector<int> head_set;         // top-h class ids
  std::vector<double> weights;       // effective-number weights
  std::vector<int> empty_classes;    // classes with n_i == 0 (weight substituted)
  bool is_head(int class_id) const;
};

/// Effective-number class weight (1-beta) / (1-beta^n); beta^n computed by
/// binary exponentiation so results do not depend on libm pow.
double effective_number_weight(double beta, std::int64_t n);

ClassStats class_stats(const Dataset& split, double beta, int h);

struct SampleRef {
  std::int64_t image_id = 0;
  int relation_index = 0;
};

struct BalancedIndex {
  int target = 0;                                // T
  std::vector<std::vector<SampleRef>> per_class;  // exactly T refs per observed class
  std::vector<SampleRef> order;                   // all refs, shuffled
  std::vector<int> missing_classes;               // n_i == 0, absent from the index
};

/// Class-balanced resampling: undersample (without replacement) classes with
/// n >= target, oversample (with replacement) classes with 1 <= n < target.
BalancedIndex balanced_resample(const Dataset& split, int target, std::uint64_t seed);

}  // namespace htcl
