#pragma once

#include <set>
#include <string>
#include <utility>
#include <vector>

#include "htcl/data.hpp"
#include "htcl/graph.hpp"

namespace htcl {

enum class Task { PredCls, SGCls };
enum class BranchMode { HpOnly, TpfrOnly, Full };

std::string to_string(Task t);
std::string to_string(BranchMode m);
Task task_from_string(const std::string& s);
BranchMode branch_mode_from_string(const std::string& s);

struct ModelConfig {
  int num_obj_classes = 10;
  int num_predicates = 20;
  int visual_dim = 32;
  int embed_dim = 32;
  int pos_dim = 16;
  int object_dim = 64;     // object feature f
  int context_dim = 64;    // context-aware feature e
  int predicate_dim = 64;  // predicate features r and r^t
  int model_dim = 64;      // TPFE token width
  int tpfe_layers = 4;
  int heads = 4;
  int ffn_dim = 128;
  int proj_dim = 64;  // hypersphere dimension
  bool use_tpfe = true;
  BranchMode branch_mode = BranchMode::Full;
  Task task = Task::PredCls;

  bool has_tpfr() const { return branch_mode != BranchMode::HpOnly; }
  void validate() const;
};

/// Per-scene forward outputs. Relation-level values are invalid when the
/// scene has no candidate pairs; TPFR-branch values are invalid in
/// hp-only mode.
struct SceneForward {
  std::vector<int> predicted_obj_labels;  // \hat c^l fed into embeddings
  Value f;                                // n x object_dim
  Value e;                                // n x context_dim
  Value label_logits;                     // n x N_obj
  Value r;                                // m x d_r
  Value z_h;                              // m x C
  Value s;                                // m x 3*embed_dim
  Value tokens;                           // m x model_dim (pre-TPFE g_k)
  Value r_t;                              // m x d_r
  Value z_t;                              // m x C
  Value z_o;                              // m x C
  Value p_hat;                            // prediction probabilities for this branch mode
};

class HtclModel {
public:
  explicit HtclModel(ModelConfig cfg);
  const ModelConfig& config() const { return cfg_; }

  /// Registers every learnable tensor for the configured branch mode.
  void init_params(ParamStore& store, Rng& rng) const;

  SceneForward forward(Graph& g, ParamStore& store, const SynthSceneGraph& scene,
                       const std::vector<std::pair<int, int>>& pairs) const;

  /// TPFE stack plus output projection (tokens m x model_dim -> m x d_r).
  Value tpfe_encode(Graph& g, ParamStore& store, Value tokens) const;
  /// g_k = MLP([s_k, r_k]) token construction.
  Value predicate_tokens(Graph& g, ParamStore& store, Value s, Value r) const;
  /// Projection head onto the unit hypersphere.
  Value project_to_sphere(Graph& g, ParamStore& store, Value feats) const;
  /// Semantic representation s = [emb(c_i), softmax(z_h)-weighted predicate
  /// embedding, emb(c_j)].
  Value semantic_rep(Graph& g, ParamStore& store, Value z_h, const std::vector<int>& subj_labels,
                     const std::vector<int>& obj_labels) const;
  /// Componentwise convex combination of the normalized branch predictions.
  Value cooperate(Graph& g, ParamStore& store, Value z_h, Value z_t) const;

  /// Initial class gate c_i = ln(max(n_i, 1)).
  static Tensor init_gate_values(const ClassStats& stats);

  std::set<std::string> classifier_param_names(bool tail_classifier) const;

private:
  ModelConfig cfg_;
  Value encoder_layer(Graph& g, ParamStore& store, Value x, const std::string& prefix) const;
  void init_encoder_layer(ParamStore& store, Rng& rng, const std::string& prefix, int dim, int ffn) const;
};

}  // namespace htcl
