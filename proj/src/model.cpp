#include "htcl/model.hpp"

#include <cmath>
#include <stdexcept>

namespace htcl {

std::string to_string(Task t) { return t == Task::PredCls ? "predcls" : "sgcls"; }

std::string to_string(BranchMode m) {
  switch (m) {
    case BranchMode::HpOnly:
      return "hp_only";
    case BranchMode::TpfrOnly:
      return "tpfr_only";
    default:
      return "full";
  }
}

Task task_from_string(const std::string& s) {
  if (s == "predcls") return Task::PredCls;
  if (s == "sgcls") return Task::SGCls;
  throw std::invalid_argument("unknown task '" + s + "' (expected predcls|sgcls)");
}

BranchMode branch_mode_from_string(const std::string& s) {
  if (s == "hp_only") return BranchMode::HpOnly;
  if (s == "tpfr_only") return BranchMode::TpfrOnly;
  if (s == "full") return BranchMode::Full;
  throw std::invalid_argument("unknown branch_mode '" + s + "' (expected hp_only|tpfr_only|full)");
}

void ModelConfig::validate() const {
  if (num_obj_classes < 1 || num_predicates < 2) throw std::invalid_argument("model config: bad class counts");
  for (const int d : {visual_dim, embed_dim, pos_dim, object_dim, context_dim, predicate_dim, model_dim,
                      ffn_dim, proj_dim})
    if (d < 1) throw std::invalid_argument("model config: dimensions must be positive");
  if (tpfe_layers < 1) throw std::invalid_argument("model config: tpfe_layers must be >= 1");
  if (heads < 1 || context_dim % heads != 0 || model_dim % heads != 0)
    throw std::invalid_argument("model config: heads must divide context_dim and model_dim");
}

HtclModel::HtclModel(ModelConfig cfg) : cfg_(cfg) { cfg_.validate(); }

void HtclModel::init_encoder_layer(ParamStore& store, Rng& rng, const std::string& prefix, int dim,
                                   int ffn) const {
  for (const char* n : {"wq", "wk", "wv", "wo"})
    store.add(prefix + ".attn." + n, init_linear_weight(dim, dim, rng));
  for (const char* n : {"bq", "bk", "bv", "bo"}) store.add(prefix + ".attn." + n, Tensor::zeros({1, dim}));
  store.add(prefix + ".ln1g", Tensor::full({1, dim}, 1.0));
  store.add(prefix + ".ln1b", Tensor::zeros({1, dim}));
  store.add(prefix + ".ffw1", init_linear_weight(dim, ffn, rng));
  store.add(prefix + ".ffb1", Tensor::zeros({1, ffn}));
  store.add(prefix + ".ffw2", init_linear_weight(ffn, dim, rng));
  store.add(prefix + ".ffb2", Tensor::zeros({1, dim}));
  store.add(prefix + ".ln2g", Tensor::full({1, dim}, 1.0));
  store.add(prefix + ".ln2b", Tensor::zeros({1, dim}));
}

Value HtclModel::encoder_layer(Graph& g, ParamStore& store, Value x, const std::string& prefix) const {
  EncoderLayerParams p;
  p.attn = {g.param(store, prefix + ".attn.wq"), g.param(store, prefix + ".attn.bq"),
            g.param(store, prefix + ".attn.wk"), g.param(store, prefix + ".attn.bk"),
            g.param(store, prefix + ".attn.wv"), g.param(store, prefix + ".attn.bv"),
            g.param(store, prefix + ".attn.wo"), g.param(store, prefix + ".attn.bo")};
  p.ln1_g = g.param(store, prefix + ".ln1g");
  p.ln1_b = g.param(store, prefix + ".ln1b");
  p.ff_w1 = g.param(store, prefix + ".ffw1");
  p.ff_b1 = g.param(store, prefix + ".ffb1");
  p.ff_w2 = g.param(store, prefix + ".ffw2");
  p.ff_b2 = g.param(store, prefix + ".ffb2");
  p.ln2_g = g.param(store, prefix + ".ln2g");
  p.ln2_b = g.param(store, prefix + ".ln2b");
  return transformer_encoder_layer(x, p, cfg_.heads);
}

void HtclModel::init_params(ParamStore& store, Rng& rng) const {
  const ModelConfig& c = cfg_;
  // object-class table has one extra row: the unknown-label embedding used
  // for the detector-free initial label under SGCls
  store.add("emb.obj", init_embedding(c.num_obj_classes + 1, c.embed_dim, rng));
  store.add("emb.pred", init_embedding(c.num_predicates, c.embed_dim, rng));
  store.add("pos.w", init_linear_weight(4, c.pos_dim, rng));
  store.add("pos.b", Tensor::zeros({1, c.pos_dim}));

  const int oe_in = c.visual_dim + c.pos_dim + c.embed_dim;
  store.add("oe.w1", init_linear_weight(oe_in, c.object_dim, rng));
  store.add("oe.b1", Tensor::zeros({1, c.object_dim}));
  store.add("oe.w2", init_linear_weight(c.object_dim, c.object_dim, rng));
  store.add("oe.b2", Tensor::zeros({1, c.object_dim}));
  store.add("obj_head.w", init_linear_weight(c.object_dim, c.num_obj_classes, rng));
  store.add("obj_head.b", Tensor::zeros({1, c.num_obj_classes}));

  const int pe_in = c.visual_dim + c.object_dim + c.embed_dim;
  store.add("pe.proj.w", init_linear_weight(pe_in, c.context_dim, rng));
  store.add("pe.proj.b", Tensor::zeros({1, c.context_dim}));
  init_encoder_layer(store, rng, "pe.l0", c.context_dim, c.ffn_dim);

  const int pd_in = 2 * c.context_dim + c.visual_dim;
  store.add("pd.w1", init_linear_weight(pd_in, c.ffn_dim, rng));
  store.add("pd.b1", Tensor::zeros({1, c.ffn_dim}));
  store.add("pd.w2", init_linear_weight(c.ffn_dim, c.predicate_dim, rng));
  store.add("pd.b2", Tensor::zeros({1, c.predicate_dim}));

  store.add("hpc.w", init_linear_weight(c.predicate_dim, c.num_predicates, rng));
  store.add("hpc.b", Tensor::zeros({1, c.num_predicates}));

  if (!c.has_tpfr()) return;

  const int tok_in = 3 * c.embed_dim + c.predicate_dim;
  store.add("tok.w1", init_linear_weight(tok_in, c.ffn_dim, rng));
  store.add("tok.b1", Tensor::zeros({1, c.ffn_dim}));
  store.add("tok.w2", init_linear_weight(c.ffn_dim, c.model_dim, rng));
  store.add("tok.b2", Tensor::zeros({1, c.model_dim}));
  if (c.use_tpfe) {
    for (int l = 0; l < c.tpfe_layers; ++l)
      init_encoder_layer(store, rng, "tpfe.l" + std::to_string(l), c.model_dim, c.ffn_dim);
  }
  store.add("tpfe.out.w", init_linear_weight(c.model_dim, c.predicate_dim, rng));
  store.add("tpfe.out.b", Tensor::zeros({1, c.predicate_dim}));
  store.add("tpc.w", init_linear_weight(c.predicate_dim, c.num_predicates, rng));
  store.add("tpc.b", Tensor::zeros({1, c.num_predicates}));
  // small positive biases keep degenerate inputs (for example a fully
  // masked image with a dead hidden layer) away from the sphere's singular
  // origin in the projection head
  store.add("proj.w1", init_linear_weight(c.predicate_dim, c.predicate_dim, rng));
  store.add("proj.b1", Tensor::full({1, c.predicate_dim}, 0.01));
  store.add("proj.w2", init_linear_weight(c.predicate_dim, c.proj_dim, rng));
  store.add("proj.b2", Tensor::full({1, c.proj_dim}, 0.01));
  if (c.branch_mode == BranchMode::Full) store.add("gate.c", Tensor::zeros({1, c.num_predicates}));
}

Tensor HtclModel::init_gate_values(const ClassStats& stats) {
  Tensor c({1, static_cast<int>(stats.counts.size())});
  for (std::size_t i = 0; i < stats.counts.size(); ++i)
    c[static_cast<std::int64_t>(i)] = std::log(static_cast<double>(std::max<std::int64_t>(stats.counts[i], 1)));
  return c;
}

std::set<std::string> HtclModel::classifier_param_names(bool tail_classifier) const {
  if (tail_classifier) {
    if (!cfg_.has_tpfr())
      throw std::invalid_argument("classifier_param_names: no tail classifier in hp_only mode");
    return {"tpc.w", "tpc.b"};
  }
  return {"hpc.w", "hpc.b"};
}

Value HtclModel::predicate_tokens(Graph& g, ParamStore& store, Value s, Value r) const {
  const Value x = concat_cols(s, r);
  const Value h = relu(linear(x, g.param(store, "tok.w1"), g.param(store, "tok.b1")));
  return linear(h, g.param(store, "tok.w2"), g.param(store, "tok.b2"));
}

Value HtclModel::tpfe_encode(Graph& g, ParamStore& store, Value tokens) const {
  Value h = tokens;
  if (cfg_.use_tpfe) {
    for (int l = 0; l < cfg_.tpfe_layers; ++l) h = encoder_layer(g, store, h, "tpfe.l" + std::to_string(l));
  }
  return linear(h, g.param(store, "tpfe.out.w"), g.param(store, "tpfe.out.b"));
}

Value HtclModel::project_to_sphere(Graph& g, ParamStore& store, Value feats) const {
  const Value h = relu(linear(feats, g.param(store, "proj.w1"), g.param(store, "proj.b1")));
  return l2_normalize_rows(linear(h, g.param(store, "proj.w2"), g.param(store, "proj.b2")));
}

Value HtclModel::semantic_rep(Graph& g, ParamStore& store, Value z_h, const std::vector<int>& subj_labels,
                              const std::vector<int>& obj_labels) const {
  const Value subj_emb = embedding(store, g, "emb.obj", subj_labels);
  const Value obj_emb = embedding(store, g, "emb.obj", obj_labels);
  // probability-weighted mean of predicate embeddings
  const Value pred_emb = matmul(softmax_rows(z_h), g.param(store, "emb.pred"));
  return concat_cols({subj_emb, pred_emb, obj_emb});
}

Value HtclModel::cooperate(Graph& g, ParamStore& store, Value z_h, Value z_t) const {
  const Value gate = sigmoid(g.param(store, "gate.c"));
  const Value inv_gate = add_scalar(scale(gate, -1.0), 1.0);
  return add(mul_rowvec(softmax_rows(z_h), gate), mul_rowvec(softmax_rows(z_t), inv_gate));
}

SceneForward HtclModel::forward(Graph& g, ParamStore& store, const SynthSceneGraph& scene,
                                const std::vector<std::pair<int, int>>& pairs) const {
  const ModelConfig& c = cfg_;
  const int n = static_cast<int>(scene.objects.size());
  if (n < 1) throw std::invalid_argument("HtclModel::forward: scene has no objects");
  for (const auto& o : scene.objects)
    if (static_cast<int>(o.visual.size()) != c.visual_dim)
      throw std::invalid_argument("HtclModel::forward: visual dim " + std::to_string(o.visual.size()) +
                                  " does not match config d_v " + std::to_string(c.visual_dim));

  SceneForward out;

  Tensor visuals({n, c.visual_dim});
  Tensor boxes({n, 4});
  std::vector<int> initial_labels(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto& o = scene.objects[static_cast<std::size_t>(i)];
    for (int d = 0; d < c.visual_dim; ++d) visuals.at(i, d) = o.visual[static_cast<std::size_t>(d)];
    boxes.at(i, 0) = o.bbox.x1;
    boxes.at(i, 1) = o.bbox.y1;
    boxes.at(i, 2) = o.bbox.x2;
    boxes.at(i, 3) = o.bbox.y2;
    // PredCls sees ground-truth labels; SGCls starts from the unknown id
    initial_labels[static_cast<std::size_t>(i)] =
        (c.task == Task::PredCls) ? o.class_id : c.num_obj_classes;
  }
  const Value v = g.constant(std::move(visuals));
  const Value pos = linear(g.constant(std::move(boxes)), g.param(store, "pos.w"), g.param(store, "pos.b"));
  const Value c0_emb = embedding(store, g, "emb.obj", initial_labels);

  Value f = relu(linear(concat_cols({v, pos, c0_emb}), g.param(store, "oe.w1"), g.param(store, "oe.b1")));
  f = linear(f, g.param(store, "oe.w2"), g.param(store, "oe.b2"));
  out.f = f;
  out.label_logits = linear(f, g.param(store, "obj_head.w"), g.param(store, "obj_head.b"));

  out.predicted_obj_labels.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    if (c.task == Task::PredCls) {
      out.predicted_obj_labels[static_cast<std::size_t>(i)] = scene.objects[static_cast<std::size_t>(i)].class_id;
    } else {
      const Tensor& logits = out.label_logits.val();
      int best = 0;
      for (int k = 1; k < c.num_obj_classes; ++k)
        if (logits.at(i, k) > logits.at(i, best)) best = k;
      out.predicted_obj_labels[static_cast<std::size_t>(i)] = best;
    }
  }

  const Value label_emb = embedding(store, g, "emb.obj", out.predicted_obj_labels);
  const Value pe_in =
      linear(concat_cols({v, f, label_emb}), g.param(store, "pe.proj.w"), g.param(store, "pe.proj.b"));
  const Value e = encoder_layer(g, store, pe_in, "pe.l0");
  out.e = e;

  if (pairs.empty()) return out;

  const int m = static_cast<int>(pairs.size());
  std::vector<int> subj_ids(static_cast<std::size_t>(m)), obj_ids(static_cast<std::size_t>(m));
  Tensor unions({m, c.visual_dim});
  std::vector<int> subj_labels(static_cast<std::size_t>(m)), obj_labels(static_cast<std::size_t>(m));
  for (int k = 0; k < m; ++k) {
    const auto [si, oi] = pairs[static_cast<std::size_t>(k)];
    if (si < 0 || si >= n || oi < 0 || oi >= n || si == oi)
      throw std::invalid_argument("HtclModel::forward: invalid pair (" + std::to_string(si) + "," +
                                  std::to_string(oi) + ")");
    subj_ids[static_cast<std::size_t>(k)] = si;
    obj_ids[static_cast<std::size_t>(k)] = oi;
    const auto u = union_visual(scene, si, oi);
    for (int d = 0; d < c.visual_dim; ++d) unions.at(k, d) = u[static_cast<std::size_t>(d)];
    subj_labels[static_cast<std::size_t>(k)] = out.predicted_obj_labels[static_cast<std::size_t>(si)];
    obj_labels[static_cast<std::size_t>(k)] = out.predicted_obj_labels[static_cast<std::size_t>(oi)];
  }

  const Value e_i = gather_rows(e, subj_ids);
  const Value e_j = gather_rows(e, obj_ids);
  const Value pd_in = concat_cols({e_i, e_j, g.constant(std::move(unions))});
  Value r = relu(linear(pd_in, g.param(store, "pd.w1"), g.param(store, "pd.b1")));
  r = linear(r, g.param(store, "pd.w2"), g.param(store, "pd.b2"));
  out.r = r;
  out.z_h = linear(r, g.param(store, "hpc.w"), g.param(store, "hpc.b"));

  if (!c.has_tpfr()) {
    out.p_hat = softmax_rows(out.z_h);
    return out;
  }

  out.s = semantic_rep(g, store, out.z_h, subj_labels, obj_labels);
  out.tokens = predicate_tokens(g, store, out.s, r);
  out.r_t = tpfe_encode(g, store, out.tokens);
  out.z_t = linear(out.r_t, g.param(store, "tpc.w"), g.param(store, "tpc.b"));

  if (c.branch_mode == BranchMode::TpfrOnly) {
    out.p_hat = softmax_rows(out.z_t);
    return out;
  }
  out.z_o = cooperate(g, store, out.z_h, out.z_t);
  out.p_hat = softmax_rows(out.z_o);
  return out;
}

}  // namespace htcl
