#include "htcl/verification.hpp"

#include <algorithm>
#include <functional>
#include <memory>

#include "htcl/grad_check.hpp"
#include "htcl/losses.hpp"
#include "htcl/model.hpp"

namespace htcl {

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scl = 1.0) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, scl);
  return t;
}

Value contract_against(Graph& g, Value y, std::uint64_t salt) {
  Rng rng(salt ^ 0x5eedULL);
  Tensor c(y.val().shape());
  for (std::int64_t i = 0; i < c.size(); ++i) c[i] = rng.normal();
  return sum_all(mul(y, g.constant(std::move(c))));
}

struct SuiteCase {
  std::string name;
  std::function<void(ParamStore&, Rng&)> setup;
  std::function<Value(Graph&, ParamStore&)> build;
};

ModelConfig toy_model_config(BranchMode mode) {
  ModelConfig c;
  c.num_obj_classes = 3;
  c.num_predicates = 4;
  c.visual_dim = 5;
  c.embed_dim = 6;
  c.pos_dim = 4;
  c.object_dim = 8;
  c.context_dim = 8;
  c.predicate_dim = 8;
  c.model_dim = 8;
  c.tpfe_layers = 2;
  c.heads = 2;
  c.ffn_dim = 12;
  c.proj_dim = 6;
  c.branch_mode = mode;
  return c;
}

SynthSceneGraph toy_scene(Rng& rng, int objects, int visual_dim, int obj_classes, int predicates,
                          std::vector<std::pair<int, int>>* pairs, std::vector<int>* labels) {
  SynthSceneGraph scene;
  scene.objects.resize(static_cast<std::size_t>(objects));
  for (auto& o : scene.objects) {
    o.class_id = rng.uniform_int(0, obj_classes - 1);
    o.bbox = {rng.uniform(0.0, 0.4), rng.uniform(0.0, 0.4), rng.uniform(0.5, 1.0), rng.uniform(0.5, 1.0)};
    o.visual.resize(static_cast<std::size_t>(visual_dim));
    for (double& v : o.visual) v = rng.normal();
  }
  for (int i = 0; i + 1 < objects; i += 2) {
    scene.relations.push_back({i, i + 1, rng.uniform_int(0, predicates - 1)});
    if (pairs) pairs->emplace_back(i, i + 1);
    if (labels) labels->push_back(scene.relations.back().predicate);
  }
  return scene;
}

std::vector<SuiteCase> suite_cases() {
  std::vector<SuiteCase> cases;

  cases.push_back({"linear_matmul",
                   [](ParamStore& s, Rng& rng) {
                     s.add("a", random_tensor({3, 4}, rng));
                     s.add("b", random_tensor({4, 5}, rng));
                     s.add("c", random_tensor({6, 4}, rng));
                     s.add("bias", random_tensor({1, 5}, rng, 0.1));
                   },
                   [](Graph& g, ParamStore& s) {
                     const Value y = linear(g.param(s, "a"), g.param(s, "b"), g.param(s, "bias"));
                     const Value z = matmul_nt(g.param(s, "a"), g.param(s, "c"));
                     return add(contract_against(g, y, 1), contract_against(g, z, 2));
                   }});
  cases.push_back({"elementwise_broadcast",
                   [](ParamStore& s, Rng& rng) {
                     s.add("a", random_tensor({4, 6}, rng));
                     s.add("b", random_tensor({4, 6}, rng));
                     s.add("r", random_tensor({1, 6}, rng));
                   },
                   [](Graph& g, ParamStore& s) {
                     Value y = add(mul(g.param(s, "a"), g.param(s, "b")), sub(g.param(s, "a"), g.param(s, "b")));
                     y = mul_rowvec(add_rowvec(y, g.param(s, "r")), g.param(s, "r"));
                     return contract_against(g, add_scalar(scale(y, 0.5), 1.0), 3);
                   }});
  cases.push_back({"activations",
                   [](ParamStore& s, Rng& rng) { s.add("x", random_tensor({5, 7}, rng)); },
                   [](Graph& g, ParamStore& s) {
                     const Value x = g.param(s, "x");
                     return add(contract_against(g, relu(x), 4), contract_against(g, sigmoid(x), 5));
                   }});
  cases.push_back({"softmax_family",
                   [](ParamStore& s, Rng& rng) { s.add("x", random_tensor({4, 6}, rng, 2.0)); },
                   [](Graph& g, ParamStore& s) {
                     const Value x = g.param(s, "x");
                     Value loss = contract_against(g, softmax_rows(x), 6);
                     loss = add(loss, contract_against(g, log_softmax_rows(x), 7));
                     return add(loss, contract_against(g, log_sum_exp_rows(x), 8));
                   }});
  cases.push_back({"layer_norm",
                   [](ParamStore& s, Rng& rng) {
                     s.add("x", random_tensor({4, 8}, rng));
                     s.add("g", random_tensor({1, 8}, rng, 0.5));
                     s.add("b", random_tensor({1, 8}, rng, 0.5));
                   },
                   [](Graph& g, ParamStore& s) {
                     return contract_against(
                         g, layer_norm_rows(g.param(s, "x"), g.param(s, "g"), g.param(s, "b")), 9);
                   }});
  cases.push_back({"concat_slice_gather",
                   [](ParamStore& s, Rng& rng) {
                     s.add("a", random_tensor({3, 4}, rng));
                     s.add("b", random_tensor({3, 2}, rng));
                     s.add("t", random_tensor({6, 4}, rng));
                   },
                   [](Graph& g, ParamStore& s) {
                     Value loss = contract_against(g, concat_cols(g.param(s, "a"), g.param(s, "b")), 10);
                     loss = add(loss, contract_against(g, slice_cols(g.param(s, "a"), 1, 3), 11));
                     loss = add(loss, contract_against(g, gather_rows(g.param(s, "t"), {2, 0, 5}), 12));
                     return add(loss, contract_against(g, gather_labels(g.param(s, "a"), {3, 0, 2}), 13));
                   }});
  cases.push_back({"reductions_norms",
                   [](ParamStore& s, Rng& rng) { s.add("x", random_tensor({5, 6}, rng)); },
                   [](Graph& g, ParamStore& s) {
                     const Value x = g.param(s, "x");
                     Value loss = contract_against(g, mean_rows(x), 14);
                     loss = add(loss, contract_against(g, l2_normalize_rows(x), 15));
                     loss = add(loss, contract_against(g, row_norms(x), 16));
                     return add(loss, mean_all(x));
                   }});
  cases.push_back({"mask_and_log",
                   [](ParamStore& s, Rng& rng) { s.add("x", random_tensor({6, 5}, rng)); },
                   [](Graph& g, ParamStore& s) {
                     const Value x = g.param(s, "x");
                     const std::vector<char> mask = {1, 0, 0, 1, 0, 1};
                     Value loss = contract_against(g, mask_rows(x, mean_rows(x), mask), 17);
                     return add(loss, contract_against(g, log_clamped(softmax_rows(x)), 18));
                   }});
  cases.push_back({"attention",
                   [](ParamStore& s, Rng& rng) {
                     const int d = 8;
                     for (const char* n : {"wq", "wk", "wv", "wo"}) s.add(n, init_linear_weight(d, d, rng));
                     for (const char* n : {"bq", "bk", "bv", "bo"}) s.add(n, random_tensor({1, d}, rng, 0.1));
                     s.add("x", random_tensor({4, d}, rng));
                   },
                   [](Graph& g, ParamStore& s) {
                     const AttentionParams p{g.param(s, "wq"), g.param(s, "bq"), g.param(s, "wk"),
                                             g.param(s, "bk"), g.param(s, "wv"), g.param(s, "bv"),
                                             g.param(s, "wo"), g.param(s, "bo")};
                     return contract_against(g, multihead_self_attention(g.param(s, "x"), p, 2), 19);
                   }});
  cases.push_back({"encoder_layer",
                   [](ParamStore& s, Rng& rng) {
                     const int d = 8, ff = 12;
                     for (const char* n : {"wq", "wk", "wv", "wo"}) s.add(n, init_linear_weight(d, d, rng));
                     for (const char* n : {"bq", "bk", "bv", "bo"}) s.add(n, random_tensor({1, d}, rng, 0.1));
                     s.add("ln1g", Tensor::full({1, d}, 1.0));
                     s.add("ln1b", Tensor::zeros({1, d}));
                     s.add("ln2g", Tensor::full({1, d}, 1.0));
                     s.add("ln2b", Tensor::zeros({1, d}));
                     s.add("ffw1", init_linear_weight(d, ff, rng));
                     s.add("ffb1", random_tensor({1, ff}, rng, 0.1));
                     s.add("ffw2", init_linear_weight(ff, d, rng));
                     s.add("ffb2", random_tensor({1, d}, rng, 0.1));
                     s.add("x", random_tensor({4, d}, rng));
                   },
                   [](Graph& g, ParamStore& s) {
                     EncoderLayerParams p;
                     p.attn = {g.param(s, "wq"), g.param(s, "bq"), g.param(s, "wk"), g.param(s, "bk"),
                               g.param(s, "wv"), g.param(s, "bv"), g.param(s, "wo"), g.param(s, "bo")};
                     p.ln1_g = g.param(s, "ln1g");
                     p.ln1_b = g.param(s, "ln1b");
                     p.ff_w1 = g.param(s, "ffw1");
                     p.ff_b1 = g.param(s, "ffb1");
                     p.ff_w2 = g.param(s, "ffw2");
                     p.ff_b2 = g.param(s, "ffb2");
                     p.ln2_g = g.param(s, "ln2g");
                     p.ln2_b = g.param(s, "ln2b");
                     return contract_against(g, transformer_encoder_layer(g.param(s, "x"), p, 2), 20);
                   }});

  // feature pipeline and the branch heads, checked through full forwards
  struct PipelineState {
    ModelConfig cfg;
    SynthSceneGraph scene;
    std::vector<std::pair<int, int>> pairs;
    std::vector<int> labels;
    std::vector<int> obj_labels;
  };
  auto make_pipeline_case = [](const std::string& name, BranchMode mode) {
    auto state = std::make_shared<PipelineState>();
    state->cfg = toy_model_config(mode);
    return SuiteCase{
        name,
        [state, mode](ParamStore& s, Rng& rng) {
          state->pairs.clear();
          state->labels.clear();
          state->obj_labels.clear();
          state->scene = toy_scene(rng, 4, state->cfg.visual_dim, state->cfg.num_obj_classes,
                                   state->cfg.num_predicates, &state->pairs, &state->labels);
          for (const auto& o : state->scene.objects) state->obj_labels.push_back(o.class_id);
          const HtclModel model(state->cfg);
          model.init_params(s, rng);
          if (mode == BranchMode::Full)
            for (std::int64_t i = 0; i < s.value("gate.c").size(); ++i) s.value("gate.c")[i] = rng.normal();
        },
        [state](Graph& g, ParamStore& s) {
          const HtclModel model(state->cfg);
          const SceneForward fwd = model.forward(g, s, state->scene, state->pairs);
          Value loss = scale(softmax_cross_entropy_sum(fwd.z_h, state->labels),
                             1.0 / static_cast<double>(state->labels.size()));
          loss = add(loss, scale(softmax_cross_entropy_sum(fwd.label_logits, state->obj_labels),
                                 1.0 / static_cast<double>(state->obj_labels.size())));
          if (state->cfg.branch_mode == BranchMode::Full) {
            const std::vector<double> w = {2.0, 1.0, 0.5, 0.25};
            loss = add(loss, scale(reweighted_nll_sum(g, fwd.p_hat, state->labels, w),
                                   1.0 / static_cast<double>(state->labels.size())));
          }
          return loss;
        }};
  };
  cases.push_back(make_pipeline_case("feature_pipeline", BranchMode::HpOnly));
  cases.push_back(make_pipeline_case("cooperative_heads", BranchMode::Full));

  cases.push_back({"contrastive_loss",
                   [](ParamStore& s, Rng& rng) {
                     s.add("w", init_linear_weight(6, 8, rng));
                     s.add("b", Tensor::zeros({1, 8}));
                     s.add("x", random_tensor({8, 6}, rng));
                   },
                   [](Graph& g, ParamStore& s) {
                     const Value q =
                         l2_normalize_rows(linear(g.param(s, "x"), g.param(s, "w"), g.param(s, "b")));
                     return contrastive_loss_sum(g, q, 0.1);
                   }});

  {
    auto stats = std::make_shared<ClassStats>();
    stats->counts = {9, 7, 2, 1};
    stats->order = {0, 1, 2, 3};
    stats->head_set = {0, 1};
    stats->weights = {1.0, 1.0, 1.0, 1.0};
    auto centers = std::make_shared<ClassCenters>();
    cases.push_back({"head_center_loss",
                     [stats, centers](ParamStore& s, Rng& rng) {
                       *centers = ClassCenters(4, 5, 0.9);
                       for (int c : {0, 1}) {
                         centers->initialized[static_cast<std::size_t>(c)] = 1;
                         for (int d = 0; d < 5; ++d) centers->values.at(c, d) = rng.normal();
                       }
                       s.add("feats", random_tensor({6, 5}, rng));
                     },
                     [stats, centers](Graph& g, ParamStore& s) {
                       return head_center_loss_sum(g, g.param(s, "feats"), {0, 1, 0, 2, 1, 3}, *centers,
                                                   *stats);
                     }});
  }

  cases.push_back({"reweighted_cross_entropy",
                   [](ParamStore& s, Rng& rng) {
                     s.add("zh", random_tensor({4, 5}, rng, 2.0));
                     s.add("zt", random_tensor({4, 5}, rng, 2.0));
                     s.add("c", random_tensor({1, 5}, rng));
                   },
                   [](Graph& g, ParamStore& s) {
                     const Value gate = sigmoid(g.param(s, "c"));
                     const Value inv = add_scalar(scale(gate, -1.0), 1.0);
                     const Value zo = add(mul_rowvec(softmax_rows(g.param(s, "zh")), gate),
                                          mul_rowvec(softmax_rows(g.param(s, "zt")), inv));
                     const std::vector<double> w = {0.1, 0.5, 1.0, 2.0, 4.0};
                     return scale(reweighted_nll_sum(g, softmax_rows(zo), {0, 2, 4, 1}, w), 0.25);
                   }});
  cases.push_back({"classification_cross_entropy",
                   [](ParamStore& s, Rng& rng) { s.add("z", random_tensor({5, 4}, rng, 2.0)); },
                   [](Graph& g, ParamStore& s) {
                     return scale(softmax_cross_entropy_sum(g.param(s, "z"), {0, 3, 1, 2, 2}), 0.2);
                   }});

  // the combined objective on a two-image toy batch
  {
    struct TotalState {
      ModelConfig cfg = toy_model_config(BranchMode::Full);
      std::vector<SynthSceneGraph> scenes;
      std::vector<std::vector<std::pair<int, int>>> pairs;
      std::vector<std::vector<int>> labels;
      std::vector<std::vector<int>> obj_labels;
      std::vector<std::vector<char>> masks;
      ClassStats stats;
      ClassCenters centers;
    };
    auto st = std::make_shared<TotalState>();
    cases.push_back(
        {"total_training_loss",
         [st](ParamStore& s, Rng& rng) {
           st->scenes.clear();
           st->pairs.assign(2, {});
           st->labels.assign(2, {});
           st->obj_labels.assign(2, {});
           st->masks.clear();
           for (int i = 0; i < 2; ++i) {
             st->scenes.push_back(toy_scene(rng, 4, st->cfg.visual_dim, st->cfg.num_obj_classes,
                                            st->cfg.num_predicates, &st->pairs[static_cast<std::size_t>(i)],
                                            &st->labels[static_cast<std::size_t>(i)]));
             for (const auto& o : st->scenes.back().objects)
               st->obj_labels[static_cast<std::size_t>(i)].push_back(o.class_id);
             std::vector<char> mask;
             for (std::size_t k = 0; k < st->pairs[static_cast<std::size_t>(i)].size(); ++k)
               mask.push_back(rng.bernoulli(0.5) ? 1 : 0);
             st->masks.push_back(std::move(mask));
           }
           st->stats.counts = {6, 3, 2, 1};
           st->stats.order = {0, 1, 2, 3};
           st->stats.head_set = {0, 1};
           st->stats.weights = {0.2, 0.4, 0.9, 1.0};
           st->centers = ClassCenters(4, st->cfg.predicate_dim, 0.9);
           for (int c : {0, 1}) {
             st->centers.initialized[static_cast<std::size_t>(c)] = 1;
             for (int d = 0; d < st->cfg.predicate_dim; ++d) st->centers.values.at(c, d) = rng.normal(0.0, 0.5);
           }
           const HtclModel model(st->cfg);
           model.init_params(s, rng);
           for (std::int64_t i = 0; i < s.value("gate.c").size(); ++i) s.value("gate.c")[i] = rng.normal();
         },
         [st](Graph& g, ParamStore& s) {
           const HtclModel model(st->cfg);
           Value total;
           bool first = true;
           std::int64_t n_rel = 0, n_obj = 0;
           std::vector<Value> con, hc, rw, hpc, obj;
           for (std::size_t i = 0; i < st->scenes.size(); ++i) {
             const SceneForward fwd = model.forward(g, s, st->scenes[i], st->pairs[i]);
             n_rel += static_cast<std::int64_t>(st->pairs[i].size());
             n_obj += static_cast<std::int64_t>(st->obj_labels[i].size());
             const Value masked = mask_tokens(g, fwd.tokens, st->masks[i]);
             const Value rt_masked = model.tpfe_encode(g, s, masked);
             const Value q = concat_rows(model.project_to_sphere(g, s, fwd.r_t),
                                         model.project_to_sphere(g, s, rt_masked));
             con.push_back(contrastive_loss_sum(g, q, 0.1));
             hc.push_back(head_center_loss_sum(g, fwd.r_t, st->labels[i], st->centers, st->stats));
             rw.push_back(reweighted_nll_sum(g, fwd.p_hat, st->labels[i], st->stats.weights));
             hpc.push_back(softmax_cross_entropy_sum(fwd.z_h, st->labels[i]));
             obj.push_back(softmax_cross_entropy_sum(fwd.label_logits, st->obj_labels[i]));
           }
           auto total_of = [&](std::vector<Value>& v) {
             Value acc = v[0];
             for (std::size_t i = 1; i < v.size(); ++i) acc = add(acc, v[i]);
             return acc;
           };
           total = add(total_of(con), scale(total_of(hc), 1e-4));
           total = add(total, scale(total_of(rw), 1.0 / static_cast<double>(n_rel)));
           total = add(total, scale(total_of(hpc), 1.0 / static_cast<double>(n_rel)));
           total = add(total, scale(total_of(obj), 1.0 / static_cast<double>(n_obj)));
           (void)first;
           return total;
         }});
  }
  return cases;
}

}  // namespace

std::vector<GradSuiteItem> run_grad_suite(std::uint64_t seed, int seeds_per_item, double step, double tol) {
  std::vector<GradSuiteItem> items;
  for (const auto& c : suite_cases()) {
    GradSuiteItem item;
    item.name = c.name;
    for (int s = 0; s < seeds_per_item; ++s) {
      ParamStore store;
      Rng rng(seed * 1000003ULL + static_cast<std::uint64_t>(s) + fnv1a64(c.name));
      c.setup(store, rng);
      const auto report = grad_check(c.build, store, step, tol, 40, seed + static_cast<std::uint64_t>(s));
      item.max_rel_err = std::max(item.max_rel_err, report.max_rel_err);
      item.entries += report.entries_checked;
    }
    item.passed = item.max_rel_err <= tol;
    items.push_back(std::move(item));
  }
  return items;
}

}  // namespace htcl
