#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "htcl/grad_check.hpp"
#include "htcl/model.hpp"

using namespace htcl;

namespace {

// Small configuration used throughout; keeps the finite-difference cases fast.
ModelConfig tiny_config(BranchMode mode = BranchMode::Full) {
  ModelConfig c;
  c.num_obj_classes = 4;
  c.num_predicates = 5;
  c.visual_dim = 6;
  c.embed_dim = 8;
  c.pos_dim = 4;
  c.object_dim = 12;
  c.context_dim = 12;
  c.predicate_dim = 12;
  c.model_dim = 12;
  c.tpfe_layers = 2;
  c.heads = 2;
  c.ffn_dim = 16;
  c.proj_dim = 8;
  c.branch_mode = mode;
  return c;
}

SynthSceneGraph make_scene(int num_objects, std::uint64_t seed, int visual_dim = 6, int obj_classes = 4) {
  Rng rng(seed);
  SynthSceneGraph scene;
  scene.image_id = static_cast<std::int64_t>(seed);
  scene.objects.resize(static_cast<std::size_t>(num_objects));
  for (auto& o : scene.objects) {
    o.class_id = rng.uniform_int(0, obj_classes - 1);
    const double w = rng.uniform(0.1, 0.4), h = rng.uniform(0.1, 0.4);
    o.bbox.x1 = rng.uniform(0.0, 0.5);
    o.bbox.x2 = o.bbox.x1 + w;
    o.bbox.y1 = rng.uniform(0.0, 0.5);
    o.bbox.y2 = o.bbox.y1 + h;
    o.visual.resize(static_cast<std::size_t>(visual_dim));
    for (double& v : o.visual) v = rng.normal();
  }
  return scene;
}

ParamStore make_store(const HtclModel& model, std::uint64_t seed) {
  ParamStore store;
  Rng rng(seed);
  model.init_params(store, rng);
  return store;
}

bool rows_equal(const Tensor& a, int ra, const Tensor& b, int rb, double tol = 1e-12) {
  if (a.cols() != b.cols()) return false;
  for (int c = 0; c < a.cols(); ++c)
    if (std::fabs(a.at(ra, c) - b.at(rb, c)) > tol) return false;
  return true;
}

}  // namespace

TEST_CASE("object encoding: shapes, determinism, bbox sensitivity") {
  const HtclModel model(tiny_config(BranchMode::HpOnly));
  ParamStore store = make_store(model, 3);

  SynthSceneGraph scene = make_scene(3, 10);
  scene.objects[1] = scene.objects[0];  // identical objects

  Graph g;
  const SceneForward fwd = model.forward(g, store, scene, {});
  CHECK(fwd.f.val().rows() == 3);
  CHECK(fwd.f.val().cols() == model.config().object_dim);
  CHECK(rows_equal(fwd.f.val(), 0, fwd.f.val(), 1));

  // perturbing only the bbox must change the object feature
  SynthSceneGraph moved = scene;
  moved.objects[0].bbox.x1 += 0.05;
  moved.objects[0].bbox.x2 += 0.05;
  Graph g2;
  const SceneForward fwd2 = model.forward(g2, store, moved, {});
  CHECK(!rows_equal(fwd.f.val(), 0, fwd2.f.val(), 0));
  CHECK(rows_equal(fwd.f.val(), 2, fwd2.f.val(), 2));
}

TEST_CASE("context encoding: permutation equivariance") {
  const HtclModel model(tiny_config(BranchMode::HpOnly));
  ParamStore store = make_store(model, 4);
  const SynthSceneGraph scene = make_scene(4, 21);

  // permute object order; attention has no positional encoding so outputs
  // permute with the objects
  const std::vector<int> perm = {2, 0, 3, 1};
  SynthSceneGraph permuted = scene;
  for (std::size_t i = 0; i < perm.size(); ++i)
    permuted.objects[i] = scene.objects[static_cast<std::size_t>(perm[i])];

  Graph g1, g2;
  const SceneForward a = model.forward(g1, store, scene, {});
  const SceneForward b = model.forward(g2, store, permuted, {});
  for (std::size_t i = 0; i < perm.size(); ++i) {
    CHECK(rows_equal(b.e.val(), static_cast<int>(i), a.e.val(), perm[i], 1e-9));
    CHECK(rows_equal(b.label_logits.val(), static_cast<int>(i), a.label_logits.val(), perm[i], 1e-9));
  }
}

TEST_CASE("context encoding: swapping visuals swaps label logits") {
  ModelConfig cfg = tiny_config(BranchMode::HpOnly);
  cfg.task = Task::SGCls;  // logits come purely from visual evidence then
  const HtclModel model(cfg);
  ParamStore store = make_store(model, 5);

  SynthSceneGraph scene = make_scene(2, 33);
  scene.objects[1].bbox = scene.objects[0].bbox;
  scene.objects[1].class_id = scene.objects[0].class_id;
  SynthSceneGraph swapped = scene;
  std::swap(swapped.objects[0].visual, swapped.objects[1].visual);

  Graph g1, g2;
  const SceneForward a = model.forward(g1, store, scene, {});
  const SceneForward b = model.forward(g2, store, swapped, {});
  CHECK(rows_equal(a.label_logits.val(), 0, b.label_logits.val(), 1, 1e-9));
  CHECK(rows_equal(a.label_logits.val(), 1, b.label_logits.val(), 0, 1e-9));
}

TEST_CASE("predicate decoding: one feature per pair, order matters, extremes stay finite") {
  const HtclModel model(tiny_config(BranchMode::HpOnly));
  ParamStore store = make_store(model, 6);
  SynthSceneGraph scene = make_scene(4, 55);

  Graph g;
  const SceneForward fwd = model.forward(g, store, scene, {{0, 1}, {1, 0}, {2, 3}});
  CHECK(fwd.r.val().rows() == 3);
  CHECK(fwd.r.val().cols() == model.config().predicate_dim);
  CHECK(!rows_equal(fwd.r.val(), 0, fwd.r.val(), 1));
  CHECK(fwd.z_h.val().rows() == 3);
  CHECK(fwd.z_h.val().cols() == model.config().num_predicates);

  for (auto& o : scene.objects)
    for (double& v : o.visual) v = (v > 0 ? 1e3 : -1e3);
  Graph g2;
  const SceneForward extreme = model.forward(g2, store, scene, {{0, 1}, {2, 3}});
  CHECK(extreme.r.val().all_finite());
  CHECK(extreme.p_hat.val().all_finite());
}

TEST_CASE("hp classifier: zero weights give zero logits") {
  const HtclModel model(tiny_config(BranchMode::HpOnly));
  ParamStore store = make_store(model, 7);
  store.value("hpc.w").fill(0.0);
  store.value("hpc.b").fill(0.0);
  Graph g;
  const SceneForward fwd = model.forward(g, store, make_scene(3, 70), {{0, 1}});
  for (int c = 0; c < model.config().num_predicates; ++c) CHECK(fwd.z_h.val().at(0, c) == 0.0);
}

TEST_CASE("semantic representation: probability-weighted predicate embedding") {
  const HtclModel model(tiny_config());
  ParamStore store = make_store(model, 8);
  const int C = model.config().num_predicates;
  const int E = model.config().embed_dim;
  const Tensor& table = store.value("emb.pred");

  SUBCASE("near one-hot distribution selects one row") {
    Graph g;
    Tensor logits({1, C});
    logits.fill(-1e4);
    logits.at(0, 2) = 1e4;
    const Value s = model.semantic_rep(g, store, g.constant(logits), {1}, {3});
    for (int d = 0; d < E; ++d)
      CHECK(s.val().at(0, E + d) == doctest::Approx(table.at(2, d)).epsilon(1e-9));
  }
  SUBCASE("uniform distribution averages the table") {
    Graph g;
    const Value s = model.semantic_rep(g, store, g.constant(Tensor({1, C})), {0}, {0});
    for (int d = 0; d < E; ++d) {
      double mean = 0.0;
      for (int c = 0; c < C; ++c) mean += table.at(c, d);
      mean /= C;
      CHECK(s.val().at(0, E + d) == doctest::Approx(mean).epsilon(1e-12));
    }
  }
  SUBCASE("mixed distribution matches a brute-force weighted sum") {
    Graph g;
    Tensor logits({1, C}, {0.3, -1.2, 2.0, 0.0, 0.7});
    const Value s = model.semantic_rep(g, store, g.constant(logits), {2}, {1});
    // independent evaluation: softmax then explicit weighted sum
    std::vector<double> p(static_cast<std::size_t>(C));
    double mx = -1e300, z = 0.0;
    for (int c = 0; c < C; ++c) mx = std::max(mx, logits.at(0, c));
    for (int c = 0; c < C; ++c) {
      p[static_cast<std::size_t>(c)] = std::exp(logits.at(0, c) - mx);
      z += p[static_cast<std::size_t>(c)];
    }
    for (double& v : p) v /= z;
    for (int d = 0; d < E; ++d) {
      double expect = 0.0;
      for (int c = 0; c < C; ++c) expect += p[static_cast<std::size_t>(c)] * table.at(c, d);
      CHECK(s.val().at(0, E + d) == doctest::Approx(expect).epsilon(1e-12));
    }
    // flanks are plain table lookups of the object labels
    const Tensor& obj_table = store.value("emb.obj");
    for (int d = 0; d < E; ++d) {
      CHECK(s.val().at(0, d) == obj_table.at(2, d));
      CHECK(s.val().at(0, 2 * E + d) == obj_table.at(1, d));
    }
  }
}

TEST_CASE("tpfe: single token is deterministic, order permutes outputs") {
  const HtclModel model(tiny_config());
  ParamStore store = make_store(model, 9);
  const SynthSceneGraph scene = make_scene(6, 77);

  Graph g1, g2;
  const std::vector<std::pair<int, int>> pairs = {{0, 1}, {2, 3}, {4, 5}};
  const std::vector<std::pair<int, int>> permuted = {{4, 5}, {0, 1}, {2, 3}};
  const SceneForward a = model.forward(g1, store, scene, pairs);
  const SceneForward b = model.forward(g2, store, scene, permuted);
  CHECK(rows_equal(b.r_t.val(), 0, a.r_t.val(), 2, 1e-9));
  CHECK(rows_equal(b.r_t.val(), 1, a.r_t.val(), 0, 1e-9));
  CHECK(rows_equal(b.r_t.val(), 2, a.r_t.val(), 1, 1e-9));

  Graph g3, g4;
  const SceneForward single1 = model.forward(g3, store, scene, {{0, 1}});
  const SceneForward single2 = model.forward(g4, store, scene, {{0, 1}});
  CHECK(rows_equal(single1.r_t.val(), 0, single2.r_t.val(), 0, 0.0));
}

TEST_CASE("tpfe: one encoder layer matches an independent hand-rolled implementation") {
  ModelConfig cfg = tiny_config();
  cfg.tpfe_layers = 1;
  const HtclModel model(cfg);
  ParamStore store = make_store(model, 12);
  const SynthSceneGraph scene = make_scene(6, 91);

  Graph g;
  const SceneForward fwd = model.forward(g, store, scene, {{0, 1}, {2, 3}, {4, 5}});
  const Tensor& tokens = fwd.tokens.val();
  const int m = tokens.rows(), d = tokens.cols();
  const int heads = cfg.heads, dh = d / heads;

  // Step-by-step re-implementation of the post-norm encoder layer with
  // plain loops, reading the same parameters.
  auto matvec = [&](const Tensor& x, const Tensor& w, const Tensor& b, int row, int col) {
    double acc = b.at(0, col);
    for (int k = 0; k < x.cols(); ++k) acc += x.at(row, k) * w.at(k, col);
    return acc;
  };
  auto apply_linear = [&](const Tensor& x, const char* wn, const char* bn) {
    const Tensor& w = store.value(wn);
    const Tensor& b = store.value(bn);
    Tensor y({x.rows(), w.cols()});
    for (int i = 0; i < x.rows(); ++i)
      for (int j = 0; j < w.cols(); ++j) y.at(i, j) = matvec(x, w, b, i, j);
    return y;
  };
  const Tensor q = apply_linear(tokens, "tpfe.l0.attn.wq", "tpfe.l0.attn.bq");
  const Tensor k = apply_linear(tokens, "tpfe.l0.attn.wk", "tpfe.l0.attn.bk");
  const Tensor v = apply_linear(tokens, "tpfe.l0.attn.wv", "tpfe.l0.attn.bv");
  Tensor heads_out({m, d});
  for (int h = 0; h < heads; ++h) {
    for (int i = 0; i < m; ++i) {
      std::vector<double> att(static_cast<std::size_t>(m));
      double mx = -1e300;
      for (int j = 0; j < m; ++j) {
        double dot = 0.0;
        for (int t = 0; t < dh; ++t) dot += q.at(i, h * dh + t) * k.at(j, h * dh + t);
        att[static_cast<std::size_t>(j)] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, att[static_cast<std::size_t>(j)]);
      }
      double z = 0.0;
      for (double& a : att) {
        a = std::exp(a - mx);
        z += a;
      }
      for (double& a : att) a /= z;
      for (int t = 0; t < dh; ++t) {
        double acc = 0.0;
        for (int j = 0; j < m; ++j) acc += att[static_cast<std::size_t>(j)] * v.at(j, h * dh + t);
        heads_out.at(i, h * dh + t) = acc;
      }
    }
  }
  const Tensor att_out = apply_linear(heads_out, "tpfe.l0.attn.wo", "tpfe.l0.attn.bo");
  auto layer_norm = [&](const Tensor& x, const char* gn, const char* bn) {
    const Tensor& gamma = store.value(gn);
    const Tensor& beta = store.value(bn);
    Tensor y(x.shape());
    for (int i = 0; i < x.rows(); ++i) {
      double mean = 0.0;
      for (int c = 0; c < x.cols(); ++c) mean += x.at(i, c);
      mean /= x.cols();
      double var = 0.0;
      for (int c = 0; c < x.cols(); ++c) var += (x.at(i, c) - mean) * (x.at(i, c) - mean);
      var /= x.cols();
      for (int c = 0; c < x.cols(); ++c)
        y.at(i, c) = (x.at(i, c) - mean) / std::sqrt(var + 1e-5) * gamma.at(0, c) + beta.at(0, c);
    }
    return y;
  };
  Tensor h1({m, d});
  for (int i = 0; i < m; ++i)
    for (int c = 0; c < d; ++c) h1.at(i, c) = tokens.at(i, c) + att_out.at(i, c);
  h1 = layer_norm(h1, "tpfe.l0.ln1g", "tpfe.l0.ln1b");
  Tensor ff = apply_linear(h1, "tpfe.l0.ffw1", "tpfe.l0.ffb1");
  for (std::int64_t i = 0; i < ff.size(); ++i) ff[i] = std::max(0.0, ff[i]);
  ff = apply_linear(ff, "tpfe.l0.ffw2", "tpfe.l0.ffb2");
  Tensor h2({m, d});
  for (int i = 0; i < m; ++i)
    for (int c = 0; c < d; ++c) h2.at(i, c) = h1.at(i, c) + ff.at(i, c);
  h2 = layer_norm(h2, "tpfe.l0.ln2g", "tpfe.l0.ln2b");
  const Tensor expected = apply_linear(h2, "tpfe.out.w", "tpfe.out.b");

  for (int i = 0; i < m; ++i)
    for (int c = 0; c < expected.cols(); ++c)
      CHECK(fwd.r_t.val().at(i, c) == doctest::Approx(expected.at(i, c)).epsilon(1e-9));
}

TEST_CASE("tp classifier: zero weights and linearity without bias") {
  const HtclModel model(tiny_config());
  ParamStore store = make_store(model, 13);
  store.value("tpc.w").fill(0.0);
  store.value("tpc.b").fill(0.0);
  Graph g;
  const SceneForward fwd = model.forward(g, store, make_scene(4, 99), {{0, 1}, {2, 3}});
  CHECK(fwd.z_t.val().rows() == 2);
  for (int i = 0; i < 2; ++i)
    for (int c = 0; c < model.config().num_predicates; ++c) CHECK(fwd.z_t.val().at(i, c) == 0.0);

  // linearity through the bare matmul
  Graph g2;
  Rng rng(5);
  Tensor w({3, 4});
  for (std::int64_t i = 0; i < w.size(); ++i) w[i] = rng.normal();
  Tensor x({2, 3});
  for (std::int64_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
  const Value wa = g2.constant(w);
  const Value lhs = matmul(g2.constant([&] {
                             Tensor sx = x;
                             for (std::int64_t i = 0; i < sx.size(); ++i) sx[i] *= 2.5;
                             return sx;
                           }()),
                           wa);
  const Value rhs = scale(matmul(g2.constant(x), wa), 2.5);
  for (std::int64_t i = 0; i < lhs.val().size(); ++i)
    CHECK(lhs.val()[i] == doctest::Approx(rhs.val()[i]).epsilon(1e-12));
}

TEST_CASE("cooperate: convex combination of normalized branch predictions") {
  const HtclModel model(tiny_config());
  ParamStore store = make_store(model, 14);
  const int C = model.config().num_predicates;
  Rng rng(3);

  auto softmax_row = [&](const Tensor& z, int row) {
    std::vector<double> p(static_cast<std::size_t>(C));
    double mx = -1e300, sum = 0.0;
    for (int c = 0; c < C; ++c) mx = std::max(mx, z.at(row, c));
    for (int c = 0; c < C; ++c) {
      p[static_cast<std::size_t>(c)] = std::exp(z.at(row, c) - mx);
      sum += p[static_cast<std::size_t>(c)];
    }
    for (double& v : p) v /= sum;
    return p;
  };

  Tensor zh({2, C}), zt({2, C});
  for (std::int64_t i = 0; i < zh.size(); ++i) zh[i] = rng.normal(0, 2);
  for (std::int64_t i = 0; i < zt.size(); ++i) zt[i] = rng.normal(0, 2);

  SUBCASE("zero gate parameters mix both branches equally") {
    store.value("gate.c").fill(0.0);
    Graph g;
    const Value zo = model.cooperate(g, store, g.constant(zh), g.constant(zt));
    const auto ph = softmax_row(zh, 0);
    const auto pt = softmax_row(zt, 0);
    for (int c = 0; c < C; ++c)
      CHECK(zo.val().at(0, c) ==
            doctest::Approx(0.5 * ph[static_cast<std::size_t>(c)] + 0.5 * pt[static_cast<std::size_t>(c)])
                .epsilon(1e-12));
  }
  SUBCASE("identical branches are unchanged by any gate") {
    for (std::int64_t i = 0; i < store.value("gate.c").size(); ++i)
      store.value("gate.c")[i] = rng.normal();
    Graph g;
    const Value zo = model.cooperate(g, store, g.constant(zh), g.constant(zh));
    const auto ph0 = softmax_row(zh, 0);
    const auto ph1 = softmax_row(zh, 1);
    for (int c = 0; c < C; ++c) {
      CHECK(zo.val().at(0, c) == doctest::Approx(ph0[static_cast<std::size_t>(c)]).epsilon(1e-12));
      CHECK(zo.val().at(1, c) == doctest::Approx(ph1[static_cast<std::size_t>(c)]).epsilon(1e-12));
    }
  }
  SUBCASE("saturated gates hand the argmax to one branch") {
    store.value("gate.c").fill(20.0);
    Graph g;
    const Value zo = model.cooperate(g, store, g.constant(zh), g.constant(zt));
    for (int i = 0; i < 2; ++i) {
      const auto ph = softmax_row(zh, i);
      const int expect = static_cast<int>(std::max_element(ph.begin(), ph.end()) - ph.begin());
      int got = 0;
      for (int c = 1; c < C; ++c)
        if (zo.val().at(i, c) > zo.val().at(i, got)) got = c;
      CHECK(got == expect);
    }
    store.value("gate.c").fill(-20.0);
    Graph g2;
    const Value zo2 = model.cooperate(g2, store, g2.constant(zh), g2.constant(zt));
    for (int i = 0; i < 2; ++i) {
      const auto pt = softmax_row(zt, i);
      const int expect = static_cast<int>(std::max_element(pt.begin(), pt.end()) - pt.begin());
      int got = 0;
      for (int c = 1; c < C; ++c)
        if (zo2.val().at(i, c) > zo2.val().at(i, got)) got = c;
      CHECK(got == expect);
    }
  }
  SUBCASE("componentwise bounds hold for random gates") {
    for (std::int64_t i = 0; i < store.value("gate.c").size(); ++i)
      store.value("gate.c")[i] = rng.normal(0, 3);
    Graph g;
    const Value zo = model.cooperate(g, store, g.constant(zh), g.constant(zt));
    for (int i = 0; i < 2; ++i) {
      const auto ph = softmax_row(zh, i);
      const auto pt = softmax_row(zt, i);
      for (int c = 0; c < C; ++c) {
        const double lo = std::min(ph[static_cast<std::size_t>(c)], pt[static_cast<std::size_t>(c)]);
        const double hi = std::max(ph[static_cast<std::size_t>(c)], pt[static_cast<std::size_t>(c)]);
        CHECK(zo.val().at(i, c) >= lo - 1e-12);
        CHECK(zo.val().at(i, c) <= hi + 1e-12);
      }
    }
  }
}

TEST_CASE("init_gate: log counts, monotone in frequency") {
  ClassStats stats;
  stats.counts = {1, 7, 100, 0};
  const Tensor c = HtclModel::init_gate_values(stats);
  CHECK(c.at(0, 0) == 0.0);
  CHECK(c.at(0, 1) == doctest::Approx(std::log(7.0)).epsilon(1e-15));
  CHECK(c.at(0, 3) == 0.0);  // ln(max(n,1))
  // frozen oracle values: ln 7 = 1.945910149..., sigmoid(ln 7) = 7/8
  CHECK(c.at(0, 1) == doctest::Approx(1.9459101490553133).epsilon(1e-14));
  CHECK(1.0 / (1.0 + std::exp(-c.at(0, 1))) == doctest::Approx(0.875).epsilon(1e-12));
  for (int i = 0; i + 1 < 3; ++i) CHECK(c.at(0, i) < c.at(0, i + 1));
}

TEST_CASE("pipeline gradient check at a scalar loss") {
  ModelConfig cfg = tiny_config(BranchMode::HpOnly);
  const HtclModel model(cfg);
  const SynthSceneGraph scene = make_scene(4, 123);
  ParamStore store = make_store(model, 15);
  const auto report = grad_check(
      [&](Graph& g, ParamStore& s) {
        const SceneForward fwd = model.forward(g, s, scene, {{0, 1}, {2, 3}, {1, 2}});
        const Value loss_pred = softmax_cross_entropy_sum(fwd.z_h, {0, 2, 4});
        const Value loss_obj = softmax_cross_entropy_sum(fwd.label_logits, {0, 1, 2, 3});
        return add(scale(loss_pred, 1.0 / 3.0), scale(loss_obj, 0.25));
      },
      store, 1e-5, 1e-4, 40, 77);
  CAPTURE(report.worst.param);
  CAPTURE(report.worst.analytic);
  CAPTURE(report.worst.numeric);
  CHECK(report.max_rel_err <= 1e-4);
}
