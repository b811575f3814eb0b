#include <cmath>
#include <vector>

#include "doctest.h"
#include "htcl/grad_check.hpp"
#include "htcl/losses.hpp"
#include "htcl/model.hpp"

using namespace htcl;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, scale);
  return t;
}

Tensor unit_rows(Tensor t) {
  for (int i = 0; i < t.rows(); ++i) {
    double s = 0.0;
    for (int c = 0; c < t.cols(); ++c) s += t.at(i, c) * t.at(i, c);
    s = std::sqrt(s);
    for (int c = 0; c < t.cols(); ++c) t.at(i, c) /= s;
  }
  return t;
}

// Independent enumeration of the contrastive loss over all anchors.
double contrastive_brute_force(const Tensor& q, double tau) {
  const int total = q.rows();
  const int m = total / 2;
  double loss = 0.0;
  for (int i = 0; i < total; ++i) {
    const int j = (i + m) % total;
    auto dot = [&](int a, int b) {
      double acc = 0.0;
      for (int c = 0; c < q.cols(); ++c) acc += q.at(a, c) * q.at(b, c);
      return acc / tau;
    };
    double mx = -1e300;
    for (int a = 0; a < total; ++a)
      if (a != i) mx = std::max(mx, dot(i, a));
    double z = 0.0;
    for (int a = 0; a < total; ++a)
      if (a != i) z += std::exp(dot(i, a) - mx);
    loss += -(dot(i, j) - (mx + std::log(z)));
  }
  return loss;
}

ClassStats stats_with_heads(std::vector<std::int64_t> counts, int h) {
  Dataset d;
  d.meta.num_predicates = static_cast<int>(counts.size());
  d.meta.num_obj_classes = 2;
  d.meta.visual_dim = 1;
  std::int64_t id = 0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    for (std::int64_t k = 0; k < counts[c]; ++k) {
      SynthSceneGraph img;
      img.image_id = id++;
      img.objects.resize(2);
      for (auto& o : img.objects) {
        o.class_id = 0;
        o.bbox = {0.1, 0.1, 0.5, 0.5};
        o.visual = {0.0};
      }
      img.relations.push_back({0, 1, static_cast<int>(c)});
      d.images.push_back(std::move(img));
    }
  }
  return class_stats(d, 0.5, h);
}

}  // namespace

TEST_CASE("mask augmentation: limit cases and empirical rate") {
  Rng rng(17);
  SUBCASE("p_m = 0 keeps every token") {
    const auto mask = draw_mask(64, 0.0, rng);
    for (const char b : mask) CHECK(b == 0);
    Graph g;
    const Value tokens = g.constant(random_tensor({5, 4}, rng));
    const Value masked = mask_tokens(g, tokens, draw_mask(5, 0.0, rng));
    CHECK(masked.val().vec() == tokens.val().vec());
  }
  SUBCASE("p_m = 1 replaces every token with the mean") {
    Graph g;
    const Value tokens = g.constant(random_tensor({5, 4}, rng));
    const Value masked = mask_tokens(g, tokens, draw_mask(5, 1.0, rng));
    const Value mean = mean_rows(tokens);
    for (int i = 0; i < 5; ++i)
      for (int c = 0; c < 4; ++c) CHECK(masked.val().at(i, c) == mean.val().at(0, c));
  }
  SUBCASE("masked fraction concentrates around p_m") {
    const auto mask = draw_mask(10000, 0.1, rng);
    std::int64_t on = 0;
    for (const char b : mask) on += b;
    const double frac = static_cast<double>(on) / 10000.0;
    CHECK(frac >= 0.08);
    CHECK(frac <= 0.12);
  }
}

TEST_CASE("contrastive loss: single relation contributes nothing") {
  Rng rng(4);
  Graph g;
  const Value q = g.constant(unit_rows(random_tensor({2, 6}, rng)));
  CHECK(contrastive_loss_sum(g, q, 0.1).val().item() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("contrastive loss: matches brute force and the frozen toy value") {
  // two relations, two views: unit vectors at 0, 90, 30 and 120 degrees
  const double pi = 3.14159265358979323846;
  Tensor q({4, 2});
  const double angles[4] = {0.0, pi / 2, pi / 6, 2 * pi / 3};
  for (int i = 0; i < 4; ++i) {
    q.at(i, 0) = std::cos(angles[i]);
    q.at(i, 1) = std::sin(angles[i]);
  }
  Graph g;
  const double got = contrastive_loss_sum(g, g.constant(q), 0.1).val().item();
  CHECK(got == doctest::Approx(contrastive_brute_force(q, 0.1)).epsilon(1e-12));
  // frozen from a 40-digit arbitrary-precision enumeration of the same setup
  CHECK(got == doctest::Approx(0.05148820629925386).epsilon(1e-10));
}

TEST_CASE("contrastive loss: permutation and rotation invariance, positivity") {
  Rng rng(8);
  const int m = 5, d = 8;
  const Tensor q = unit_rows(random_tensor({2 * m, d}, rng));

  Graph g;
  const double base = contrastive_loss_sum(g, g.constant(q), 0.1).val().item();
  CHECK(base >= 0.0);

  // permuting relation order (consistently in both views) leaves the sum unchanged
  const std::vector<int> perm = {3, 0, 4, 1, 2};
  Tensor qp({2 * m, d});
  for (int i = 0; i < m; ++i)
    for (int c = 0; c < d; ++c) {
      qp.at(i, c) = q.at(perm[static_cast<std::size_t>(i)], c);
      qp.at(i + m, c) = q.at(perm[static_cast<std::size_t>(i)] + m, c);
    }
  Graph g2;
  CHECK(contrastive_loss_sum(g2, g2.constant(qp), 0.1).val().item() == doctest::Approx(base).epsilon(1e-12));

  // a global rotation preserves inner products, hence the loss
  Tensor rot = random_tensor({d, d}, rng);
  for (int c = 0; c < d; ++c) {  // Gram-Schmidt
    for (int p = 0; p < c; ++p) {
      double dot = 0.0;
      for (int r = 0; r < d; ++r) dot += rot.at(r, c) * rot.at(r, p);
      for (int r = 0; r < d; ++r) rot.at(r, c) -= dot * rot.at(r, p);
    }
    double nrm = 0.0;
    for (int r = 0; r < d; ++r) nrm += rot.at(r, c) * rot.at(r, c);
    nrm = std::sqrt(nrm);
    for (int r = 0; r < d; ++r) rot.at(r, c) /= nrm;
  }
  Tensor qr({2 * m, d});
  for (int i = 0; i < 2 * m; ++i)
    for (int c = 0; c < d; ++c) {
      double acc = 0.0;
      for (int r = 0; r < d; ++r) acc += q.at(i, r) * rot.at(r, c);
      qr.at(i, c) = acc;
    }
  Graph g3;
  CHECK(contrastive_loss_sum(g3, g3.constant(qr), 0.1).val().item() == doctest::Approx(base).epsilon(1e-9));
}

TEST_CASE("contrastive loss: pulling a positive pair together lowers the loss") {
  Rng rng(10);
  const int m = 3, d = 6;
  Tensor q = unit_rows(random_tensor({2 * m, d}, rng));
  Graph g;
  const double before = contrastive_loss_sum(g, g.constant(q), 0.1).val().item();
  // move view-2 of relation 0 toward its anchor on the sphere
  for (int c = 0; c < d; ++c) q.at(m, c) = 0.9 * q.at(0, c) + 0.1 * q.at(m, c);
  Tensor q2 = q;
  {
    double s = 0.0;
    for (int c = 0; c < d; ++c) s += q2.at(m, c) * q2.at(m, c);
    s = std::sqrt(s);
    for (int c = 0; c < d; ++c) q2.at(m, c) /= s;
  }
  Graph g2;
  const double after = contrastive_loss_sum(g2, g2.constant(q2), 0.1).val().item();
  CHECK(after < before);
}

TEST_CASE("head center loss: distances to initialized head centers only") {
  const ClassStats stats = stats_with_heads({10, 10, 1, 1}, 2);  // heads: {0, 1}
  ClassCenters centers(4, 3, 0.9);
  centers.initialized[0] = 1;
  centers.initialized[1] = 0;  // head class 1 not seen yet
  centers.values.at(0, 0) = 1.0;
  centers.values.at(0, 1) = -2.0;
  centers.values.at(0, 2) = 0.5;

  SUBCASE("feature equal to its center contributes zero") {
    Graph g;
    Tensor feats({1, 3}, {1.0, -2.0, 0.5});
    const double loss = head_center_loss_sum(g, g.constant(feats), {0}, centers, stats).val().item();
    CHECK(loss == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("single sample contributes its Euclidean distance") {
    Graph g;
    Tensor feats({1, 3}, {1.0 + 3.0, -2.0 + 4.0, 0.5});
    const double loss = head_center_loss_sum(g, g.constant(feats), {0}, centers, stats).val().item();
    CHECK(loss == doctest::Approx(5.0).epsilon(1e-12));
  }
  SUBCASE("batch sums distances, skipping tail and uninitialized classes") {
    Graph g;
    Tensor feats({4, 3},
                 {2.0, -2.0, 0.5,    // class 0, distance 1
                  1.0, -2.0, 2.5,    // class 0, distance 2
                  9.0, 9.0, 9.0,     // class 1, uninitialized -> skipped
                  7.0, 7.0, 7.0});   // class 2, tail -> skipped
    const double loss =
        head_center_loss_sum(g, g.constant(feats), {0, 0, 1, 2}, centers, stats).val().item();
    CHECK(loss == doctest::Approx(3.0).epsilon(1e-12));
  }
  SUBCASE("translation covariance: shifting feature and center together changes nothing") {
    Graph g;
    Tensor feats({1, 3}, {4.0, 1.0, 2.0});
    const double base = head_center_loss_sum(g, g.constant(feats), {0}, centers, stats).val().item();
    ClassCenters shifted = centers;
    Tensor feats2 = feats;
    for (int c = 0; c < 3; ++c) {
      shifted.values.at(0, c) += 11.25;
      feats2.at(0, c) += 11.25;
    }
    Graph g2;
    const double moved = head_center_loss_sum(g2, g2.constant(feats2), {0}, shifted, stats).val().item();
    CHECK(moved == doctest::Approx(base).epsilon(1e-12));
  }
}

TEST_CASE("center updates: first occurrence initializes, then EMA, no gradient flow") {
  const ClassStats stats = stats_with_heads({5, 5, 1}, 2);
  ClassCenters centers(3, 2, 0.9);
  Tensor feats({3, 2}, {1.0, 2.0, 3.0, 4.0, 100.0, 100.0});
  centers.update(feats, {0, 0, 2}, stats);  // class 2 is tail: ignored
  CHECK(centers.initialized[0] == 1);
  CHECK(centers.initialized[1] == 0);
  CHECK(centers.values.at(0, 0) == doctest::Approx(2.0));
  CHECK(centers.values.at(0, 1) == doctest::Approx(3.0));
  CHECK(centers.values.at(2, 0) == 0.0);
  Tensor feats2({1, 2}, {4.0, 5.0});
  centers.update(feats2, {0}, stats);
  CHECK(centers.values.at(0, 0) == doctest::Approx(0.9 * 2.0 + 0.1 * 4.0));
  CHECK(centers.values.at(0, 1) == doctest::Approx(0.9 * 3.0 + 0.1 * 5.0));
}

TEST_CASE("re-weighted cross entropy on probabilities") {
  SUBCASE("unit weights reduce to standard cross entropy") {
    Graph g;
    Tensor p({2, 3}, {0.7, 0.2, 0.1, 0.25, 0.5, 0.25});
    const double got =
        reweighted_nll_sum(g, g.constant(p), {0, 1}, {1.0, 1.0, 1.0}).val().item() / 2.0;
    const double expect = -(std::log(0.7) + std::log(0.5)) / 2.0;
    CHECK(got == doctest::Approx(expect).epsilon(1e-12));
  }
  SUBCASE("perfect prediction costs nothing") {
    Graph g;
    Tensor p({1, 2}, {1.0, 0.0});
    CHECK(reweighted_nll_sum(g, g.constant(p), {0}, {3.0, 1.0}).val().item() ==
          doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("two-class toy with weights [1,2] matches hand arithmetic") {
    Graph g;
    Tensor p({2, 2}, {0.8, 0.2, 0.4, 0.6});
    const double got = reweighted_nll_sum(g, g.constant(p), {0, 1}, {1.0, 2.0}).val().item();
    const double expect = -(1.0 * std::log(0.8) + 2.0 * std::log(0.6));
    CHECK(got == doctest::Approx(expect).epsilon(1e-12));
  }
  SUBCASE("zero probability is clamped and flagged") {
    Graph g;
    Tensor p({1, 2}, {0.0, 1.0});
    const double got = reweighted_nll_sum(g, g.constant(p), {0}, {1.0, 1.0}).val().item();
    CHECK(got == doctest::Approx(-std::log(1e-12)).epsilon(1e-12));
    CHECK(g.clamp_events() == 1);
  }
  SUBCASE("uniform class counts weight every class equally") {
    const ClassStats stats = stats_with_heads({7, 7, 7}, 1);
    CHECK(stats.weights[0] == stats.weights[1]);
    CHECK(stats.weights[1] == stats.weights[2]);
    Graph g;
    Rng rng(3);
    Tensor logits = random_tensor({4, 3}, rng);
    const Value p = softmax_rows(g.constant(logits));
    const double weighted = reweighted_nll_sum(g, p, {0, 2, 1, 1}, stats.weights).val().item();
    const double plain = reweighted_nll_sum(g, p, {0, 2, 1, 1}, {1.0, 1.0, 1.0}).val().item();
    CHECK(weighted == doctest::Approx(stats.weights[0] * plain).epsilon(1e-10));
  }
}

TEST_CASE("softmax cross entropy: uniform logits, confident logits, oracle batch") {
  Graph g;
  SUBCASE("uniform logits cost ln C") {
    const double loss =
        scale(softmax_cross_entropy_sum(g.constant(Tensor({1, 7})), {3}), 1.0).val().item();
    CHECK(loss == doctest::Approx(std::log(7.0)).epsilon(1e-12));
  }
  SUBCASE("dominant correct logit drives the loss to zero") {
    Tensor z({1, 4});
    z.at(0, 2) = 50.0;
    CHECK(softmax_cross_entropy_sum(g.constant(z), {2}).val().item() ==
          doctest::Approx(0.0).epsilon(1e-10));
  }
  SUBCASE("random four-class batch matches a log-softmax gather oracle") {
    Rng rng(6);
    Tensor z = random_tensor({5, 4}, rng, 2.0);
    const std::vector<int> labels = {0, 3, 1, 2, 2};
    const double got = softmax_cross_entropy_sum(g.constant(z), labels).val().item() / 5.0;
    double expect = 0.0;
    for (int i = 0; i < 5; ++i) {
      double mx = -1e300, lse = 0.0;
      for (int c = 0; c < 4; ++c) mx = std::max(mx, z.at(i, c));
      for (int c = 0; c < 4; ++c) lse += std::exp(z.at(i, c) - mx);
      expect += -(z.at(i, labels[static_cast<std::size_t>(i)]) - (mx + std::log(lse)));
    }
    expect /= 5.0;
    CHECK(got == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("loss gradient checks across seeds") {
  SUBCASE("contrastive loss through projection and normalization") {
    for (int seed = 0; seed < 10; ++seed) {
      ParamStore store;
      Rng rng(100 + static_cast<std::uint64_t>(seed));
      store.add("w", init_linear_weight(6, 8, rng));
      store.add("b", Tensor::zeros({1, 8}));
      store.add("x", random_tensor({8, 6}, rng));
      const auto report = grad_check(
          [](Graph& g, ParamStore& s) {
            const Value q =
                l2_normalize_rows(linear(g.param(s, "x"), g.param(s, "w"), g.param(s, "b")));
            return contrastive_loss_sum(g, q, 0.1);
          },
          store, 1e-5, 1e-4, 60, static_cast<std::uint64_t>(seed));
      CAPTURE(seed);
      CHECK(report.max_rel_err <= 1e-4);
    }
  }
  SUBCASE("head center loss") {
    const ClassStats stats = stats_with_heads({9, 9, 1, 1}, 2);
    for (int seed = 0; seed < 10; ++seed) {
      ClassCenters centers(4, 5, 0.9);
      Rng crng(300 + static_cast<std::uint64_t>(seed));
      for (int c : {0, 1}) {
        centers.initialized[static_cast<std::size_t>(c)] = 1;
        for (int d = 0; d < 5; ++d) centers.values.at(c, d) = crng.normal();
      }
      ParamStore store;
      store.add("feats", random_tensor({6, 5}, crng));
      const auto report = grad_check(
          [&](Graph& g, ParamStore& s) {
            return head_center_loss_sum(g, g.param(s, "feats"), {0, 1, 0, 2, 1, 3}, centers, stats);
          },
          store, 1e-5, 1e-4, 100, static_cast<std::uint64_t>(seed));
      CAPTURE(seed);
      CHECK(report.max_rel_err <= 1e-4);
    }
  }
  SUBCASE("re-weighted cross entropy through the double softmax") {
    for (int seed = 0; seed < 10; ++seed) {
      ParamStore store;
      Rng rng(500 + static_cast<std::uint64_t>(seed));
      store.add("zh", random_tensor({4, 5}, rng, 2.0));
      store.add("zt", random_tensor({4, 5}, rng, 2.0));
      store.add("c", random_tensor({1, 5}, rng));
      const std::vector<double> w = {0.1, 0.5, 1.0, 2.0, 4.0};
      const auto report = grad_check(
          [&w](Graph& g, ParamStore& s) {
            const Value gate = sigmoid(g.param(s, "c"));
            const Value inv = add_scalar(scale(gate, -1.0), 1.0);
            const Value zo = add(mul_rowvec(softmax_rows(g.param(s, "zh")), gate),
                                 mul_rowvec(softmax_rows(g.param(s, "zt")), inv));
            return scale(reweighted_nll_sum(g, softmax_rows(zo), {0, 2, 4, 1}, w), 0.25);
          },
          store, 1e-5, 1e-4, 60, static_cast<std::uint64_t>(seed));
      CAPTURE(seed);
      CHECK(report.max_rel_err <= 1e-4);
    }
  }
}

TEST_CASE("full training loss on a two-image toy batch passes the gradient check") {
  ModelConfig cfg;
  cfg.num_obj_classes = 3;
  cfg.num_predicates = 4;
  cfg.visual_dim = 5;
  cfg.embed_dim = 6;
  cfg.pos_dim = 4;
  cfg.object_dim = 8;
  cfg.context_dim = 8;
  cfg.predicate_dim = 8;
  cfg.model_dim = 8;
  cfg.tpfe_layers = 2;
  cfg.heads = 2;
  cfg.ffn_dim = 12;
  cfg.proj_dim = 6;
  const HtclModel model(cfg);

  ParamStore store;
  Rng rng(9001);
  model.init_params(store, rng);
  for (std::int64_t i = 0; i < store.value("gate.c").size(); ++i)
    store.value("gate.c")[i] = rng.normal();

  // two toy scenes with fixed relations
  std::vector<SynthSceneGraph> scenes;
  for (int s = 0; s < 2; ++s) {
    SynthSceneGraph scene;
    scene.image_id = s;
    scene.objects.resize(4);
    for (auto& o : scene.objects) {
      o.class_id = rng.uniform_int(0, 2);
      o.bbox = {rng.uniform(0.0, 0.4), rng.uniform(0.0, 0.4), rng.uniform(0.5, 1.0), rng.uniform(0.5, 1.0)};
      o.visual.resize(5);
      for (double& v : o.visual) v = rng.normal();
    }
    scene.relations.push_back({0, 1, rng.uniform_int(0, 3)});
    scene.relations.push_back({2, 3, rng.uniform_int(0, 3)});
    scenes.push_back(std::move(scene));
  }
  const ClassStats stats = stats_with_heads({6, 3, 2, 1}, 2);
  ClassCenters centers(4, cfg.predicate_dim, 0.9);
  for (int c : {0, 1}) {
    centers.initialized[static_cast<std::size_t>(c)] = 1;
    for (int d = 0; d < cfg.predicate_dim; ++d) centers.values.at(c, d) = rng.normal(0.0, 0.5);
  }
  // fixed masks make the builder deterministic
  const std::vector<std::vector<char>> masks = {{1, 0}, {0, 1}};
  const double lambda = 1e-4, tau = 0.1;

  const auto build = [&](Graph& g, ParamStore& s) {
    std::vector<Value> terms;
    std::int64_t n_rel = 0, n_obj = 0;
    Value con_total, hc_total, rw_total, hpc_total, obj_total;
    bool first = true;
    for (std::size_t si = 0; si < scenes.size(); ++si) {
      const auto& scene = scenes[si];
      std::vector<std::pair<int, int>> pairs;
      std::vector<int> labels;
      for (const auto& rel : scene.relations) {
        pairs.emplace_back(rel.subj, rel.obj);
        labels.push_back(rel.predicate);
      }
      std::vector<int> obj_labels;
      for (const auto& o : scene.objects) obj_labels.push_back(o.class_id);
      const SceneForward fwd = model.forward(g, s, scene, pairs);
      n_rel += static_cast<std::int64_t>(pairs.size());
      n_obj += static_cast<std::int64_t>(obj_labels.size());

      const Value masked = mask_tokens(g, fwd.tokens, masks[si]);
      const Value r_t_masked = model.tpfe_encode(g, s, masked);
      const Value q = concat_rows(model.project_to_sphere(g, s, fwd.r_t),
                                  model.project_to_sphere(g, s, r_t_masked));
      const Value con = contrastive_loss_sum(g, q, tau);
      const Value hc = head_center_loss_sum(g, fwd.r_t, labels, centers, stats);
      const Value rw = reweighted_nll_sum(g, fwd.p_hat, labels, stats.weights);
      const Value hpc = softmax_cross_entropy_sum(fwd.z_h, labels);
      const Value obj = softmax_cross_entropy_sum(fwd.label_logits, obj_labels);
      if (first) {
        con_total = con;
        hc_total = hc;
        rw_total = rw;
        hpc_total = hpc;
        obj_total = obj;
        first = false;
      } else {
        con_total = add(con_total, con);
        hc_total = add(hc_total, hc);
        rw_total = add(rw_total, rw);
        hpc_total = add(hpc_total, hpc);
        obj_total = add(obj_total, obj);
      }
    }
    Value total = add(con_total, scale(hc_total, lambda));
    total = add(total, scale(rw_total, 1.0 / static_cast<double>(n_rel)));
    total = add(total, scale(hpc_total, 1.0 / static_cast<double>(n_rel)));
    total = add(total, scale(obj_total, 1.0 / static_cast<double>(n_obj)));
    return total;
  };

  const auto report = grad_check(build, store, 1e-5, 1e-4, 25, 4242);
  CAPTURE(report.worst.param);
  CAPTURE(report.worst.analytic);
  CAPTURE(report.worst.numeric);
  CAPTURE(report.entries_checked);
  CHECK(report.max_rel_err <= 1e-4);
}
