#include "htcl/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace htcl {

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

namespace {

template <class T>
T cfg_field(const nlohmann::json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const std::exception&) {
    throw std::invalid_argument("train config: field '" + key + "' has the wrong type");
  }
}

}  // namespace

TrainConfig TrainConfig::from_json_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    throw std::invalid_argument(std::string("train config: invalid JSON: ") + e.what());
  }
  TrainConfig c;
  c.seed = cfg_field<std::uint64_t>(j, "seed", c.seed);
  c.epochs = cfg_field<int>(j, "epochs", c.epochs);
  c.batch_size = cfg_field<int>(j, "batch_size", c.batch_size);
  c.lr = cfg_field<double>(j, "lr", c.lr);
  c.beta = cfg_field<double>(j, "beta", c.beta);
  c.lambda = cfg_field<double>(j, "lambda", c.lambda);
  c.tau = cfg_field<double>(j, "tau", c.tau);
  c.p_m = cfg_field<double>(j, "p_m", c.p_m);
  c.h = cfg_field<int>(j, "h", c.h);
  c.tpfe_layers = cfg_field<int>(j, "tpfe_layers", c.tpfe_layers);
  c.resample_target = cfg_field<int>(j, "T", c.resample_target);
  c.ft_epochs = cfg_field<int>(j, "ft_epochs", c.ft_epochs);
  c.ft_lr = cfg_field<double>(j, "ft_lr", c.ft_lr);
  c.ft_batch = cfg_field<int>(j, "ft_batch", c.ft_batch);
  c.val_fraction = cfg_field<double>(j, "val_fraction", c.val_fraction);
  c.center_momentum = cfg_field<double>(j, "center_momentum", c.center_momentum);
  c.task = task_from_string(cfg_field<std::string>(j, "task", to_string(c.task)));
  if (j.contains("dims")) {
    const auto& d = j["dims"];
    c.dims.embed_dim = cfg_field<int>(d, "embed_dim", c.dims.embed_dim);
    c.dims.pos_dim = cfg_field<int>(d, "pos_dim", c.dims.pos_dim);
    c.dims.object_dim = cfg_field<int>(d, "object_dim", c.dims.object_dim);
    c.dims.context_dim = cfg_field<int>(d, "context_dim", c.dims.context_dim);
    c.dims.predicate_dim = cfg_field<int>(d, "predicate_dim", c.dims.predicate_dim);
    c.dims.model_dim = cfg_field<int>(d, "model_dim", c.dims.model_dim);
    c.dims.heads = cfg_field<int>(d, "heads", c.dims.heads);
    c.dims.ffn_dim = cfg_field<int>(d, "ffn_dim", c.dims.ffn_dim);
    c.dims.proj_dim = cfg_field<int>(d, "proj_dim", c.dims.proj_dim);
  }
  if (j.contains("toggles")) {
    const auto& t = j["toggles"];
    c.toggles.use_tpfe = cfg_field<bool>(t, "use_tpfe", c.toggles.use_tpfe);
    c.toggles.use_tpc_ft = cfg_field<bool>(t, "use_tpc_ft", c.toggles.use_tpc_ft);
    c.toggles.use_l_ssl = cfg_field<bool>(t, "use_l_ssl", c.toggles.use_l_ssl);
    c.toggles.use_l_con = cfg_field<bool>(t, "use_l_con", c.toggles.use_l_con);
    c.toggles.use_l_hc = cfg_field<bool>(t, "use_l_hc", c.toggles.use_l_hc);
    c.toggles.use_l_hpc = cfg_field<bool>(t, "use_l_hpc", c.toggles.use_l_hpc);
    c.toggles.use_l_rw = cfg_field<bool>(t, "use_l_rw", c.toggles.use_l_rw);
    c.toggles.branch_mode =
        branch_mode_from_string(cfg_field<std::string>(t, "branch_mode", to_string(c.toggles.branch_mode)));
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("train config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

std::string TrainConfig::to_json_text() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["lr"] = lr;
  j["beta"] = beta;
  j["lambda"] = lambda;
  j["tau"] = tau;
  j["p_m"] = p_m;
  j["h"] = h;
  j["tpfe_layers"] = tpfe_layers;
  j["T"] = resample_target;
  j["ft_epochs"] = ft_epochs;
  j["ft_lr"] = ft_lr;
  j["ft_batch"] = ft_batch;
  j["val_fraction"] = val_fraction;
  j["center_momentum"] = center_momentum;
  j["task"] = to_string(task);
  j["dims"] = {{"embed_dim", dims.embed_dim},   {"pos_dim", dims.pos_dim},
               {"object_dim", dims.object_dim}, {"context_dim", dims.context_dim},
               {"predicate_dim", dims.predicate_dim}, {"model_dim", dims.model_dim},
               {"heads", dims.heads},           {"ffn_dim", dims.ffn_dim},
               {"proj_dim", dims.proj_dim}};
  j["toggles"] = {{"use_tpfe", toggles.use_tpfe},   {"use_tpc_ft", toggles.use_tpc_ft},
                  {"use_l_ssl", toggles.use_l_ssl}, {"use_l_con", toggles.use_l_con},
                  {"use_l_hc", toggles.use_l_hc},   {"use_l_hpc", toggles.use_l_hpc},
                  {"use_l_rw", toggles.use_l_rw},   {"branch_mode", to_string(toggles.branch_mode)}};
  return j.dump(2);
}

void TrainConfig::validate() const {
  if (epochs < 0) throw std::invalid_argument("train config: epochs must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
  if (lr < 0 || ft_lr < 0) throw std::invalid_argument("train config: learning rates must be >= 0");
  if (!(beta > 0 && beta < 1)) throw std::invalid_argument("train config: beta must be in (0,1)");
  if (lambda < 0) throw std::invalid_argument("train config: lambda must be >= 0");
  if (tau <= 0) throw std::invalid_argument("train config: tau must be > 0");
  if (p_m < 0 || p_m > 1) throw std::invalid_argument("train config: p_m must lie in [0,1]");
  if (h < 1) throw std::invalid_argument("train config: h must be >= 1");
  if (tpfe_layers < 1) throw std::invalid_argument("train config: tpfe_layers must be >= 1");
  if (resample_target < 1) throw std::invalid_argument("train config: T must be >= 1");
  if (ft_epochs < 0) throw std::invalid_argument("train config: ft_epochs must be >= 0");
  if (ft_batch < 1) throw std::invalid_argument("train config: ft_batch must be >= 1");
  if (val_fraction < 0 || val_fraction >= 1)
    throw std::invalid_argument("train config: val_fraction must lie in [0,1)");
  if (!(center_momentum >= 0 && center_momentum < 1))
    throw std::invalid_argument("train config: center_momentum must lie in [0,1)");
}

ModelConfig TrainConfig::model_config(const DatasetMeta& meta) const {
  ModelConfig m;
  m.num_obj_classes = meta.num_obj_classes;
  m.num_predicates = meta.num_predicates;
  m.visual_dim = meta.visual_dim;
  m.embed_dim = dims.embed_dim;
  m.pos_dim = dims.pos_dim;
  m.object_dim = dims.object_dim;
  m.context_dim = dims.context_dim;
  m.predicate_dim = dims.predicate_dim;
  m.model_dim = dims.model_dim;
  m.tpfe_layers = tpfe_layers;
  m.heads = dims.heads;
  m.ffn_dim = dims.ffn_dim;
  m.proj_dim = dims.proj_dim;
  m.use_tpfe = toggles.use_tpfe;
  m.branch_mode = toggles.branch_mode;
  m.task = task;
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

namespace {

nlohmann::ordered_json model_config_to_json(const ModelConfig& m) {
  nlohmann::ordered_json j;
  j["num_obj_classes"] = m.num_obj_classes;
  j["num_predicates"] = m.num_predicates;
  j["visual_dim"] = m.visual_dim;
  j["embed_dim"] = m.embed_dim;
  j["pos_dim"] = m.pos_dim;
  j["object_dim"] = m.object_dim;
  j["context_dim"] = m.context_dim;
  j["predicate_dim"] = m.predicate_dim;
  j["model_dim"] = m.model_dim;
  j["tpfe_layers"] = m.tpfe_layers;
  j["heads"] = m.heads;
  j["ffn_dim"] = m.ffn_dim;
  j["proj_dim"] = m.proj_dim;
  j["use_tpfe"] = m.use_tpfe;
  j["branch_mode"] = to_string(m.branch_mode);
  j["task"] = to_string(m.task);
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig m;
  m.num_obj_classes = j.at("num_obj_classes").get<int>();
  m.num_predicates = j.at("num_predicates").get<int>();
  m.visual_dim = j.at("visual_dim").get<int>();
  m.embed_dim = j.at("embed_dim").get<int>();
  m.pos_dim = j.at("pos_dim").get<int>();
  m.object_dim = j.at("object_dim").get<int>();
  m.context_dim = j.at("context_dim").get<int>();
  m.predicate_dim = j.at("predicate_dim").get<int>();
  m.model_dim = j.at("model_dim").get<int>();
  m.tpfe_layers = j.at("tpfe_layers").get<int>();
  m.heads = j.at("heads").get<int>();
  m.ffn_dim = j.at("ffn_dim").get<int>();
  m.proj_dim = j.at("proj_dim").get<int>();
  m.use_tpfe = j.at("use_tpfe").get<bool>();
  m.branch_mode = branch_mode_from_string(j.at("branch_mode").get<std::string>());
  m.task = task_from_string(j.at("task").get<std::string>());
  m.validate();
  return m;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  nlohmann::ordered_json j;
  j["format_version"] = 1;
  j["model"] = model_config_to_json(ckpt.model);
  j["train"] = nlohmann::ordered_json::parse(ckpt.train.to_json_text());
  j["stats"] = {{"counts", ckpt.stats.counts},
                {"order", ckpt.stats.order},
                {"head_set", ckpt.stats.head_set},
                {"weights", ckpt.stats.weights},
                {"empty_classes", ckpt.stats.empty_classes}};
  {
    nlohmann::ordered_json centers;
    centers["momentum"] = ckpt.centers.momentum;
    centers["initialized"] = std::vector<int>(ckpt.centers.initialized.begin(), ckpt.centers.initialized.end());
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (int r = 0; r < ckpt.centers.values.rows(); ++r) {
      std::vector<double> row(static_cast<std::size_t>(ckpt.centers.values.cols()));
      for (int c = 0; c < ckpt.centers.values.cols(); ++c) row[static_cast<std::size_t>(c)] = ckpt.centers.values.at(r, c);
      rows.push_back(row);
    }
    centers["values"] = std::move(rows);
    j["centers"] = std::move(centers);
  }
  {
    nlohmann::ordered_json params = nlohmann::ordered_json::object();
    for (const auto& name : ckpt.params.names()) {
      const Tensor& t = ckpt.params.value(name);
      params[name] = {{"shape", t.shape()}, {"data", t.vec()}};
    }
    j["params"] = std::move(params);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open '" + path + "'");
  out << j.dump() << "\n";
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("load_checkpoint: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw std::invalid_argument("load_checkpoint: invalid JSON in '" + path + "': " + e.what());
  }
  if (!j.contains("format_version") || j["format_version"].get<int>() != 1)
    throw std::invalid_argument("load_checkpoint: unsupported format_version in '" + path + "'");

  Checkpoint ckpt;
  ckpt.model = model_config_from_json(j.at("model"));
  ckpt.train = TrainConfig::from_json_text(j.at("train").dump());
  const auto& st = j.at("stats");
  ckpt.stats.counts = st.at("counts").get<std::vector<std::int64_t>>();
  ckpt.stats.order = st.at("order").get<std::vector<int>>();
  ckpt.stats.head_set = st.at("head_set").get<std::vector<int>>();
  ckpt.stats.weights = st.at("weights").get<std::vector<double>>();
  ckpt.stats.empty_classes = st.at("empty_classes").get<std::vector<int>>();

  const auto& cj = j.at("centers");
  const auto init_flags = cj.at("initialized").get<std::vector<int>>();
  const auto rows = cj.at("values");
  const int n_rows = static_cast<int>(rows.size());
  const int n_cols = n_rows > 0 ? static_cast<int>(rows.at(0).size()) : 0;
  ckpt.centers = ClassCenters(n_rows, std::max(n_cols, 1), cj.at("momentum").get<double>());
  for (int r = 0; r < n_rows; ++r) {
    const auto row = rows.at(static_cast<std::size_t>(r)).get<std::vector<double>>();
    for (int c = 0; c < static_cast<int>(row.size()); ++c) ckpt.centers.values.at(r, c) = row[static_cast<std::size_t>(c)];
  }
  ckpt.centers.initialized.assign(init_flags.begin(), init_flags.end());

  for (const auto& [name, pj] : j.at("params").items()) {
    const auto shape = pj.at("shape").get<std::vector<int>>();
    auto data = pj.at("data").get<std::vector<double>>();
    ckpt.params.add(name, Tensor(shape, std::move(data)));
  }
  return ckpt;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

std::pair<Dataset, Dataset> split_train_val(const Dataset& d, double val_fraction, std::uint64_t seed) {
  std::vector<int> idx(d.images.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  Rng rng = Rng(seed).fork("val_split");
  rng.shuffle(idx);
  const int n_val = static_cast<int>(std::floor(val_fraction * static_cast<double>(idx.size())));
  std::set<int> val_set(idx.begin(), idx.begin() + n_val);
  Dataset train, val;
  train.meta = d.meta;
  val.meta = d.meta;
  for (std::size_t i = 0; i < d.images.size(); ++i) {
    if (val_set.count(static_cast<int>(i)))
      val.images.push_back(d.images[i]);
    else
      train.images.push_back(d.images[i]);
  }
  return {std::move(train), std::move(val)};
}

namespace {

std::vector<std::pair<int, int>> gt_pairs(const SynthSceneGraph& scene) {
  std::vector<std::pair<int, int>> pairs;
  pairs.reserve(scene.relations.size());
  for (const auto& rel : scene.relations) pairs.emplace_back(rel.subj, rel.obj);
  return pairs;
}

std::vector<int> gt_predicates(const SynthSceneGraph& scene) {
  std::vector<int> labels;
  labels.reserve(scene.relations.size());
  for (const auto& rel : scene.relations) labels.push_back(rel.predicate);
  return labels;
}

std::vector<std::pair<int, int>> all_ordered_pairs(int n) {
  std::vector<std::pair<int, int>> pairs;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i != j) pairs.emplace_back(i, j);
  return pairs;
}

std::vector<ImagePrediction> predict_with(const HtclModel& model, ParamStore& store, const Dataset& split,
                                          bool graph_constraint) {
  std::vector<ImagePrediction> preds;
  for (const auto& scene : split.images) {
    if (scene.relations.empty()) continue;  // excluded from every metric
    const auto pairs = all_ordered_pairs(static_cast<int>(scene.objects.size()));
    if (pairs.empty()) continue;
    Graph g;
    const SceneForward fwd = model.forward(g, store, scene, pairs);
    preds.push_back({scene.image_id, rank_triplets(pairs, fwd.p_hat.val(), graph_constraint)});
  }
  return preds;
}

}  // namespace

TrainResult train_model(const TrainConfig& cfg, const Dataset& train_split, std::ostream* log) {
  cfg.validate();
  const auto [core, val] = split_train_val(train_split, cfg.val_fraction, cfg.seed);

  const ModelConfig mc = cfg.model_config(train_split.meta);
  const HtclModel model(mc);
  const ClassStats stats = class_stats(core, cfg.beta, std::min(cfg.h, mc.num_predicates));

  TrainResult result;
  Rng master(cfg.seed);
  Rng init_rng = master.fork("init");
  model.init_params(result.ckpt.params, init_rng);
  if (mc.branch_mode == BranchMode::Full)
    result.ckpt.params.value("gate.c") = HtclModel::init_gate_values(stats);

  result.ckpt.model = mc;
  result.ckpt.train = cfg;
  result.ckpt.stats = stats;
  result.ckpt.centers = ClassCenters(mc.num_predicates, mc.predicate_dim, cfg.center_momentum);

  ParamStore& store = result.ckpt.params;
  ClassCenters& centers = result.ckpt.centers;

  const bool tpfr = mc.has_tpfr();
  const bool loss_con = tpfr && cfg.toggles.use_l_ssl && cfg.toggles.use_l_con;
  const bool loss_hc = tpfr && cfg.toggles.use_l_ssl && cfg.toggles.use_l_hc;
  const bool loss_rw = tpfr;  // re-weighted CE drives the branch prediction in tpfr/full modes
  const bool loss_hpc = cfg.toggles.use_l_hpc || mc.branch_mode == BranchMode::HpOnly;
  std::vector<double> rw_weights = stats.weights;
  if (!cfg.toggles.use_l_rw) rw_weights.assign(rw_weights.size(), 1.0);

  // snapshots for NaN recovery
  ParamStore last_good_params = store;
  ClassCenters last_good_centers = centers;

  std::vector<int> order(core.images.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng epoch_rng = master.fork("epoch." + std::to_string(epoch));
    epoch_rng.shuffle(order);
    Rng mask_rng = master.fork("mask." + std::to_string(epoch));

    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      Graph g;
      std::vector<Value> con_terms, hc_terms, rw_terms, hpc_terms, obj_terms;
      std::int64_t batch_relations = 0, batch_objects = 0;
      Tensor batch_feats;  // r^t rows for the center EMA
      std::vector<int> batch_feat_labels;
      std::vector<Tensor> feat_blocks;

      for (std::size_t bi = start; bi < stop; ++bi) {
        const SynthSceneGraph& scene = core.images[static_cast<std::size_t>(order[bi])];
        const auto pairs = gt_pairs(scene);
        const auto labels = gt_predicates(scene);
        const SceneForward fwd = model.forward(g, store, scene, pairs);

        std::vector<int> obj_labels(scene.objects.size());
        for (std::size_t i = 0; i < scene.objects.size(); ++i) obj_labels[i] = scene.objects[i].class_id;
        obj_terms.push_back(softmax_cross_entropy_sum(fwd.label_logits, obj_labels));
        batch_objects += static_cast<std::int64_t>(scene.objects.size());

        if (pairs.empty()) continue;
        batch_relations += static_cast<std::int64_t>(pairs.size());
        if (loss_hpc) hpc_terms.push_back(softmax_cross_entropy_sum(fwd.z_h, labels));
        if (loss_rw) rw_terms.push_back(reweighted_nll_sum(g, fwd.p_hat, labels, rw_weights));

        if (loss_con) {
          const auto mask = draw_mask(static_cast<int>(pairs.size()), cfg.p_m, mask_rng);
          const Value masked_tokens = mask_tokens(g, fwd.tokens, mask);
          const Value r_t_masked = model.tpfe_encode(g, store, masked_tokens);
          const Value q_main = model.project_to_sphere(g, store, fwd.r_t);
          const Value q_masked = model.project_to_sphere(g, store, r_t_masked);
          // averaged over the image's 2m anchors; the raw sum would drown
          // the classification terms
          const Value image_sum = contrastive_loss_sum(g, concat_rows(q_main, q_masked), cfg.tau);
          con_terms.push_back(scale(image_sum, 1.0 / (2.0 * static_cast<double>(pairs.size()))));
        }
        if (loss_hc) {
          hc_terms.push_back(head_center_loss_sum(g, fwd.r_t, labels, centers, stats));
          feat_blocks.push_back(fwd.r_t.val());
          batch_feat_labels.insert(batch_feat_labels.end(), labels.begin(), labels.end());
        }
      }

      auto sum_terms = [&g](std::vector<Value>& terms) -> Value {
        if (terms.empty()) return g.constant(Tensor::scalar(0.0));
        Value acc = terms[0];
        for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
        return acc;
      };

      const double rel_div = batch_relations > 0 ? 1.0 / static_cast<double>(batch_relations) : 0.0;
      const double obj_div = batch_objects > 0 ? 1.0 / static_cast<double>(batch_objects) : 0.0;

      const Value con_mean =
          scale(sum_terms(con_terms), con_terms.empty() ? 0.0 : 1.0 / static_cast<double>(con_terms.size()));
      const Value hc_sum = sum_terms(hc_terms);
      const Value rw_mean = scale(sum_terms(rw_terms), rel_div);
      const Value hpc_mean = scale(sum_terms(hpc_terms), rel_div);
      const Value obj_mean = scale(sum_terms(obj_terms), obj_div);

      Value total = add(add(rw_mean, hpc_mean), obj_mean);
      if (loss_con) total = add(total, con_mean);
      if (loss_hc) total = add(total, scale(hc_sum, cfg.lambda));

      LossBundle bundle;
      bundle.con = con_mean.val().item();
      bundle.hc = hc_sum.val().item();
      bundle.ssl = bundle.con + cfg.lambda * bundle.hc;
      bundle.rw = rw_mean.val().item();
      bundle.hpc = hpc_mean.val().item();
      bundle.obj = obj_mean.val().item();
      bundle.total = total.val().item();
      result.curve.push_back(bundle);

      if (!std::isfinite(bundle.total)) {
        if (log) *log << "train: non-finite loss at step " << step << ", restoring last checkpoint\n";
        store = last_good_params;
        centers = last_good_centers;
        result.aborted_nan = true;
        return result;
      }

      g.backward(total);
      store.adam_step(cfg.lr);
      step += 1;

      if (loss_hc && !feat_blocks.empty()) {
        int rows = 0;
        for (const auto& blk : feat_blocks) rows += blk.rows();
        batch_feats = Tensor({rows, mc.predicate_dim});
        int at = 0;
        for (const auto& blk : feat_blocks) {
          for (int r = 0; r < blk.rows(); ++r, ++at)
            for (int c = 0; c < blk.cols(); ++c) batch_feats.at(at, c) = blk.at(r, c);
        }
        centers.update(batch_feats, batch_feat_labels, stats);
      }
    }

    last_good_params = store;
    last_good_centers = centers;

    if (!val.images.empty()) {
      const auto preds = predict_with(model, store, val, true);
      MetricsReport rep = evaluate_rankings(preds, val, {20}, to_string(cfg.task), true);
      if (log)
        *log << "epoch " << epoch << ": val R@20 " << rep.recall.at(20) << " mR@20 "
             << rep.mean_recall.at(20) << " F@20 " << rep.f_at.at(20) << "\n";
      result.val_reports.emplace_back(epoch, std::move(rep));
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// classifier fine-tuning
// ---------------------------------------------------------------------------

Checkpoint finetune_classifier(const Checkpoint& ckpt, ClassifierKind kind, const Dataset& train_split,
                               const BalancedIndex& index, int epochs, double lr, std::uint64_t seed,
                               std::ostream* log) {
  const HtclModel model(ckpt.model);
  if (kind == ClassifierKind::Tpc && !ckpt.model.has_tpfr())
    throw std::invalid_argument("finetune_classifier: TPC fine-tune requested but the checkpoint has no tail branch");

  Checkpoint out = ckpt;
  ParamStore& store = out.params;

  // Feature cache: one frozen forward pass per referenced image.
  std::set<std::int64_t> needed;
  for (const auto& ref : index.order) needed.insert(ref.image_id);
  const auto img_index = build_image_index(train_split);
  std::map<std::pair<std::int64_t, int>, std::pair<std::vector<double>, int>> cache;
  for (const std::int64_t id : needed) {
    const auto it = img_index.find(id);
    if (it == img_index.end())
      throw std::invalid_argument("finetune_classifier: balanced index references unknown image_id " +
                                  std::to_string(id));
    const SynthSceneGraph& scene = train_split.images[static_cast<std::size_t>(it->second)];
    Graph g;
    const SceneForward fwd = model.forward(g, store, scene, gt_pairs(scene));
    const Tensor& feats = (kind == ClassifierKind::Tpc) ? fwd.r_t.val() : fwd.r.val();
    for (std::size_t ri = 0; ri < scene.relations.size(); ++ri) {
      std::vector<double> row(static_cast<std::size_t>(feats.cols()));
      for (int c = 0; c < feats.cols(); ++c) row[static_cast<std::size_t>(c)] = feats.at(static_cast<int>(ri), c);
      cache[{id, static_cast<int>(ri)}] = {std::move(row), scene.relations[ri].predicate};
    }
  }

  const std::set<std::string> trainable = model.classifier_param_names(kind == ClassifierKind::Tpc);
  const std::string w_name = (kind == ClassifierKind::Tpc) ? "tpc.w" : "hpc.w";
  const std::string b_name = (kind == ClassifierKind::Tpc) ? "tpc.b" : "hpc.b";
  const int dim = store.value(w_name).rows();

  std::vector<SampleRef> refs = index.order;
  Rng master(seed);
  const int batch = ckpt.train.ft_batch;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    Rng epoch_rng = master.fork("ft_epoch." + std::to_string(epoch));
    epoch_rng.shuffle(refs);
    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < refs.size(); start += static_cast<std::size_t>(batch)) {
      const std::size_t stop = std::min(refs.size(), start + static_cast<std::size_t>(batch));
      const int rows = static_cast<int>(stop - start);
      Tensor x({rows, dim});
      std::vector<int> labels(static_cast<std::size_t>(rows));
      for (std::size_t i = start; i < stop; ++i) {
        const auto& entry = cache.at({refs[i].image_id, refs[i].relation_index});
        for (int c = 0; c < dim; ++c) x.at(static_cast<int>(i - start), c) = entry.first[static_cast<std::size_t>(c)];
        labels[i - start] = entry.second;
      }
      Graph g;
      const Value logits = linear(g.constant(std::move(x)), g.param(store, w_name), g.param(store, b_name));
      // plain unweighted cross-entropy: the balanced cache already removed the skew
      const Value loss = scale(softmax_cross_entropy_sum(logits, labels), 1.0 / rows);
      epoch_loss += loss.val().item();
      batches += 1;
      g.backward(loss);
      store.adam_step(lr, &trainable);
    }
    if (log && batches > 0) *log << "finetune epoch " << epoch << ": mean CE " << epoch_loss / batches << "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// evaluation glue and the ablation grid
// ---------------------------------------------------------------------------

std::vector<ImagePrediction> predict_dataset(const Checkpoint& ckpt, const Dataset& split,
                                             bool graph_constraint) {
  const HtclModel model(ckpt.model);
  ParamStore& store = const_cast<ParamStore&>(ckpt.params);
  return predict_with(model, store, split, graph_constraint);
}

MetricsReport evaluate_checkpoint(const Checkpoint& ckpt, const Dataset& split, const std::vector<int>& ks,
                                  bool graph_constraint) {
  const auto preds = predict_dataset(ckpt, split, graph_constraint);
  return evaluate_rankings(preds, split, ks, to_string(ckpt.model.task), graph_constraint);
}

namespace {

Checkpoint train_and_maybe_ft(const TrainConfig& cfg, const Dataset& train_split, std::ostream* log) {
  TrainResult res = train_model(cfg, train_split, log);
  if (cfg.toggles.branch_mode != BranchMode::HpOnly && cfg.toggles.use_tpc_ft && cfg.ft_epochs > 0) {
    const auto [core, val] = split_train_val(train_split, cfg.val_fraction, cfg.seed);
    const auto index = balanced_resample(core, cfg.resample_target, cfg.seed);
    return finetune_classifier(res.ckpt, ClassifierKind::Tpc, core, index, cfg.ft_epochs, cfg.ft_lr,
                               cfg.seed, log);
  }
  return std::move(res.ckpt);
}

}  // namespace

std::vector<AblationRow> run_ablation(const TrainConfig& base, const Dataset& train_split,
                                      const Dataset& test_split, const std::vector<int>& ks,
                                      bool graph_constraint, std::ostream* log) {
  std::vector<AblationRow> rows;
  auto eval = [&](const std::string& name, const Checkpoint& ckpt) {
    if (log) *log << "ablation: evaluating " << name << "\n";
    rows.push_back({name, evaluate_checkpoint(ckpt, test_split, ks, graph_constraint)});
  };

  // Group A: branch components
  {
    TrainConfig cfg = base;
    cfg.toggles.branch_mode = BranchMode::HpOnly;
    if (log) *log << "ablation: training hp_branch\n";
    TrainResult res = train_model(cfg, train_split, log);
    eval("hp_branch", res.ckpt);
    const auto [core, val] = split_train_val(train_split, cfg.val_fraction, cfg.seed);
    const auto index = balanced_resample(core, cfg.resample_target, cfg.seed);
    const Checkpoint ft = finetune_classifier(res.ckpt, ClassifierKind::Hpc, core, index, cfg.ft_epochs,
                                              cfg.ft_lr, cfg.seed, log);
    eval("hpc_ft", ft);
  }
  {
    TrainConfig cfg = base;
    cfg.toggles.branch_mode = BranchMode::TpfrOnly;
    if (log) *log << "ablation: training tpfr_branch\n";
    eval("tpfr_branch", train_and_maybe_ft(cfg, train_split, log));
  }
  {
    TrainConfig cfg = base;
    cfg.toggles.use_tpfe = false;
    if (log) *log << "ablation: training wo_tpfe\n";
    eval("wo_tpfe", train_and_maybe_ft(cfg, train_split, log));
  }
  {
    TrainConfig cfg = base;
    if (log) *log << "ablation: training htcl (full)\n";
    TrainResult res = train_model(cfg, train_split, log);
    eval("wo_tpc_ft", res.ckpt);
    const auto [core, val] = split_train_val(train_split, cfg.val_fraction, cfg.seed);
    const auto index = balanced_resample(core, cfg.resample_target, cfg.seed);
    const Checkpoint ft = finetune_classifier(res.ckpt, ClassifierKind::Tpc, core, index, cfg.ft_epochs,
                                              cfg.ft_lr, cfg.seed, log);
    eval("htcl", ft);
  }

  // Group C: loss knock-outs on the full recipe
  const std::pair<const char*, void (*)(ToggleSet&)> knockouts[] = {
      {"wo_l_ssl", [](ToggleSet& t) { t.use_l_ssl = false; }},
      {"wo_l_con", [](ToggleSet& t) { t.use_l_con = false; }},
      {"wo_l_hc", [](ToggleSet& t) { t.use_l_hc = false; }},
      {"wo_l_hpc", [](ToggleSet& t) { t.use_l_hpc = false; }},
      {"wo_l_rw", [](ToggleSet& t) { t.use_l_rw = false; }},
  };
  for (const auto& [name, apply] : knockouts) {
    TrainConfig cfg = base;
    apply(cfg.toggles);
    if (log) *log << "ablation: training " << name << "\n";
    eval(name, train_and_maybe_ft(cfg, train_split, log));
  }
  return rows;
}

}  // namespace htcl
