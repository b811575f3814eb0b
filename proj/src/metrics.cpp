#include "htcl/metrics.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace htcl {

std::vector<PredictedTriplet> rank_triplets(const std::vector<std::pair<int, int>>& pairs,
                                            const Tensor& scores, bool graph_constraint) {
  if (scores.rows() != static_cast<int>(pairs.size()))
    throw std::invalid_argument("rank_triplets: score rows do not match pair count");
  const int classes = scores.cols();
  std::vector<PredictedTriplet> out;
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto [s, o] = pairs[k];
    if (graph_constraint) {
      int best = 0;
      for (int c = 1; c < classes; ++c)
        if (scores.at(static_cast<int>(k), c) > scores.at(static_cast<int>(k), best)) best = c;
      out.push_back({s, o, best, scores.at(static_cast<int>(k), best)});
    } else {
      for (int c = 0; c < classes; ++c) out.push_back({s, o, c, scores.at(static_cast<int>(k), c)});
    }
  }
  std::sort(out.begin(), out.end(), [](const PredictedTriplet& a, const PredictedTriplet& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.subj != b.subj) return a.subj < b.subj;
    if (a.obj != b.obj) return a.obj < b.obj;
    return a.predicate < b.predicate;
  });
  return out;
}

double f_at_k(double recall, double mean_recall) {
  const double denom = recall + mean_recall;
  if (denom <= 0.0) return 0.0;
  return 2.0 * recall * mean_recall / denom;
}

double m_at_k(double recall, double mean_recall) { return 0.5 * (recall + mean_recall); }

MetricsReport evaluate_rankings(const std::vector<ImagePrediction>& preds, const Dataset& split,
                                const std::vector<int>& ks, const std::string& task,
                                bool graph_constraint) {
  std::map<std::int64_t, const ImagePrediction*> by_id;
  for (const auto& p : preds) by_id[p.image_id] = &p;

  const int classes = split.meta.num_predicates;
  MetricsReport rep;
  rep.task = task;
  rep.graph_constraint = graph_constraint;
  rep.ks = ks;

  for (const int k : ks) {
    RecallCounts rc;
    rc.class_hits.assign(static_cast<std::size_t>(classes), 0);
    rc.class_totals.assign(static_cast<std::size_t>(classes), 0);
    double recall_sum = 0.0;
    int images_counted = 0;

    for (const auto& img : split.images) {
      if (img.relations.empty()) continue;  // excluded from the mean
      const auto it = by_id.find(img.image_id);
      std::set<std::tuple<int, int, int>> topk;
      if (it != by_id.end()) {
        const auto& ts = it->second->triplets;
        const int upto = std::min<int>(k, static_cast<int>(ts.size()));
        for (int i = 0; i < upto; ++i)
          topk.insert({ts[static_cast<std::size_t>(i)].subj, ts[static_cast<std::size_t>(i)].obj,
                       ts[static_cast<std::size_t>(i)].predicate});
      }
      std::int64_t hits = 0;
      for (const auto& gt : img.relations) {
        const bool hit = topk.count({gt.subj, gt.obj, gt.predicate}) != 0;
        hits += hit ? 1 : 0;
        rc.class_totals[static_cast<std::size_t>(gt.predicate)] += 1;
        if (hit) rc.class_hits[static_cast<std::size_t>(gt.predicate)] += 1;
      }
      rc.image_hits.push_back(hits);
      rc.image_totals.push_back(static_cast<std::int64_t>(img.relations.size()));
      recall_sum += static_cast<double>(hits) / static_cast<double>(img.relations.size());
      images_counted += 1;
    }

    rep.num_images = images_counted;
    const double r = images_counted > 0 ? recall_sum / images_counted : 0.0;

    std::vector<double> per_class(static_cast<std::size_t>(classes), -1.0);
    double mr_sum = 0.0;
    int present = 0;
    for (int c = 0; c < classes; ++c) {
      if (rc.class_totals[static_cast<std::size_t>(c)] == 0) continue;
      const double cr = static_cast<double>(rc.class_hits[static_cast<std::size_t>(c)]) /
                        static_cast<double>(rc.class_totals[static_cast<std::size_t>(c)]);
      per_class[static_cast<std::size_t>(c)] = cr;
      mr_sum += cr;
      present += 1;
    }
    const double mr = present > 0 ? mr_sum / present : 0.0;

    if (rep.absent_classes.empty()) {
      for (int c = 0; c < classes; ++c)
        if (rc.class_totals[static_cast<std::size_t>(c)] == 0) rep.absent_classes.push_back(c);
    }

    rep.recall[k] = r;
    rep.mean_recall[k] = mr;
    rep.f_at[k] = f_at_k(r, mr);
    rep.m_at[k] = m_at_k(r, mr);
    rep.per_class_recall[k] = std::move(per_class);
    rep.counts[k] = std::move(rc);
  }
  return rep;
}

std::string MetricsReport::to_json_text() const {
  nlohmann::ordered_json j;
  j["task"] = task;
  j["graph_constraint"] = graph_constraint;
  j["num_images"] = num_images;
  j["ks"] = ks;
  nlohmann::ordered_json metrics = nlohmann::ordered_json::object();
  for (const int k : ks) {
    const std::string key = std::to_string(k);
    metrics[key] = {{"R", recall.at(k)},
                    {"mR", mean_recall.at(k)},
                    {"F", f_at.at(k)},
                    {"M", m_at.at(k)},
                    {"per_class_recall", per_class_recall.at(k)}};
  }
  j["metrics"] = std::move(metrics);
  j["absent_classes"] = absent_classes;
  return j.dump(1);
}

void MetricsReport::write_csv(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("MetricsReport::write_csv: cannot open '" + path + "'");
  out << "metric,K,value\n";
  out.precision(10);
  for (const int k : ks) {
    out << "R," << k << "," << recall.at(k) << "\n";
    out << "mR," << k << "," << mean_recall.at(k) << "\n";
    out << "F," << k << "," << f_at.at(k) << "\n";
    out << "M," << k << "," << m_at.at(k) << "\n";
  }
  out << "num_images,," << num_images << "\n";
}

void MetricsReport::write_per_class_csv(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("MetricsReport::write_per_class_csv: cannot open '" + path + "'");
  out << "class_id,K,recall\n";
  out.precision(10);
  for (const int k : ks) {
    const auto& pc = per_class_recall.at(k);
    for (std::size_t c = 0; c < pc.size(); ++c) out << c << "," << k << "," << pc[c] << "\n";
  }
}

void save_predictions(const std::vector<ImagePrediction>& preds, const std::string& path) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& p : preds) {
    nlohmann::ordered_json triplets = nlohmann::ordered_json::array();
    for (const auto& t : p.triplets)
      triplets.push_back(
          {{"subj", t.subj}, {"obj", t.obj}, {"predicate", t.predicate}, {"score", t.score}});
    arr.push_back({{"image_id", p.image_id}, {"triplets", std::move(triplets)}});
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_predictions: cannot open '" + path + "'");
  out << arr.dump(1) << "\n";
}

std::vector<ImagePrediction> load_predictions(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("load_predictions: cannot open '" + path + "'");
  nlohmann::json j;
  in >> j;
  if (!j.is_array()) throw std::invalid_argument("load_predictions: expected a JSON array");
  std::vector<ImagePrediction> out;
  for (const auto& jp : j) {
    ImagePrediction p;
    p.image_id = jp.at("image_id").get<std::int64_t>();
    for (const auto& jt : jp.at("triplets")) {
      p.triplets.push_back({jt.at("subj").get<int>(), jt.at("obj").get<int>(),
                            jt.at("predicate").get<int>(), jt.at("score").get<double>()});
    }
    out.push_back(std::move(p));
  }
  return out;
}

void write_bias_report(const BiasReportInputs& in, const std::string& out_dir) {
  const std::size_t classes = in.class_counts.size();
  for (const MetricsReport* rep : {&in.baseline, &in.finetuned, &in.htcl}) {
    for (const int k : rep->ks) {
      if (rep->per_class_recall.at(k).size() != classes)
        throw std::invalid_argument("write_bias_report: reports cover different class counts");
    }
  }
  if (in.gate.size() != classes)
    throw std::invalid_argument("write_bias_report: gate vector does not match class count");

  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  {
    std::ofstream out(out_dir + "/summary.csv");
    out << "model,metric,K,value\n";
    out.precision(10);
    const std::pair<const char*, const MetricsReport*> models[] = {
        {"baseline", &in.baseline}, {"finetuned", &in.finetuned}, {"htcl", &in.htcl}};
    for (const auto& [name, rep] : models) {
      for (const int k : rep->ks) {
        out << name << ",R," << k << "," << rep->recall.at(k) << "\n";
        out << name << ",mR," << k << "," << rep->mean_recall.at(k) << "\n";
        out << name << ",F," << k << "," << rep->f_at.at(k) << "\n";
        out << name << ",M," << k << "," << rep->m_at.at(k) << "\n";
      }
    }
  }

  {
    std::ofstream out(out_dir + "/deltas.csv");
    out << "pair,metric,K,delta\n";
    out.precision(10);
    const std::tuple<const char*, const MetricsReport*, const MetricsReport*> pairs[] = {
        {"finetuned-baseline", &in.finetuned, &in.baseline},
        {"htcl-baseline", &in.htcl, &in.baseline},
        {"htcl-finetuned", &in.htcl, &in.finetuned}};
    for (const auto& [name, a, b] : pairs) {
      for (const int k : a->ks) {
        out << name << ",R," << k << "," << a->recall.at(k) - b->recall.at(k) << "\n";
        out << name << ",mR," << k << "," << a->mean_recall.at(k) - b->mean_recall.at(k) << "\n";
        out << name << ",F," << k << "," << a->f_at.at(k) - b->f_at.at(k) << "\n";
        out << name << ",M," << k << "," << a->m_at.at(k) - b->m_at.at(k) << "\n";
      }
    }
  }

  {
    // per-class recall curves ordered by descending training frequency
    std::vector<int> order(classes);
    for (std::size_t c = 0; c < classes; ++c) order[c] = static_cast<int>(c);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (in.class_counts[static_cast<std::size_t>(a)] != in.class_counts[static_cast<std::size_t>(b)])
        return in.class_counts[static_cast<std::size_t>(a)] > in.class_counts[static_cast<std::size_t>(b)];
      return a < b;
    });
    std::ofstream out(out_dir + "/plot_data.csv");
    out << "class_id,frequency_rank,count,recall_baseline,recall_ft,recall_htcl,gate\n";
    out.precision(10);
    const int k = in.plot_k;
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
      const int c = order[rank];
      out << c << "," << rank << "," << in.class_counts[static_cast<std::size_t>(c)] << ","
          << in.baseline.per_class_recall.at(k)[static_cast<std::size_t>(c)] << ","
          << in.finetuned.per_class_recall.at(k)[static_cast<std::size_t>(c)] << ","
          << in.htcl.per_class_recall.at(k)[static_cast<std::size_t>(c)] << ","
          << in.gate[static_cast<std::size_t>(c)] << "\n";
    }
  }
}

}  // namespace htcl
