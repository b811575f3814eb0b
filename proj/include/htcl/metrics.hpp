#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "htcl/data.hpp"
#include "htcl/tensor.hpp"

namespace htcl {

struct PredictedTriplet {
  int subj = 0;
  int obj = 0;
  int predicate = 0;
  double score = 0.0;
};

struct ImagePrediction {
  std::int64_t image_id = 0;
  std::vector<PredictedTriplet> triplets;  // ranked best-first
};

/// Orders candidate (pair, predicate) scores into a ranked triplet list.
/// With the graph constraint only the top-1 predicate per ordered pair
/// survives (ties resolved toward the lower predicate id). Ranking order is
/// (score desc, subj asc, obj asc, predicate asc).
std::vector<PredictedTriplet> rank_triplets(const std::vector<std::pair<int, int>>& pairs,
                                            const Tensor& scores, bool graph_constraint);

/// Integer tallies underlying the recall metrics; exact comparison against
/// oracle implementations happens on these counts.
struct RecallCounts {
  std::vector<std::int64_t> image_hits;    // per evaluated image (>=1 GT), file order
  std::vector<std::int64_t> image_totals;  // GT count per evaluated image
  std::vector<std::int64_t> class_hits;    // per predicate class, dataset-wide
  std::vector<std::int64_t> class_totals;
};

struct MetricsReport {
  std::string task = "predcls";
  bool graph_constraint = true;
  std::vector<int> ks;
  std::map<int, double> recall;       // R@K
  std::map<int, double> mean_recall;  // mR@K
  std::map<int, double> f_at;         // F@K
  std::map<int, double> m_at;         // M@K
  std::map<int, std::vector<double>> per_class_recall;  // -1 for classes absent from GT
  std::map<int, RecallCounts> counts;
  int num_images = 0;               // images with at least one GT relation
  std::vector<int> absent_classes;  // excluded from mR@K

  std::string to_json_text() const;
  void write_csv(const std::string& path) const;
  void write_per_class_csv(const std::string& path) const;
};

double f_at_k(double recall, double mean_recall);
double m_at_k(double recall, double mean_recall);

/// Scores ranked predictions against the split's ground truth.
MetricsReport evaluate_rankings(const std::vector<ImagePrediction>& preds, const Dataset& split,
                                const std::vector<int>& ks, const std::string& task,
                                bool graph_constraint);

void save_predictions(const std::vector<ImagePrediction>& preds, const std::string& path);
std::vector<ImagePrediction> load_predictions(const std::string& path);

/// Bias comparison across the head-biased baseline, the fine-tuned model
/// and full cooperative training. Emits a metric summary, pairwise deltas,
/// and per-class plot data ordered by descending class frequency.
struct BiasReportInputs {
  MetricsReport baseline;
  MetricsReport finetuned;
  MetricsReport htcl;
  std::vector<std::int64_t> class_counts;  // training-split frequency per class
  std::vector<double> gate;                // sigmoid(c_i) from the cooperative model
  int plot_k = 20;
};

void write_bias_report(const BiasReportInputs& in, const std::string& out_dir);

}  // namespace htcl
