#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "htcl/data.hpp"
#include "htcl/losses.hpp"
#include "htcl/metrics.hpp"
#include "htcl/model.hpp"

namespace htcl {

/// Ablation switches; each maps onto one row of the component/loss grids.
struct ToggleSet {
  bool use_tpfe = true;
  bool use_tpc_ft = true;
  bool use_l_ssl = true;
  bool use_l_con = true;
  bool use_l_hc = true;
  bool use_l_hpc = true;
  bool use_l_rw = true;
  BranchMode branch_mode = BranchMode::Full;
};

struct DimsConfig {
  int embed_dim = 32;
  int pos_dim = 16;
  int object_dim = 64;
  int context_dim = 64;
  int predicate_dim = 64;
  int model_dim = 64;
  int heads = 4;
  int ffn_dim = 128;
  int proj_dim = 64;
};

struct TrainConfig {
  std::uint64_t seed = 42;
  int epochs = 10;
  int batch_size = 8;  // images per optimizer step
  double lr = 1e-3;
  double beta = 0.9999;    // effective-number re-weighting
  double lambda = 1e-4;    // head-center weight inside the SSL loss
  double tau = 0.1;        // contrastive temperature
  double p_m = 0.1;        // mean-mask probability
  int h = 10;              // head set size
  int tpfe_layers = 4;
  int resample_target = 5000;  // T, per-class size of the balanced index
  int ft_epochs = 3;
  double ft_lr = 1e-3;
  int ft_batch = 256;
  double val_fraction = 0.1;
  double center_momentum = 0.9;
  Task task = Task::PredCls;
  DimsConfig dims;
  ToggleSet toggles;

  static TrainConfig from_json_file(const std::string& path);
  static TrainConfig from_json_text(const std::string& text);
  std::string to_json_text() const;
  void validate() const;
  ModelConfig model_config(const DatasetMeta& meta) const;
};

struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  ClassStats stats;  // training-split statistics (counts, head set, weights)
  ClassCenters centers;
  ParamStore params;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

struct TrainResult {
  Checkpoint ckpt;
  std::vector<LossBundle> curve;  // one entry per optimizer step
  std::vector<std::pair<int, MetricsReport>> val_reports;
  bool aborted_nan = false;
};

/// Deterministic 90/10 train/validation split by seeded shuffle of images.
std::pair<Dataset, Dataset> split_train_val(const Dataset& d, double val_fraction, std::uint64_t seed);

TrainResult train_model(const TrainConfig& cfg, const Dataset& train_split, std::ostream* log = nullptr);

enum class ClassifierKind { Hpc, Tpc };

/// Classifier re-fit on a class-balanced feature cache: every non-classifier
/// parameter stays frozen; the cache is extracted once from the checkpoint.
Checkpoint finetune_classifier(const Checkpoint& ckpt, ClassifierKind kind, const Dataset& train_split,
                               const BalancedIndex& index, int epochs, double lr, std::uint64_t seed,
                               std::ostream* log = nullptr);

std::vector<ImagePrediction> predict_dataset(const Checkpoint& ckpt, const Dataset& split,
                                             bool graph_constraint);
MetricsReport evaluate_checkpoint(const Checkpoint& ckpt, const Dataset& split,
                                  const std::vector<int>& ks, bool graph_constraint);

struct AblationRow {
  std::string name;
  MetricsReport report;
};

/// The component grid (branch variants) plus the loss knock-out grid,
/// trained variant by variant with the same seed and evaluated on the test
/// split.
std::vector<AblationRow> run_ablation(const TrainConfig& base, const Dataset& train_split,
                                      const Dataset& test_split, const std::vector<int>& ks,
                                      bool graph_constraint, std::ostream* log = nullptr);

}  // namespace htcl
