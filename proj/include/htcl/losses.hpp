#pragma once

#include <string>
#include <vector>

#include "htcl/data.hpp"
#include "htcl/graph.hpp"

namespace htcl {

/// Running mean features per head predicate class. Centers receive no
/// gradient; they are updated by EMA after each step's loss is computed.
/// A class is excluded from the loss until it has been seen once, at which
/// point its center starts from that batch mean.
struct ClassCenters {
  Tensor values;  // C x dim
  std::vector<char> initialized;
  double momentum = 0.9;

  ClassCenters() = default;
  ClassCenters(int classes, int dim, double momentum_);
  void update(const Tensor& feats, const std::vector<int>& labels, const ClassStats& stats);
};

/// Independent Bernoulli(p_m) mask over m relation tokens.
std::vector<char> draw_mask(int m, double p_m, Rng& rng);

/// Masked view: token k becomes the mean token where mask[k] is set.
Value mask_tokens(Graph& g, Value tokens, const std::vector<char>& mask);

/// Self-supervised contrastive loss over two views stacked row-wise
/// (2m x d, the positive of row i is row (i+m) mod 2m), summed over all
/// 2m anchors. Inputs are expected to be unit rows.
Value contrastive_loss_sum(Graph& g, Value q_two_views, double tau);

/// Sum of Euclidean distances between head-class features and their
/// current class centers. Classes outside the head set or not yet
/// initialized contribute nothing.
Value head_center_loss_sum(Graph& g, Value feats, const std::vector<int>& labels,
                           const ClassCenters& centers, const ClassStats& stats);

/// -sum_i w[label_i] log(p_hat[i, label_i]) over rows of a probability
/// matrix; probabilities are clamped at 1e-12 before the log.
Value reweighted_nll_sum(Graph& g, Value p_hat, const std::vector<int>& labels,
                         const std::vector<double>& weights);

/// Scalar loss values of one optimizer step, for curves and logging.
struct LossBundle {
  double con = 0, hc = 0, ssl = 0, rw = 0, hpc = 0, obj = 0, total = 0;
  static std::string csv_header();
  std::string csv_row(std::int64_t step) const;
};

}  // namespace htcl
