#include "htcl/losses.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace htcl {

ClassCenters::ClassCenters(int classes, int dim, double momentum_)
    : values({classes, dim}), initialized(static_cast<std::size_t>(classes), 0), momentum(momentum_) {}

void ClassCenters::update(const Tensor& feats, const std::vector<int>& labels, const ClassStats& stats) {
  if (feats.rows() != static_cast<int>(labels.size()))
    throw std::invalid_argument("ClassCenters::update: feature/label count mismatch");
  const int dim = values.cols();
  if (feats.cols() != dim) throw std::invalid_argument("ClassCenters::update: feature dim mismatch");
  for (const int c : stats.head_set) {
    double count = 0.0;
    std::vector<double> mean(static_cast<std::size_t>(dim), 0.0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] != c) continue;
      for (int d = 0; d < dim; ++d) mean[static_cast<std::size_t>(d)] += feats.at(static_cast<int>(i), d);
      count += 1.0;
    }
    if (count == 0.0) continue;
    for (double& v : mean) v /= count;
    if (!initialized[static_cast<std::size_t>(c)]) {
      for (int d = 0; d < dim; ++d) values.at(c, d) = mean[static_cast<std::size_t>(d)];
      initialized[static_cast<std::size_t>(c)] = 1;
    } else {
      for (int d = 0; d < dim; ++d)
        values.at(c, d) = momentum * values.at(c, d) + (1.0 - momentum) * mean[static_cast<std::size_t>(d)];
    }
  }
}

std::vector<char> draw_mask(int m, double p_m, Rng& rng) {
  if (p_m < 0.0 || p_m > 1.0) throw std::invalid_argument("draw_mask: p_m must lie in [0,1]");
  std::vector<char> mask(static_cast<std::size_t>(m), 0);
  for (auto& b : mask) b = rng.bernoulli(p_m) ? 1 : 0;
  return mask;
}

Value mask_tokens(Graph&, Value tokens, const std::vector<char>& mask) {
  return mask_rows(tokens, mean_rows(tokens), mask);
}

Value contrastive_loss_sum(Graph& g, Value q_two_views, double tau) {
  if (tau <= 0.0) throw std::invalid_argument("contrastive_loss_sum: tau must be positive");
  const int total = q_two_views.rows();
  if (total % 2 != 0) throw std::invalid_argument("contrastive_loss_sum: expected an even sample count");
  const int m = total / 2;
  const Value sims = scale(matmul_nt(q_two_views, q_two_views), 1.0 / tau);
  // exclude self-similarity from every anchor's denominator
  Tensor diag_mask({total, total});
  for (int i = 0; i < total; ++i) diag_mask.at(i, i) = -1e30;
  const Value masked = add(sims, g.constant(std::move(diag_mask)));
  const Value denom = log_sum_exp_rows(masked);
  std::vector<int> positive(static_cast<std::size_t>(total));
  for (int i = 0; i < total; ++i) positive[static_cast<std::size_t>(i)] = (i + m) % total;
  const Value numer = gather_labels(sims, positive);
  return sum_all(sub(denom, numer));
}

Value head_center_loss_sum(Graph& g, Value feats, const std::vector<int>& labels,
                           const ClassCenters& centers, const ClassStats& stats) {
  std::vector<int> rows;
  std::vector<int> classes;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int c = labels[i];
    if (!stats.is_head(c)) continue;
    if (!centers.initialized[static_cast<std::size_t>(c)]) continue;
    rows.push_back(static_cast<int>(i));
    classes.push_back(c);
  }
  if (rows.empty()) return g.constant(Tensor::scalar(0.0));
  const int dim = centers.values.cols();
  Tensor sel_centers({static_cast<int>(rows.size()), dim});
  for (std::size_t k = 0; k < classes.size(); ++k)
    for (int d = 0; d < dim; ++d) sel_centers.at(static_cast<int>(k), d) = centers.values.at(classes[k], d);
  const Value diff = sub(gather_rows(feats, rows), g.constant(std::move(sel_centers)));
  return sum_all(row_norms(diff));
}

Value reweighted_nll_sum(Graph& g, Value p_hat, const std::vector<int>& labels,
                         const std::vector<double>& weights) {
  if (static_cast<int>(weights.size()) != p_hat.cols())
    throw std::invalid_argument("reweighted_nll_sum: weight count does not match class count");
  const int m = p_hat.rows();
  Tensor w({m, 1});
  for (int i = 0; i < m; ++i) w.at(i, 0) = weights[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])];
  const Value logp = log_clamped(gather_labels(p_hat, labels));
  return scale(sum_all(mul(g.constant(std::move(w)), logp)), -1.0);
}

std::string LossBundle::csv_header() { return "step,l_con,l_hc,l_ssl,l_rw,l_hpc,l_obj,l_total"; }

std::string LossBundle::csv_row(std::int64_t step) const {
  std::ostringstream os;
  os.precision(10);
  os << step << "," << con << "," << hc << "," << ssl << "," << rw << "," << hpc << "," << obj << ","
     << total;
  return os.str();
}

}  // namespace htcl
