#pragma once

#include <functional>
#include <string>
#include <vector>

#include "htcl/param_store.hpp"
#include "htcl/tensor.hpp"

namespace htcl {

class Graph;

/// Handle to a node on a Graph tape.
struct Value {
  Graph* g = nullptr;
  int idx = -1;
  bool valid() const { return g != nullptr && idx >= 0; }
  const Tensor& val() const;
  int rows() const { return val().rows(); }
  int cols() const { return val().cols(); }
};

/// Eager reverse-mode tape. Every op computes its output immediately and
/// records a closure that scatters the output gradient back to its inputs.
/// Node creation order is a topological order, so backward() is a single
/// reverse sweep. Single-threaded by design; reductions run in fixed index
/// order, which makes forward and backward bit-reproducible.
class Graph {
public:
  Value constant(Tensor t);
  /// Leaf bound to a store parameter. Memoized per name: binding the same
  /// parameter twice in one graph returns the same node.
  Value param(ParamStore& store, const std::string& name);

  /// Backpropagate from a scalar loss; parameter-leaf gradients are added
  /// into the store's accumulators. May only be called once per graph.
  void backward(Value loss);

  const Tensor& val(Value v) const;
  const Tensor& grad(Value v) const;
  std::size_t num_nodes() const { return nodes_.size(); }
  /// Count of log_clamped saturations seen while building this graph.
  std::int64_t clamp_events() const { return clamp_events_; }

  // Internal: op construction.
  struct Node {
    Tensor val;
    Tensor grad;
    bool needs_grad = false;
    bool touched = false;  // received a gradient contribution
    std::function<void(Graph&)> back;
    std::string param_name;
    ParamStore* store = nullptr;
  };
  int add_node(Tensor val, bool needs_grad, std::function<void(Graph&)> back);
  Node& node(int idx) { return nodes_[static_cast<std::size_t>(idx)]; }
  const Node& node(int idx) const { return nodes_[static_cast<std::size_t>(idx)]; }
  void accumulate(int idx, const double* contrib, std::int64_t n);
  void note_clamp(std::int64_t n) { clamp_events_ += n; }

private:
  std::vector<Node> nodes_;
  std::map<std::string, int> param_nodes_;
  bool backward_done_ = false;
  std::int64_t clamp_events_ = 0;
};

// ---- primitive ops ----
Value matmul(Value a, Value b);     // (m x k)(k x n)
Value matmul_nt(Value a, Value b);  // (m x k)(n x k)^T
Value add(Value a, Value b);
Value sub(Value a, Value b);
Value mul(Value a, Value b);  // elementwise
Value add_rowvec(Value a, Value b);
Value mul_rowvec(Value a, Value b);
Value scale(Value a, double s);
Value add_scalar(Value a, double s);
Value relu(Value a);
Value sigmoid(Value a);
Value softmax_rows(Value a);
Value log_softmax_rows(Value a);
Value log_sum_exp_rows(Value a);  // m x 1
Value layer_norm_rows(Value x, Value gamma, Value beta, double eps = 1e-5);
Value concat_cols(Value a, Value b);
Value concat_cols(const std::vector<Value>& parts);
Value concat_rows(Value a, Value b);
Value slice_cols(Value a, int c0, int c1);
Value gather_rows(Value a, std::vector<int> ids);
Value gather_labels(Value a, std::vector<int> labels);  // m x 1, entry (r, labels[r])
Value mean_rows(Value a);                               // 1 x n
Value sum_all(Value a);                                 // 1 x 1
Value mean_all(Value a);
Value l2_normalize_rows(Value a, double eps = 1e-12);
Value row_norms(Value a);  // m x 1, plain Euclidean norm, subgradient 0 at 0
Value mask_rows(Value a, Value replacement, const std::vector<char>& mask);
Value log_clamped(Value a, double min_val = 1e-12);

// ---- composites ----
Value linear(Value x, Value w, Value b);  // x w + b
Value embedding(ParamStore& store, Graph& g, const std::string& table, const std::vector<int>& ids);

struct AttentionParams {
  Value wq, bq, wk, bk, wv, bv, wo, bo;
};
Value multihead_self_attention(Value x, const AttentionParams& p, int heads);

struct EncoderLayerParams {
  AttentionParams attn;
  Value ln1_g, ln1_b;
  Value ff_w1, ff_b1, ff_w2, ff_b2;
  Value ln2_g, ln2_b;
};
/// Post-norm transformer encoder layer:
/// h = LN(x + MHA(x)); out = LN(h + W2 relu(W1 h)).
Value transformer_encoder_layer(Value x, const EncoderLayerParams& p, int heads);

/// Softmax cross-entropy, summed over rows (callers divide for means).
Value softmax_cross_entropy_sum(Value logits, const std::vector<int>& labels);

}  // namespace htcl
