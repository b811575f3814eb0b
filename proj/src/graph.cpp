#include "htcl/graph.hpp"

#include <cmath>
#include <stdexcept>

namespace htcl {

namespace {

[[noreturn]] void shape_error(const std::string& op, const std::string& detail) {
  throw std::invalid_argument(op + ": " + detail);
}

void require_same_graph(const std::string& op, Value a, Value b) {
  if (a.g == nullptr || b.g == nullptr || a.g != b.g) shape_error(op, "operands belong to different graphs");
}

void require_2d(const std::string& op, Value a) {
  if (a.val().rank() != 2) shape_error(op, "expected rank-2 tensor, got shape " + a.val().shape_str());
}

}  // namespace

const Tensor& Value::val() const { return g->val(*this); }

int Graph::add_node(Tensor val, bool needs_grad, std::function<void(Graph&)> back) {
  if (backward_done_) throw std::runtime_error("Graph: cannot extend a graph after backward()");
  Node n;
  n.needs_grad = needs_grad;
  if (needs_grad) n.grad = Tensor::zeros(val.shape());
  n.val = std::move(val);
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Value Graph::constant(Tensor t) {
  const int idx = add_node(std::move(t), false, nullptr);
  return Value{this, idx};
}

Value Graph::param(ParamStore& store, const std::string& name) {
  auto it = param_nodes_.find(name);
  if (it != param_nodes_.end()) return Value{this, it->second};
  const int idx = add_node(store.value(name), true, nullptr);
  nodes_[static_cast<std::size_t>(idx)].param_name = name;
  nodes_[static_cast<std::size_t>(idx)].store = &store;
  param_nodes_.emplace(name, idx);
  return Value{this, idx};
}

const Tensor& Graph::val(Value v) const { return nodes_[static_cast<std::size_t>(v.idx)].val; }

const Tensor& Graph::grad(Value v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.idx)];
  if (!n.needs_grad) throw std::logic_error("Graph::grad: node does not carry a gradient");
  return n.grad;
}

void Graph::accumulate(int idx, const double* contrib, std::int64_t n) {
  Node& nd = nodes_[static_cast<std::size_t>(idx)];
  if (!nd.needs_grad) return;
  double* g = nd.grad.data();
  for (std::int64_t i = 0; i < n; ++i) g[i] += contrib[i];
  nd.touched = true;
}

void Graph::backward(Value loss) {
  if (loss.g != this || loss.idx < 0) throw std::invalid_argument("Graph::backward: loss from another graph");
  if (backward_done_) throw std::runtime_error("Graph::backward: called twice without building a new graph");
  backward_done_ = true;
  Node& ln = nodes_[static_cast<std::size_t>(loss.idx)];
  if (ln.val.size() != 1) {
    throw std::invalid_argument("Graph::backward: loss must be scalar, got shape " + ln.val.shape_str());
  }
  if (!ln.needs_grad) return;  // loss does not depend on any parameter
  ln.grad[0] = 1.0;
  ln.touched = true;
  for (int i = loss.idx; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.needs_grad && n.touched && n.back) n.back(*this);
  }
  for (const auto& [name, idx] : param_nodes_) {
    Node& n = nodes_[static_cast<std::size_t>(idx)];
    if (n.touched) n.store->grad(name).add_inplace(n.grad);
  }
}

// ---------------------------------------------------------------------------
// primitive ops
// ---------------------------------------------------------------------------

Value matmul(Value a, Value b) {
  require_same_graph("matmul", a, b);
  require_2d("matmul", a);
  require_2d("matmul", b);
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  if (A.cols() != B.rows()) shape_error("matmul", "shape mismatch " + A.shape_str() + " * " + B.shape_str());
  const int m = A.rows(), k = A.cols(), n = B.cols();
  Tensor C({m, n});
  {
    const double* ad = A.data();
    const double* bd = B.data();
    double* cd = C.data();
    for (int i = 0; i < m; ++i) {
      for (int p = 0; p < k; ++p) {
        const double av = ad[static_cast<std::size_t>(i) * k + p];
        if (av == 0.0) continue;
        const double* brow = bd + static_cast<std::size_t>(p) * n;
        double* crow = cd + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
  Graph& g = *a.g;
  const int ai = a.idx, bi = b.idx;
  const bool ng = g.node(ai).needs_grad || g.node(bi).needs_grad;
  const int self = g.add_node(std::move(C), ng, nullptr);
  if (ng) {
    g.node(self).back = [ai, bi, self, m, k, n](Graph& gr) {
      const double* dc = gr.node(self).grad.data();
      const double* a2 = gr.node(ai).val.data();
      const double* b2 = gr.node(bi).val.data();
      auto& an = gr.node(ai);
      if (an.needs_grad) {
        // dA = dC B^T
        double* da = an.grad.data();
        for (int i = 0; i < m; ++i) {
          const double* dcrow = dc + static_cast<std::size_t>(i) * n;
          double* darow = da + static_cast<std::size_t>(i) * k;
          for (int p = 0; p < k; ++p) {
            const double* brow = b2 + static_cast<std::size_t>(p) * n;
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += dcrow[j] * brow[j];
            darow[p] += acc;
          }
        }
        an.touched = true;
      }
      auto& bn = gr.node(bi);
      if (bn.needs_grad) {
        // dB = A^T dC
        double* db = bn.grad.data();
        for (int i = 0; i < m; ++i) {
          const double* arow = a2 + static_cast<std::size_t>(i) * k;
          const double* dcrow = dc + static_cast<std::size_t>(i) * n;
          for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* dbrow = db + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) dbrow[j] += av * dcrow[j];
          }
        }
        bn.touched = true;
      }
    };
  }
  return Value{&g, self};
}

Value matmul_nt(Value a, Value b) {
  require_same_graph("matmul_nt", a, b);
  require_2d("matmul_nt", a);
  require_2d("matmul_nt", b);
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  if (A.cols() != B.cols())
    shape_error("matmul_nt", "shape mismatch " + A.shape_str() + " * " + B.shape_str() + "^T");
  const int m = A.rows(), k = A.cols(), n = B.rows();
  Tensor C({m, n});
  {
    const double* ad = A.data();
    const double* bd = B.data();
    double* cd = C.data();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        const double* ar = ad + static_cast<std::size_t>(i) * k;
        const double* br = bd + static_cast<std::size_t>(j) * k;
        double acc = 0.0;
        for (int p = 0; p < k; ++p) acc += ar[p] * br[p];
        cd[static_cast<std::size_t>(i) * n + j] = acc;
      }
  }
  Graph& g = *a.g;
  const int ai = a.idx, bi = b.idx;
  const bool ng = g.node(ai).needs_grad || g.node(bi).needs_grad;
  const int self = g.add_node(std::move(C), ng, nullptr);
  if (ng) {
    g.node(self).back = [ai, bi, self, m, k, n](Graph& gr) {
      const double* dc = gr.node(self).grad.data();
      const double* a2 = gr.node(ai).val.data();
      const double* b2 = gr.node(bi).val.data();
      auto& an = gr.node(ai);
      if (an.needs_grad) {
        // dA = dC B
        double* da = an.grad.data();
        for (int i = 0; i < m; ++i) {
          const double* dcrow = dc + static_cast<std::size_t>(i) * n;
          double* darow = da + static_cast<std::size_t>(i) * k;
          for (int j = 0; j < n; ++j) {
            const double dv = dcrow[j];
            if (dv == 0.0) continue;
            const double* brow = b2 + static_cast<std::size_t>(j) * k;
            for (int p = 0; p < k; ++p) darow[p] += dv * brow[p];
          }
        }
        an.touched = true;
      }
      auto& bn = gr.node(bi);
      if (bn.needs_grad) {
        // dB = dC^T A
        double* db = bn.grad.data();
        for (int i = 0; i < m; ++i) {
          const double* arow = a2 + static_cast<std::size_t>(i) * k;
          const double* dcrow = dc + static_cast<std::size_t>(i) * n;
          for (int j = 0; j < n; ++j) {
            const double dv = dcrow[j];
            if (dv == 0.0) continue;
            double* dbrow = db + static_cast<std::size_t>(j) * k;
            for (int p = 0; p < k; ++p) dbrow[p] += dv * arow[p];
          }
        }
        bn.touched = true;
      }
    };
  }
  return Value{&g, self};
}

namespace {

Value elementwise_binary(const std::string& op, Value a, Value b,
                         const std::function<double(double, double)>& f,
                         const std::function<void(double, double, double, double&, double&)>& df) {
  require_same_graph(op, a, b);
  if (!a.val().same_shape(b.val()))
    shape_error(op, "shape mismatch " + a.val().shape_str() + " vs " + b.val().shape_str());
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  Tensor C(A.shape());
  const std::int64_t n = A.size();
  for (std::int64_t i = 0; i < n; ++i) C[i] = f(A[i], B[i]);
  Graph& g = *a.g;
  const int ai = a.idx, bi = b.idx;
  const bool ng = g.node(ai).needs_grad || g.node(bi).needs_grad;
  const int self = g.add_node(std::move(C), ng, nullptr);
  if (ng) {
    g.node(self).back = [ai, bi, self, n, df](Graph& gr) {
      const Tensor& dC = gr.node(self).grad;
      const Tensor& A2 = gr.node(ai).val;
      const Tensor& B2 = gr.node(bi).val;
      auto& an = gr.node(ai);
      auto& bn = gr.node(bi);
      for (std::int64_t i = 0; i < n; ++i) {
        double da = 0.0, db = 0.0;
        df(A2[i], B2[i], dC[i], da, db);
        if (an.needs_grad) an.grad[i] += da;
        if (bn.needs_grad) bn.grad[i] += db;
      }
      if (an.needs_grad) an.touched = true;
      if (bn.needs_grad) bn.touched = true;
    };
  }
  return Value{&g, self};
}

}  // namespace

Value add(Value a, Value b) {
  return elementwise_binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double d, double& da, double& db) {
        da = d;
        db = d;
      });
}

Value sub(Value a, Value b) {
  return elementwise_binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double d, double& da, double& db) {
        da = d;
        db = -d;
      });
}

Value mul(Value a, Value b) {
  return elementwise_binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double d, double& da, double& db) {
        da = d * y;
        db = d * x;
      });
}

Value add_rowvec(Value a, Value b) {
  require_same_graph("add_rowvec", a, b);
  require_2d("add_rowvec", a);
  require_2d("add_rowvec", b);
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  if (B.rows() != 1 || B.cols() != A.cols())
    shape_error("add_rowvec", "shape mismatch " + A.shape_str() + " + " + B.shape_str());
  const int m = A.rows(), n = A.cols();
  Tensor C({m, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) C.at(i, j) = A.at(i, j) + B.at(0, j);
  Graph& g = *a.g;
  const int ai = a.idx, bi = b.idx;
  const bool ng = g.node(ai).needs_grad || g.node(bi).needs_grad;
  const int self = g.add_node(std::move(C), ng, nullptr);
  if (ng) {
    g.node(self).back = [ai, bi, self, m, n](Graph& gr) {
      const Tensor& dC = gr.node(self).grad;
      auto& an = gr.node(ai);
      if (an.needs_grad) {
        an.grad.add_inplace(dC);
        an.touched = true;
      }
      auto& bn = gr.node(bi);
      if (bn.needs_grad) {
        for (int j = 0; j < n; ++j) {
          double acc = 0.0;
          for (int i = 0; i < m; ++i) acc += dC.at(i, j);
          bn.grad.at(0, j) += acc;
        }
        bn.touched = true;
      }
    };
  }
  return Value{&g, self};
}

Value mul_rowvec(Value a, Value b) {
  require_same_graph("mul_rowvec", a, b);
  require_2d("mul_rowvec", a);
  require_2d("mul_rowvec", b);
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  if (B.rows() != 1 || B.cols() != A.cols())
    shape_error("mul_rowvec", "shape mismatch " + A.shape_str() + " * " + B.shape_str());
  const int m = A.rows(), n = A.cols();
  Tensor C({m, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) C.at(i, j) = A.at(i, j) * B.at(0, j);
  Graph& g = *a.g;
  const int ai = a.idx, bi = b.idx;
  const bool ng = g.node(ai).needs_grad || g.node(bi).needs_grad;
  const int self = g.add_node(std::move(C), ng, nullptr);
  if (ng) {
    g.node(self).back = [ai, bi, self, m, n](Graph& gr) {
      const Tensor& dC = gr.node(self).grad;
      const Tensor& A2 = gr.node(ai).val;
      const Tensor& B2 = gr.node(bi).val;
      auto& an = gr.node(ai);
      if (an.needs_grad) {
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) an.grad.at(i, j) += dC.at(i, j) * B2.at(0, j);
        an.touched = true;
      }
      auto& bn = gr.node(bi);
      if (bn.needs_grad) {
        for (int j = 0; j < n; ++j) {
          double acc = 0.0;
          for (int i = 0; i < m; ++i) acc += dC.at(i, j) * A2.at(i, j);
          bn.grad.at(0, j) += acc;
        }
        bn.touched = true;
      }
    };
  }
  return Value{&g, self};
}

namespace {

Value elementwise_unary(Value a, const std::function<double(double)>& f,
                        const std::function<double(double, double)>& dfdx /* (x, y) -> dy/dx */) {
  const Tensor& A = a.val();
  Tensor C(A.shape());
  const std::int64_t n = A.size();
  for (std::int64_t i = 0; i < n; ++i) C[i] = f(A[i]);
  Graph& g = *a.g;
  const int ai = a.idx;
  const bool ng = g.node(ai).needs_grad;
  const int self = g.add_node(std::move(C), ng, nullptr);
  if (ng) {
    g.node(self).back = [ai, self, n, dfdx](Graph& gr) {
      const Tensor& dC = gr.node(self).grad;
      const Tensor& A2 = gr.node(ai).val;
      const Tensor& Y = gr.node(self).val;
      auto& an = gr.node(ai);
      for (std::int64_t i = 0; i < n; ++i) an.grad[i] += dC[i] * dfdx(A2[i], Y[i]);
      an.touched = true;
    };
  }
  return Value{&g, self};
}

}  // namespace

Value scale(Value a, double s) {
  return elementwise_unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Value add_scalar(Value a, double s) {
  return elementwise_unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Value relu(Value a) {
  return elementwise_unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                           [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Value sigmoid(Value a) {
  return elementwise_unary(
      a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Value softmax_rows(Value a) {
  require_2d("softmax_rows", a);
  const Tensor& A = a.val();
  const int m = A.rows(), n = A.cols();
  if (n == 0) shape_error("softmax_rows", "empty rows in shape " + A.shape_str());
  Tensor C({m, n});
  for (int i = 0; i < m; ++i) {
    double mx = A.at(i, 0);
    for (int j = 1; j < n; ++j) mx = std::max(mx, A.at(i, j));
    double z = 0.0;
    for (int j = 0; j < n; ++j) {
      const double e = std::exp(A.at(i, j) - mx);
      C.at(i, j) = e;
      z += e;
    }
    for (int j = 0; j < n; ++j) C.at(i, j) /= z;
  }
  Graph& g = *a.g;
  const int ai = a.idx;
  const bool ng = g.node(ai).needs_grad;
  const int self = g.add_node(std::move(C), ng, nullptr);
  if (ng) {
    g.node(self).back = [ai, self, m, n](Graph& gr) {
      const Tensor& dC = gr.node(self).grad;
      const Tensor& Y = gr.node(self).val;
      auto& an = gr.node(ai);
      for (int i = 0; i < m; ++i) {
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += dC.at(i, j) * Y.at(i, j);
        for (int j = 0; j < n; ++j) an.grad.at(i, j) += Y.at(i, j) * (dC.at(i, j) - dot);
      }
      an.touched = true;
    };
  }
  return Value{&g, self};
}

Value log_softmax_rows(Value a) {
  require_2d("log_softmax_rows", a);
  const Tensor& A = a.val();
  const int m = A.rows(), n = A.cols();
  if (n == 0) shape_error("log_softmax_rows", "empty rows in shape " + A.shape_str());
  Tensor C({m, n});
  for (int i = 0; i < m; ++i) {
    double mx = A.at(i, 0);
    for (int j = 1; j < n; ++j) mx = std::max(mx, A.at(i, j));
    double z = 0.0;
    for (int j = 0; j < n; ++j) z += std::exp(A.at(i, j) - mx);
    const double lse = mx + std::log(z);
    for (int j = 0; j < n; ++j) C.at(i, j) = A.at(i, j) - lse;
  }
  Graph& g = *a.g;
  const int ai = a.idx;
  const bool ng = g.node(ai).needs_grad;
  const int self = g.add_node(std::move(C), ng, nullptr);
  if (ng) {
    g.node(self).back = [ai, self, m, n](Graph& gr) {
      const Tensor& dC = gr.node(self).grad;
      const Tensor& Y = gr.node(self).val;
      auto& an = gr.node(ai);
      for (int i = 0; i < m; ++i) {
        double tot = 0.0;
        for (int j = 0; j < n; ++j) tot += dC.at(i, j);
        for (int j = 0; j < n; ++j) an.grad.at(i, j) += dC.at(i, j) - std::exp(Y.at(i, j)) * tot;
      }
      an.touched = true;
    };
  }
  return Value{&g, self};
}

Value log_sum_exp_rows(Value a) {
  require_2d("log_sum_exp_rows", a);
  const Tensor& A = a.val();
  const int m = A.rows(), n = A.cols();
  if (n == 0) shape_error("log_sum_exp_rows", "empty rows in shape " + A.shape_str());
  Tensor C({m, 1});
  for (int i = 0; i < m; ++i) {
    double mx = A.at(i, 0);
    for (int j = 1; j < n; ++j) mx = std::max(mx, A.at(i, j));
    double z = 0.0;
    for (int j = 0; j < n; ++j) z += std::exp(A.at(i, j) - mx);
    C.at(i, 0) = mx + std::log(z);
  }
  Graph& g = *a.g;
  const int ai = a.idx;
  const bool ng = g.node(ai).needs_grad;
  const int self = g.add_node(std::move(C), ng, nullptr);
  if (ng) {
    g.node(self).back = [ai, self, m, n](Graph& gr) {
      const Tensor& dC = gr.node(self).grad;
      const Tensor& Y = gr.node(self).val;
      const Tensor& A2 = gr.node(ai).val;
      auto& an = gr.node(ai);
      for (int i = 0; i < m; ++i) {
        const double dv = dC.at(i, 0);
        if (dv == 0.0) continue;
        for (int j = 0; j < n; ++j) an.grad.at(i, j) += dv * std::exp(A2.at(i, j) - Y.at(i, 0));
      }
      an.touched = true;
    };
  }
  return Value{&g, self};
}

Value layer_norm_rows(Value x, Value gamma, Value beta, double eps) {
  require_same_graph("layer_norm_rows", x, gamma);
  require_same_graph("layer_norm_rows", x, beta);
  require_2d("layer_norm_rows", x);
  const Tensor& X = x.val();
  const int m = X.rows(), n = X.cols();
  if (gamma.val().rows() != 1 || gamma.val().cols() != n || beta.val().rows() != 1 || beta.val().cols() != n)
    shape_error("layer_norm_rows", "affine shape mismatch for input " + X.shape_str());
  Tensor Y({m, n});
  Tensor Xhat({m, n});
  Tensor inv_std({m, 1});
  const Tensor& G = gamma.val();
  const Tensor& B = beta.val();
  for (int i = 0; i < m; ++i) {
    double mean = 0.0;
    for (int j = 0; j < n; ++j) mean += X.at(i, j);
    mean /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      const double d = X.at(i, j) - mean;
      var += d * d;
    }
    var /= n;
    const double istd = 1.0 / std::sqrt(var + eps);
    inv_std.at(i, 0) = istd;
    for (int j = 0; j < n; ++j) {
      const double xh = (X.at(i, j) - mean) * istd;
      Xhat.at(i, j) = xh;
      Y.at(i, j) = xh * G.at(0, j) + B.at(0, j);
    }
  }
  Graph& g = *x.g;
  const int xi = x.idx, gi = gamma.idx, bi = beta.idx;
  const bool ng = g.node(xi).needs_grad || g.node(gi).needs_grad || g.node(bi).needs_grad;
  const int self = g.add_node(std::move(Y), ng, nullptr);
  if (ng) {
    // captured copies keep the normalized activations for the backward pass
    g.node(self).back = [xi, gi, bi, self, m, n, Xhat, inv_std](Graph& gr) {
      const Tensor& dY = gr.node(self).grad;
      const Tensor& G2 = gr.node(gi).val;
      auto& xn = gr.node(xi);
      auto& gn = gr.node(gi);
      auto& bn = gr.node(bi);
      if (gn.needs_grad || bn.needs_grad) {
        for (int j = 0; j < n; ++j) {
          double dg = 0.0, db = 0.0;
          for (int i = 0; i < m; ++i) {
            dg += dY.at(i, j) * Xhat.at(i, j);
            db += dY.at(i, j);
          }
          if (gn.needs_grad) gn.grad.at(0, j) += dg;
          if (bn.needs_grad) bn.grad.at(0, j) += db;
        }
        if (gn.needs_grad) gn.touched = true;
        if (bn.needs_grad) bn.touched = true;
      }
      if (xn.needs_grad) {
        for (int i = 0; i < m; ++i) {
          double mean_dyh = 0.0, mean_dyh_xh = 0.0;
          for (int j = 0; j < n; ++j) {
            const double dyh = dY.at(i, j) * G2.at(0, j);
            mean_dyh += dyh;
            mean_dyh_xh += dyh * Xhat.at(i, j);
          }
          mean_dyh /= n;
          mean_dyh_xh /= n;
          const double istd = inv_std.at(i, 0);
          for (int j = 0; j < n; ++j) {
            const double dyh = dY.at(i, j) * G2.at(0, j);
            xn.grad.at(i, j) += istd * (dyh - mean_dyh - Xhat.at(i, j) * mean_dyh_xh);
          }
        }
        xn.touched = true;
      }
    };
  }
  return Value{&g, self};
}

Value concat_cols(Value a, Value b) {
  require_same_graph("concat_cols", a, b);
  require_2d("concat_cols", a);
  require_2d("concat_cols", b);
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  if (A.rows() != B.rows())
    shape_error("concat_cols", "row count mismatch " + A.shape_str() + " vs " + B.shape_str());
  const int m = A.rows(), na = A.cols(), nb = B.cols();
  Tensor C({m, na + nb});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < na; ++j) C.at(i, j) = A.at(i, j);
    for (int j = 0; j < nb; ++j) C.at(i, na + j) = B.at(i, j);
  }
  Graph& g = *a.g;
  const int ai = a.idx, bi = b.idx;
  const bool ng = g.node(ai).needs_grad || g.node(bi).needs_grad;
  const int self = g.add_node(std::move(C), ng, nullptr);
  if (ng) {
    g.node(self).back = [ai, bi, self, m, na, nb](Graph& gr) {
      const Tensor& dC = gr.node(self).grad;
      auto& an = gr.node(ai);
      if (an.needs_grad) {
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < na; ++j) an.grad.at(i, j) += dC.at(i, j);
        an.touched = true;
      }
      auto& bn = gr.node(bi);
      if (bn.needs_grad) {
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < nb; ++j) bn.grad.at(i, j) += dC.at(i, na + j);
        bn.touched = true;
      }
    };
  }
  return Value{&g, self};
}

Value concat_cols(const std::vector<Value>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  Value out = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) out = concat_cols(out, parts[i]);
  return out;
}

Value concat_rows(Value a, Value b) {
  require_same_graph("concat_rows", a, b);
  require_2d("concat_rows", a);
  require_2d("concat_rows", b);
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  if (A.cols() != B.cols())
    shape_error("concat_rows", "column count mismatch " + A.shape_str() + " vs " + B.shape_str());
  const int ma = A.rows(), mb = B.rows(), n = A.cols();
  Tensor C({ma + mb, n});
  for (int i = 0; i < ma; ++i)
    for (int j = 0; j < n; ++j) C.at(i, j) = A.at(i, j);
  for (int i = 0; i < mb; ++i)
    for (int j = 0; j < n; ++j) C.at(ma + i, j) = B.at(i, j);
  Graph& g = *a.g;
  const int ai = a.idx, bi = b.idx;
  const bool ng = g.node(ai).needs_grad || g.node(bi).needs_grad;
  const int self = g.add_node(std::move(C), ng, nullptr);
  if (ng) {
    g.node(self).back = [ai, bi, self, ma, mb, n](Graph& gr) {
      const Tensor& dC = gr.node(self).grad;
      auto& an = gr.node(ai);
      if (an.needs_grad) {
        for (int i = 0; i < ma; ++i)
          for (int j = 0; j < n; ++j) an.grad.at(i, j) += dC.at(i, j);
        an.touched = true;
      }
      auto& bn = gr.node(bi);
      if (bn.needs_grad) {
        for (int i = 0; i < mb; ++i)
          for (int j = 0; j < n; ++j) bn.grad.at(i, j) += dC.at(ma + i, j);
        bn.touched = true;
      }
    };
  }
  return Value{&g, self};
}

Value slice_cols(Value a, int c0, int c1) {
  require_2d("slice_cols", a);
  const Tensor& A = a.val();
  if (c0 < 0 || c1 > A.cols() || c0 >= c1)
    shape_error("slice_cols", "range [" + std::to_string(c0) + "," + std::to_string(c1) + ") invalid for shape " +
                                  A.shape_str());
  const int m = A.rows(), n = c1 - c0;
  Tensor C({m, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) C.at(i, j) = A.at(i, c0 + j);
  Graph& g = *a.g;
  const int ai = a.idx;
  const bool ng = g.node(ai).needs_grad;
  const int self = g.add_node(std::move(C), ng, nullptr);
  if (ng) {
    g.node(self).back = [ai, self, m, n, c0](Graph& gr) {
      const Tensor& dC = gr.node(self).grad;
      auto& an = gr.node(ai);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) an.grad.at(i, c0 + j) += dC.at(i, j);
      an.touched = true;
    };
  }
  return Value{&g, self};
}

Value gather_rows(Value a, std::vector<int> ids) {
  require_2d("gather_rows", a);
  const Tensor& A = a.val();
  const int n = A.cols();
  const int m = static_cast<int>(ids.size());
  for (int id : ids)
    if (id < 0 || id >= A.rows())
      shape_error("gather_rows", "row index " + std::to_string(id) + " out of range for shape " + A.shape_str());
  Tensor C({m, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) C.at(i, j) = A.at(ids[static_cast<std::size_t>(i)], j);
  Graph& g = *a.g;
  const int ai = a.idx;
  const bool ng = g.node(ai).needs_grad;
  const int self = g.add_node(std::move(C), ng, nullptr);
  if (ng) {
    g.node(self).back = [ai, self, m, n, ids = std::move(ids)](Graph& gr) {
      const Tensor& dC = gr.node(self).grad;
      auto& an = gr.node(ai);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) an.grad.at(ids[static_cast<std::size_t>(i)], j) += dC.at(i, j);
      an.touched = true;
    };
  }
  return Value{&g, self};
}

Value gather_labels(Value a, std::vector<int> labels) {
  require_2d("gather_labels", a);
  const Tensor& A = a.val();
  const int m = A.rows();
  if (static_cast<int>(labels.size()) != m)
    shape_error("gather_labels", "label count " + std::to_string(labels.size()) + " vs rows " + A.shape_str());
  for (int l : labels)
    if (l < 0 || l >= A.cols())
      shape_error("gather_labels", "label " + std::to_string(l) + " out of range for shape " + A.shape_str());
  Tensor C({m, 1});
  for (int i = 0; i < m; ++i) C.at(i, 0) = A.at(i, labels[static_cast<std::size_t>(i)]);
  Graph& g = *a.g;
  const int ai = a.idx;
  const bool ng = g.node(ai).needs_grad;
  const int self = g.add_node(std::move(C), ng, nullptr);
  if (ng) {
    g.node(self).back = [ai, self, m, labels = std::move(labels)](Graph& gr) {
      const Tensor& dC = gr.node(self).grad;
      auto& an = gr.node(ai);
      for (int i = 0; i < m; ++i) an.grad.at(i, labels[static_cast<std::size_t>(i)]) += dC.at(i, 0);
      an.touched = true;
    };
  }
  return Value{&g, self};
}

Value mean_rows(Value a) {
  require_2d("mean_rows", a);
  const Tensor& A = a.val();
  const int m = A.rows(), n = A.cols();
  if (m == 0) shape_error("mean_rows", "no rows in shape " + A.shape_str());
  Tensor C({1, n});
  for (int j = 0; j < n; ++j) {
    double acc = 0.0;
    for (int i = 0; i < m; ++i) acc += A.at(i, j);
    C.at(0, j) = acc / m;
  }
  Graph& g = *a.g;
  const int ai = a.idx;
  const bool ng = g.node(ai).needs_grad;
  const int self = g.add_node(std::move(C), ng, nullptr);
  if (ng) {
    g.node(self).back = [ai, self, m, n](Graph& gr) {
      const Tensor& dC = gr.node(self).grad;
      auto& an = gr.node(ai);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) an.grad.at(i, j) += dC.at(0, j) / m;
      an.touched = true;
    };
  }
  return Value{&g, self};
}

Value sum_all(Value a) {
  const Tensor& A = a.val();
  double acc = 0.0;
  for (std::int64_t i = 0; i < A.size(); ++i) acc += A[i];
  Graph& g = *a.g;
  const int ai = a.idx;
  const bool ng = g.node(ai).needs_grad;
  const std::int64_t n = A.size();
  const int self = g.add_node(Tensor::scalar(acc), ng, nullptr);
  if (ng) {
    g.node(self).back = [ai, self, n](Graph& gr) {
      const double d = gr.node(self).grad[0];
      auto& an = gr.node(ai);
      for (std::int64_t i = 0; i < n; ++i) an.grad[i] += d;
      an.touched = true;
    };
  }
  return Value{&g, self};
}

Value mean_all(Value a) {
  const std::int64_t n = a.val().size();
  if (n == 0) shape_error("mean_all", "empty tensor");
  return scale(sum_all(a), 1.0 / static_cast<double>(n));
}

Value l2_normalize_rows(Value a, double eps) {
  require_2d("l2_normalize_rows", a);
  const Tensor& A = a.val();
  const int m = A.rows(), n = A.cols();
  Tensor C({m, n});
  Tensor norms({m, 1});
  for (int i = 0; i < m; ++i) {
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += A.at(i, j) * A.at(i, j);
    const double r = std::sqrt(s + eps);
    norms.at(i, 0) = r;
    for (int j = 0; j < n; ++j) C.at(i, j) = A.at(i, j) / r;
  }
  Graph& g = *a.g;
  const int ai = a.idx;
  const bool ng = g.node(ai).needs_grad;
  const int self = g.add_node(std::move(C), ng, nullptr);
  if (ng) {
    g.node(self).back = [ai, self, m, n, norms](Graph& gr) {
      const Tensor& dC = gr.node(self).grad;
      const Tensor& A2 = gr.node(ai).val;
      auto& an = gr.node(ai);
      for (int i = 0; i < m; ++i) {
        const double r = norms.at(i, 0);
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += A2.at(i, j) * dC.at(i, j);
        const double r3 = r * r * r;
        for (int j = 0; j < n; ++j) an.grad.at(i, j) += dC.at(i, j) / r - A2.at(i, j) * dot / r3;
      }
      an.touched = true;
    };
  }
  return Value{&g, self};
}

Value row_norms(Value a) {
  require_2d("row_norms", a);
  const Tensor& A = a.val();
  const int m = A.rows(), n = A.cols();
  Tensor C({m, 1});
  for (int i = 0; i < m; ++i) {
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += A.at(i, j) * A.at(i, j);
    C.at(i, 0) = std::sqrt(s);
  }
  Graph& g = *a.g;
  const int ai = a.idx;
  const bool ng = g.node(ai).needs_grad;
  const int self = g.add_node(std::move(C), ng, nullptr);
  if (ng) {
    g.node(self).back = [ai, self, m, n](Graph& gr) {
      const Tensor& dC = gr.node(self).grad;
      const Tensor& Y = gr.node(self).val;
      const Tensor& A2 = gr.node(ai).val;
      auto& an = gr.node(ai);
      for (int i = 0; i < m; ++i) {
        const double r = Y.at(i, 0);
        if (r == 0.0) continue;  // subgradient at the origin
        const double dv = dC.at(i, 0);
        for (int j = 0; j < n; ++j) an.grad.at(i, j) += dv * A2.at(i, j) / r;
      }
      an.touched = true;
    };
  }
  return Value{&g, self};
}

Value mask_rows(Value a, Value replacement, const std::vector<char>& mask) {
  require_same_graph("mask_rows", a, replacement);
  require_2d("mask_rows", a);
  require_2d("mask_rows", replacement);
  const Tensor& A = a.val();
  const Tensor& R = replacement.val();
  const int m = A.rows(), n = A.cols();
  if (R.rows() != 1 || R.cols() != n)
    shape_error("mask_rows", "replacement shape " + R.shape_str() + " for input " + A.shape_str());
  if (static_cast<int>(mask.size()) != m)
    shape_error("mask_rows", "mask length " + std::to_string(mask.size()) + " vs rows " + A.shape_str());
  Tensor C({m, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) C.at(i, j) = mask[static_cast<std::size_t>(i)] ? R.at(0, j) : A.at(i, j);
  Graph& g = *a.g;
  const int ai = a.idx, ri = replacement.idx;
  const bool ng = g.node(ai).needs_grad || g.node(ri).needs_grad;
  const int self = g.add_node(std::move(C), ng, nullptr);
  if (ng) {
    g.node(self).back = [ai, ri, self, m, n, mask](Graph& gr) {
      const Tensor& dC = gr.node(self).grad;
      auto& an = gr.node(ai);
      auto& rn = gr.node(ri);
      for (int i = 0; i < m; ++i) {
        if (mask[static_cast<std::size_t>(i)]) {
          if (rn.needs_grad)
            for (int j = 0; j < n; ++j) rn.grad.at(0, j) += dC.at(i, j);
        } else {
          if (an.needs_grad)
            for (int j = 0; j < n; ++j) an.grad.at(i, j) += dC.at(i, j);
        }
      }
      if (an.needs_grad) an.touched = true;
      if (rn.needs_grad) rn.touched = true;
    };
  }
  return Value{&g, self};
}

Value log_clamped(Value a, double min_val) {
  const Tensor& A = a.val();
  Tensor C(A.shape());
  const std::int64_t n = A.size();
  std::int64_t clamped = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    if (A[i] < min_val) {
      C[i] = std::log(min_val);
      ++clamped;
    } else {
      C[i] = std::log(A[i]);
    }
  }
  Graph& g = *a.g;
  if (clamped > 0) g.note_clamp(clamped);
  const int ai = a.idx;
  const bool ng = g.node(ai).needs_grad;
  const int self = g.add_node(std::move(C), ng, nullptr);
  if (ng) {
    g.node(self).back = [ai, self, n, min_val](Graph& gr) {
      const Tensor& dC = gr.node(self).grad;
      const Tensor& A2 = gr.node(ai).val;
      auto& an = gr.node(ai);
      for (std::int64_t i = 0; i < n; ++i) {
        if (A2[i] >= min_val) an.grad[i] += dC[i] / A2[i];
      }
      an.touched = true;
    };
  }
  return Value{&g, self};
}

// ---------------------------------------------------------------------------
// composites
// ---------------------------------------------------------------------------

Value linear(Value x, Value w, Value b) { return add_rowvec(matmul(x, w), b); }

Value embedding(ParamStore& store, Graph& g, const std::string& table, const std::vector<int>& ids) {
  return gather_rows(g.param(store, table), ids);
}

Value multihead_self_attention(Value x, const AttentionParams& p, int heads) {
  const int d = x.cols();
  if (heads <= 0 || d % heads != 0)
    throw std::invalid_argument("multihead_self_attention: model dim " + std::to_string(d) +
                                " not divisible by " + std::to_string(heads) + " heads");
  const int dh = d / heads;
  const Value q = linear(x, p.wq, p.bq);
  const Value k = linear(x, p.wk, p.bk);
  const Value v = linear(x, p.wv, p.bv);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Value heads_out;  // assembled by concatenation
  for (int h = 0; h < heads; ++h) {
    const int c0 = h * dh, c1 = (h + 1) * dh;
    const Value qh = slice_cols(q, c0, c1);
    const Value kh = slice_cols(k, c0, c1);
    const Value vh = slice_cols(v, c0, c1);
    const Value att = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt));
    const Value oh = matmul(att, vh);
    heads_out = (h == 0) ? oh : concat_cols(heads_out, oh);
  }
  return linear(heads_out, p.wo, p.bo);
}

Value transformer_encoder_layer(Value x, const EncoderLayerParams& p, int heads) {
  const Value att = multihead_self_attention(x, p.attn, heads);
  const Value h = layer_norm_rows(add(x, att), p.ln1_g, p.ln1_b);
  const Value ff = linear(relu(linear(h, p.ff_w1, p.ff_b1)), p.ff_w2, p.ff_b2);
  return layer_norm_rows(add(h, ff), p.ln2_g, p.ln2_b);
}

Value softmax_cross_entropy_sum(Value logits, const std::vector<int>& labels) {
  return scale(sum_all(gather_labels(log_softmax_rows(logits), labels)), -1.0);
}

}  // namespace htcl
