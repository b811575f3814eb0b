#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "htcl/rng.hpp"
#include "htcl/tensor.hpp"

namespace htcl {

/// Named parameter tensors with matching gradient accumulators and Adam
/// state. Iteration order is the sorted name order everywhere, which keeps
/// updates and serialization deterministic.
class ParamStore {
public:
  void add(const std::string& name, Tensor init);
  bool has(const std::string& name) const { return slots_.count(name) != 0; }

  Tensor& value(const std::string& name);
  const Tensor& value(const std::string& name) const;
  Tensor& grad(const std::string& name);
  const Tensor& grad(const std::string& name) const;

  void zero_grads();
  std::vector<std::string> names() const;
  std::size_t tensor_count() const { return slots_.size(); }
  std::int64_t num_params() const;
  std::int64_t step_count() const { return step_; }

  /// Adam update (bias-corrected). Updates every parameter, or only the
  /// names in `only` when given; gradients of updated parameters are
  /// cleared and the step counter advances.
  void adam_step(double lr, const std::set<std::string>* only = nullptr, double beta1 = 0.9,
                 double beta2 = 0.999, double eps = 1e-8);

  bool operator==(const ParamStore& o) const;

private:
  struct Slot {
    Tensor value;
    Tensor grad;
    Tensor m;  // Adam first moment
    Tensor v;  // Adam second moment
    std::int64_t t = 0;
  };
  std::map<std::string, Slot> slots_;
  std::int64_t step_ = 0;
};

// Initializers. Linear weights use a symmetric uniform range scaled by
// fan-in; embedding tables use N(0, 0.02^2).
Tensor init_linear_weight(int in_dim, int out_dim, Rng& rng);
Tensor init_embedding(int num, int dim, Rng& rng);

}  // namespace htcl
