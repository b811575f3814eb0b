#include "htcl/param_store.hpp"

#include <cmath>
#include <stdexcept>

namespace htcl {

void ParamStore::add(const std::string& name, Tensor init) {
  if (slots_.count(name)) throw std::invalid_argument("ParamStore::add: duplicate parameter '" + name + "'");
  Slot s;
  s.grad = Tensor::zeros(init.shape());
  s.m = Tensor::zeros(init.shape());
  s.v = Tensor::zeros(init.shape());
  s.value = std::move(init);
  slots_.emplace(name, std::move(s));
}

Tensor& ParamStore::value(const std::string& name) {
  auto it = slots_.find(name);
  if (it == slots_.end()) throw std::invalid_argument("ParamStore: unknown parameter '" + name + "'");
  return it->second.value;
}

const Tensor& ParamStore::value(const std::string& name) const {
  auto it = slots_.find(name);
  if (it == slots_.end()) throw std::invalid_argument("ParamStore: unknown parameter '" + name + "'");
  return it->second.value;
}

Tensor& ParamStore::grad(const std::string& name) {
  auto it = slots_.find(name);
  if (it == slots_.end()) throw std::invalid_argument("ParamStore: unknown parameter '" + name + "'");
  return it->second.grad;
}

const Tensor& ParamStore::grad(const std::string& name) const {
  auto it = slots_.find(name);
  if (it == slots_.end()) throw std::invalid_argument("ParamStore: unknown parameter '" + name + "'");
  return it->second.grad;
}

void ParamStore::zero_grads() {
  for (auto& [name, slot] : slots_) slot.grad.fill(0.0);
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(slots_.size());
  for (const auto& [name, slot] : slots_) out.push_back(name);
  return out;
}

std::int64_t ParamStore::num_params() const {
  std::int64_t n = 0;
  for (const auto& [name, slot] : slots_) n += slot.value.size();
  return n;
}

void ParamStore::adam_step(double lr, const std::set<std::string>* only, double beta1, double beta2,
                           double eps) {
  for (auto& [name, slot] : slots_) {
    if (only && !only->count(name)) continue;
    slot.t += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(slot.t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(slot.t));
    double* w = slot.value.data();
    double* g = slot.grad.data();
    double* m = slot.m.data();
    double* v = slot.v.data();
    const std::int64_t n = slot.value.size();
    for (std::int64_t i = 0; i < n; ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      g[i] = 0.0;
    }
  }
  step_ += 1;
}

bool ParamStore::operator==(const ParamStore& o) const {
  if (slots_.size() != o.slots_.size()) return false;
  auto a = slots_.begin();
  auto b = o.slots_.begin();
  for (; a != slots_.end(); ++a, ++b) {
    if (a->first != b->first) return false;
    if (!a->second.value.same_shape(b->second.value)) return false;
    if (a->second.value.vec() != b->second.value.vec()) return false;
  }
  return true;
}

Tensor init_linear_weight(int in_dim, int out_dim, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
  Tensor w({in_dim, out_dim});
  for (std::int64_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-bound, bound);
  return w;
}

Tensor init_embedding(int num, int dim, Rng& rng) {
  Tensor e({num, dim});
  for (std::int64_t i = 0; i < e.size(); ++i) e[i] = rng.normal(0.0, 0.02);
  return e;
}

}  // namespace htcl
