#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "htcl/graph.hpp"

namespace htcl {

struct GradCheckEntry {
  std::string param;
  std::int64_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::int64_t entries_checked = 0;
  std::int64_t skipped_kinks = 0;  // entries straddling relu kinks on both sides
  std::vector<GradCheckEntry> failing;
  bool passed = false;
  GradCheckEntry worst;
};

/// Builds a scalar loss from the current store contents. Must be
/// deterministic: two invocations against identical parameters have to
/// produce bit-identical losses (any randomness has to be drawn outside
/// and captured by the closure).
using LossBuilder = std::function<Value(Graph&, ParamStore&)>;

/// Central-difference gradient verification. Checks up to
/// `entries_per_tensor` randomly sampled entries per parameter tensor (all
/// entries when the tensor is smaller). Relative error uses
/// |a - n| / max(|a|, |n|, 1e-4), so near-zero gradients are compared at an
/// absolute resolution of tol * 1e-4. Entries whose step straddles a relu
/// kink are re-scored with Richardson-extrapolated one-sided differences;
/// the rare entries kinked on both sides are excluded and counted in
/// skipped_kinks.
GradCheckReport grad_check(const LossBuilder& f, ParamStore& store, double step = 1e-5,
                           double tol = 1e-4, int entries_per_tensor = 100, std::uint64_t seed = 0);

}  // namespace htcl
