#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace htcl {

struct GradSuiteItem {
  std::string name;
  double max_rel_err = 0.0;
  std::int64_t entries = 0;
  bool passed = false;
};

/// Finite-difference verification of every layer type and every training
/// loss on small random instances, repeated across seeds. Central
/// differences at the given step in double precision.
std::vector<GradSuiteItem> run_grad_suite(std::uint64_t seed, int seeds_per_item = 10,
                                          double step = 1e-5, double tol = 1e-4);

}  // namespace htcl
