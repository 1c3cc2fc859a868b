#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cast/autodiff.hpp"

namespace cast {

/// Builds a scalar loss from the current parameter values. Must be
/// deterministic: it is re-run twice per checked entry.
using LossBuilder = std::function<Var(Tape&, const ParamStore&)>;

struct GradCheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-4;
  /// Relative error denominator is max(|analytic|, |numeric|, abs_floor).
  double abs_floor = 1e-6;
  /// 0 checks every entry; otherwise a seeded sample of entries per tensor.
  std::size_t max_entries_per_param = 0;
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::string name;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  bool passed = true;
  std::size_t checked = 0;
  GradCheckEntry worst;
  /// Worst entry for every checked parameter tensor.
  std::vector<GradCheckEntry> per_param;
};

/// Compares reverse-mode gradients of every trainable parameter with central
/// finite differences. Parameter values are restored before returning.
GradCheckReport grad_check(ParamStore& store, const LossBuilder& build, const GradCheckOptions& opts = {});

double relative_error(double analytic, double numeric, double abs_floor);

}  // namespace cast
