#include "cast/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cast/rng.hpp"

namespace cast {

double relative_error(double analytic, double numeric, double abs_floor) {
  const double den = std::max({std::abs(analytic), std::abs(numeric), abs_floor});
  return std::abs(analytic - numeric) / den;
}

namespace {

double eval_loss(const ParamStore& store, const LossBuilder& build) {
  Tape tape;
  return build(tape, store).value().item();
}

}  // namespace

GradCheckReport grad_check(ParamStore& store, const LossBuilder& build, const GradCheckOptions& opts) {
  Gradients analytic;
  {
    Tape tape;
    Var loss = build(tape, store);
    analytic = tape.backward(loss, store);
  }
  GradCheckReport report;
  Rng rng = Rng::stream(opts.seed, "grad_check");
  for (auto& [name, grad] : analytic) {
    Tensor& value = store.value(name);
    std::vector<std::size_t> entries(value.size());
    std::iota(entries.begin(), entries.end(), std::size_t{0});
    if (opts.max_entries_per_param > 0 && entries.size() > opts.max_entries_per_param) {
      for (std::size_t i = 0; i < opts.max_entries_per_param; ++i)
        std::swap(entries[i], entries[i + rng.below(entries.size() - i)]);
      entries.resize(opts.max_entries_per_param);
      std::sort(entries.begin(), entries.end());
    }
    GradCheckEntry param_worst{name, 0, 0.0, 0.0, -1.0};
    for (std::size_t idx : entries) {
      const double orig = value[idx];
      value[idx] = orig + opts.eps;
      const double up = eval_loss(store, build);
      value[idx] = orig - opts.eps;
      const double down = eval_loss(store, build);
      value[idx] = orig;
      const double numeric = (up - down) / (2.0 * opts.eps);
      const double err = relative_error(grad[idx], numeric, opts.abs_floor);
      ++report.checked;
      if (err > param_worst.rel_error) param_worst = {name, idx, grad[idx], numeric, err};
    }
    if (param_worst.rel_error < 0.0) continue;
    report.per_param.push_back(param_worst);
    if (report.per_param.size() == 1 || param_worst.rel_error > report.max_rel_error) {
      report.max_rel_error = param_worst.rel_error;
      report.worst = param_worst;
    }
  }
  report.passed = report.max_rel_error <= opts.tolerance;
  return report;
}

}  // namespace cast
