#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "roadforge/diff/tape.hpp"

namespace roadforge::diff {

struct GradCheckOptions {
  double step = 1e-6;
  double tol = 1e-5;
  /// Denominator floor of the relative error |a - n| / max(|a|, |n|, floor).
  double abs_floor = 1e-6;
  /// 0 checks every coordinate; otherwise a seeded sample per parameter.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
};

struct CoordinateReport {
  std::string param;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  bool passed = true;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  CoordinateReport worst;
  std::vector<CoordinateReport> failures;
  /// Coordinates whose one-sided differences disagree by more than the
  /// analytic/numeric gap: the perturbation straddles a kink (relu at 0,
  /// maxpool tie), so they are reported but not failed.
  std::vector<CoordinateReport> excluded;
};

/// `loss_fn` must build the scalar loss on the given tape from `params`
/// (via Tape::param) and be deterministic.
using LossFn = std::function<Var(Tape&)>;

GradCheckReport grad_check(const LossFn& loss_fn, std::span<Parameter* const> params,
                           const GradCheckOptions& opts = {});

}  // namespace roadforge::diff
