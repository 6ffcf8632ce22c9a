#include "roadforge/diff/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "roadforge/common/rng.hpp"

namespace roadforge::diff {

namespace {

double evaluate(const LossFn& fn) {
  Tape tape(false);
  return fn(tape).value()[0];
}

}  // namespace

GradCheckReport grad_check(const LossFn& loss_fn, std::span<Parameter* const> params, const GradCheckOptions& opts) {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape(true);
    tape.backward(loss_fn(tape));
  }
  std::vector<Tensor> analytic;
  for (Parameter* p : params) analytic.push_back(p->grad);

  const double f0 = evaluate(loss_fn);
  const double h = opts.step;
  Rng rng(opts.seed);
  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    std::vector<std::size_t> coords(p.value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opts.max_coords_per_param > 0 && coords.size() > opts.max_coords_per_param) {
      rng.shuffle(coords);
      coords.resize(opts.max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t idx : coords) {
      const double saved = p.value[idx];
      p.value[idx] = saved + h;
      const double fp = evaluate(loss_fn);
      p.value[idx] = saved - h;
      const double fm = evaluate(loss_fn);
      p.value[idx] = saved;

      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[pi][idx];
      const double gap = std::abs(a - numeric);
      const double denom = std::max({std::abs(a), std::abs(numeric), opts.abs_floor});
      CoordinateReport c{p.name, idx, a, numeric, gap / denom};
      ++report.checked;
      if (c.rel_error < opts.tol) {
        if (c.rel_error > report.max_rel_error) {
          report.max_rel_error = c.rel_error;
          report.worst = c;
        }
        continue;
      }
      const double forward = (fp - f0) / h;
      const double backward = (f0 - fm) / h;
      if (std::abs(forward - backward) > gap) {
        report.excluded.push_back(c);
        continue;
      }
      report.failures.push_back(c);
      report.passed = false;
      if (c.rel_error > report.max_rel_error) {
        report.max_rel_error = c.rel_error;
        report.worst = c;
      }
    }
  }
  return report;
}

}  // namespace roadforge::diff
