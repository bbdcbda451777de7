#include "clustr/gradcheck.hpp"

#include <cmath>

namespace clustr {

namespace {

double evaluate(const LossBuilder& loss) {
  Tape<double> tape(false);
  const double v = loss(tape).value()[0];
  if (!std::isfinite(v)) throw NumericError("gradcheck: loss is not finite");
  return v;
}

std::vector<std::size_t> pick_entries(std::size_t size, std::size_t limit) {
  std::vector<std::size_t> out;
  if (limit == 0 || size <= limit) {
    for (std::size_t i = 0; i < size; ++i) out.push_back(i);
    return out;
  }
  for (std::size_t i = 0; i < limit; ++i) out.push_back(i * size / limit);
  return out;
}

}  // namespace

GradcheckResult finite_diff_gradcheck(const LossBuilder& loss, std::span<Parameter<double>* const> params,
                                      const GradcheckOptions& options) {
  for (auto* p : params) p->zero_grad();
  {
    Tape<double> tape(true);
    Var<double> out = loss(tape);
    if (!std::isfinite(out.value()[0])) throw NumericError("gradcheck: loss is not finite");
    tape.backward(out);
  }

  GradcheckResult result;
  const double h = options.step;
  for (auto* p : params) {
    for (std::size_t idx : pick_entries(p->value.size(), options.max_entries_per_param)) {
      const double saved = p->value[idx];
      p->value[idx] = saved + h;
      const double up = evaluate(loss);
      p->value[idx] = saved - h;
      const double down = evaluate(loss);
      p->value[idx] = saved;

      const double numeric = (up - down) / (2.0 * h);
      const double analytic = p->grad[idx];
      const double rel = std::abs(analytic - numeric) / (std::max(std::abs(analytic), std::abs(numeric)) + 1e-8);
      ++result.entries_checked;
      if (result.worst_param.empty() || rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_param = p->name;
        result.worst_index = idx;
        result.worst_analytic = analytic;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace clustr
