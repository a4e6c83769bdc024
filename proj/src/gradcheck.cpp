#include "viral_lab/gradcheck.hpp"

#include "viral_lab/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace viral {

double evaluate_loss(const LossBuilder& f, const std::vector<Tensor>& params) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Tensor& p : params) vars.push_back(tape.constant(p));
  const double v = f(tape, vars).value().item();
  if (!std::isfinite(v)) throw NonFiniteError("loss is not finite at a probe point");
  return v;
}

GradCheckResult grad_check(const LossBuilder& f, const std::vector<Tensor>& params, double h) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& p : params) vars.push_back(tape.parameter(p));
    Var loss = f(tape, vars);
    tape.backward(loss);
    for (const Var& v : vars) analytic.push_back(tape.grad(v));
  }

  GradCheckResult result;
  std::vector<Tensor> probe = params;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double orig = params[p][i];
      probe[p][i] = orig + h;
      const double up = evaluate_loss(f, probe);
      probe[p][i] = orig - h;
      const double down = evaluate_loss(f, probe);
      probe[p][i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      // Rounding in up - down alone can move the quotient by this much.
      const double noise = 8.0 * std::numeric_limits<double>::epsilon() * std::max(std::abs(up), std::abs(down)) / h;
      const double excess = std::max(0.0, std::abs(analytic[p][i] - numeric) - noise);
      const double err = excess / std::max(1e-8, std::abs(numeric));
      if (err > result.max_rel_error) {
        result = {err, p, i, analytic[p][i], numeric};
      }
    }
  }
  return result;
}

}  // namespace viral
