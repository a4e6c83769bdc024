#pragma once

#include "viral_lab/autodiff.hpp"

#include <functional>
#include <span>
#include <vector>

namespace viral {

/// Builds a scalar loss on `tape` from leaves bound to the given parameters.
using LossBuilder = std::function<Var(Tape& tape, std::span<const Var> params)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares reverse-mode gradients with central differences
///   (f(p + h e_i) - f(p - h e_i)) / 2h
/// for every entry of every parameter. Error per entry is
/// max(0, |analytic - numeric| - r) / max(1e-8, |numeric|), where
/// r = 8 eps max(|f(p+h)|, |f(p-h)|) / h bounds the rounding in the
/// difference quotient (so structurally zero gradients compare as equal). The finite-difference side
/// only ever evaluates forward values; it shares no code with backward().
/// Throws NonFiniteError if f is not finite at a probe point.
GradCheckResult grad_check(const LossBuilder& f, const std::vector<Tensor>& params, double h = 1e-5);

/// Forward-only evaluation of f at the given parameters.
double evaluate_loss(const LossBuilder& f, const std::vector<Tensor>& params);

}  // namespace viral
