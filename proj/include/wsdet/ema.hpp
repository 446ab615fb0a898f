#pragma once

// Teacher/student parameter state: the EMA teacher update and the three
// ways of handling normalization running statistics during SSL training.

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "wsdet/error.hpp"

namespace wsdet {

inline constexpr double kDefaultEmaAlpha = 0.999;
inline constexpr double kDefaultNormMomentum = 0.1;

// theta is the flat parameter vector. norm_mean / norm_var are the running
// mean and running variance of each normalization channel; the standard
// deviation is derived on demand.
struct ParameterState {
  std::vector<double> theta;
  std::vector<double> norm_mean;
  std::vector<double> norm_var;

  std::vector<double> norm_std() const {
    std::vector<double> out(norm_var.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(norm_var[i]);
    return out;
  }

  friend bool operator==(const ParameterState&, const ParameterState&) = default;
};

inline bool all_finite(std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

inline void validate(const ParameterState& s) {
  require(all_finite(s.theta) && all_finite(s.norm_mean) && all_finite(s.norm_var),
          "parameter state contains non-finite values");
  require(s.norm_mean.size() == s.norm_var.size(),
          "norm_mean and norm_var must have the same length");
  for (double v : s.norm_var) require(v >= 0.0, "norm_var must be non-negative");
}

// Student keeps its own running statistics; the teacher's stay at their
// initial values.
struct OpenNorm {
  double momentum = kDefaultNormMomentum;
};

// As OpenNorm, and the teacher's statistics are EMA-blended toward the
// student's. An empty alpha means "use the parameter EMA factor".
struct EmaNorm {
  std::optional<double> alpha;
  double momentum = kDefaultNormMomentum;
};

// Neither model's statistics ever change.
struct FrozenNorm {};

using NormStrategy = std::variant<OpenNorm, EmaNorm, FrozenNorm>;

inline std::string_view strategy_name(const NormStrategy& s) {
  if (std::holds_alternative<OpenNorm>(s)) return "open";
  if (std::holds_alternative<EmaNorm>(s)) return "ema";
  return "frozen";
}

inline std::optional<NormStrategy> parse_strategy(std::string_view name) {
  if (name == "open") return NormStrategy{OpenNorm{}};
  if (name == "ema") return NormStrategy{EmaNorm{}};
  if (name == "frozen") return NormStrategy{FrozenNorm{}};
  return std::nullopt;
}

// Returns a teacher whose theta is alpha * teacher + (1 - alpha) * student.
// The normalization statistics are copied from the teacher unchanged; they
// belong to apply_norm_strategy.
inline ParameterState ema_update(const ParameterState& teacher,
                                 const ParameterState& student,
                                 double alpha = kDefaultEmaAlpha) {
  require(alpha > 0.0 && alpha < 1.0, "EMA alpha must lie in (0, 1)");
  require(teacher.theta.size() == student.theta.size(),
          "teacher and student theta dimensions differ");
  ParameterState out = teacher;
  const double beta = 1.0 - alpha;
  for (std::size_t i = 0; i < out.theta.size(); ++i) {
    out.theta[i] = alpha * teacher.theta[i] + beta * student.theta[i];
  }
  return out;
}

// Applies one step of the chosen normalization strategy. alpha is the
// parameter EMA factor, used by EmaNorm when it has none of its own.
inline std::pair<ParameterState, ParameterState> apply_norm_strategy(
    const NormStrategy& strategy, const ParameterState& teacher,
    const ParameterState& student, std::span<const double> batch_mean,
    std::span<const double> batch_var, double alpha = kDefaultEmaAlpha) {
  const std::size_t n = student.norm_mean.size();
  require(teacher.norm_mean.size() == n && teacher.norm_var.size() == n &&
              student.norm_var.size() == n && batch_mean.size() == n &&
              batch_var.size() == n,
          "normalization statistic dimensions differ");
  for (double v : batch_var) require(v >= 0.0, "batch variance must be non-negative");

  if (std::holds_alternative<FrozenNorm>(strategy)) return {teacher, student};

  const double momentum = std::holds_alternative<OpenNorm>(strategy)
                              ? std::get<OpenNorm>(strategy).momentum
                              : std::get<EmaNorm>(strategy).momentum;
  require(momentum >= 0.0 && momentum <= 1.0, "norm momentum must lie in [0, 1]");

  ParameterState s = student;
  for (std::size_t i = 0; i < n; ++i) {
    s.norm_mean[i] = (1.0 - momentum) * student.norm_mean[i] + momentum * batch_mean[i];
    s.norm_var[i] = (1.0 - momentum) * student.norm_var[i] + momentum * batch_var[i];
  }
  if (std::holds_alternative<OpenNorm>(strategy)) return {teacher, std::move(s)};

  const double a = std::get<EmaNorm>(strategy).alpha.value_or(alpha);
  require(a > 0.0 && a < 1.0, "EMA norm alpha must lie in (0, 1)");
  ParameterState t = teacher;
  for (std::size_t i = 0; i < n; ++i) {
    t.norm_mean[i] = a * teacher.norm_mean[i] + (1.0 - a) * s.norm_mean[i];
    t.norm_var[i] = a * teacher.norm_var[i] + (1.0 - a) * s.norm_var[i];
  }
  return {std::move(t), std::move(s)};
}

}  // namespace wsdet
