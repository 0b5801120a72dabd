#pragma once

#include <functional>
#include <span>
#include <string>

#include "epng/params.hpp"
#include "epng/tensor.hpp"

namespace epng {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  bool non_finite = false;
  std::string non_finite_param;
};

/// Central-difference check of the analytic gradient of a deterministic
/// scalar function of the given parameters. f must rebuild its graph on each
/// call and read the parameter tensors' current values. epsilon must lie in
/// [1e-7, 1e-3]. The per-coordinate error is |analytic - fd| divided by
/// max(|analytic|, |fd|, 1e-4); the report carries the maximum.
GradCheckReport grad_check(const std::function<Tensor()>& f, std::span<const Parameter> params,
                           double epsilon = 1e-5);

}  // namespace epng
