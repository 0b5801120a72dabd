#include "epng/gradcheck.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace epng {

GradCheckReport grad_check(const std::function<Tensor()>& f, std::span<const Parameter> params,
                           double epsilon) {
  if (!(epsilon >= 1e-7 && epsilon <= 1e-3)) {
    throw std::invalid_argument("grad_check: epsilon " + std::to_string(epsilon) +
                                " outside [1e-7, 1e-3]");
  }
  GradCheckReport report;

  std::vector<Tensor> tensors;
  for (const Parameter& p : params) {
    Tensor t = p.tensor;
    t.track();
    t.zero_grad();
    tensors.push_back(t);
  }

  std::vector<std::vector<double>> analytic(params.size());
  {
    Tape tape;
    Tensor loss = f();
    if (!std::isfinite(loss.item())) {
      report.non_finite = true;
      report.non_finite_param = "(forward pass)";
      return report;
    }
    tape.backward(loss);
    for (std::size_t p = 0; p < params.size(); ++p) {
      analytic[p].assign(tensors[p].grad(), tensors[p].grad() + tensors[p].size());
    }
  }

  constexpr double kFloor = 1e-4;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& t = tensors[p];
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t.data()[i];
      t.data()[i] = orig + epsilon;
      const double fp = f().item();
      t.data()[i] = orig - epsilon;
      const double fm = f().item();
      t.data()[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        report.non_finite = true;
        report.non_finite_param = params[p].name;
        return report;
      }
      const double fd = (fp - fm) / (2.0 * epsilon);
      const double a = analytic[p][i];
      const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), kFloor});
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = params[p].name;
        report.worst_index = i;
      }
    }
  }
  return report;
}

}  // namespace epng
