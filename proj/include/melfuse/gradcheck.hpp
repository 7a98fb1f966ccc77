#pragma once

// Finite-difference gradient checker. Runs in double precision: the reverse
// pass of `f` is compared against central differences (f(x+h) - f(x-h)) / 2h
// per parameter element.

#include "melfuse/ops.hpp"

namespace melfuse {

struct GradCheckOptions {
  double h = 1e-5;
  double denom_floor = 1e-8;
};

// `f` must be a deterministic scalar function of the listed parameters.
// Returns the maximum relative error over all parameter elements.
inline double check_gradients(const std::function<TensorT<double>()>& f,
                              const std::vector<TensorT<double>*>& params,
                              GradCheckOptions opt = {}) {
  for (TensorT<double>* p : params) {
    if (!p->requires_grad) throw std::invalid_argument("check_gradients: parameter without grad");
    p->zero_grad();
  }
  TensorT<double> y = f();
  if (!std::isfinite(y.item())) throw std::runtime_error("check_gradients: f is not finite");
  y.backward();

  double max_rel = 0.0;
  NoGradGuard ng;
  for (TensorT<double>* p : params) {
    auto& data = *p->data;
    const auto& grad = *p->grad;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + opt.h;
      const double fp = f().item();
      data[i] = saved - opt.h;
      const double fm = f().item();
      data[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw std::runtime_error("check_gradients: perturbed f is not finite");
      const double fd = (fp - fm) / (2.0 * opt.h);
      const double ad = grad[i];
      const double denom = std::max({std::abs(fd), std::abs(ad), opt.denom_floor});
      max_rel = std::max(max_rel, std::abs(fd - ad) / denom);
    }
  }
  return max_rel;
}

}  // namespace melfuse
