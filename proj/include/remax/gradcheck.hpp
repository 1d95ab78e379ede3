#pragma once

// Central-difference verification of reverse-mode gradients.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "remax/tensor.hpp"

namespace remax {

// A scalar-valued function of one tensor. It must run on both attached
// and detached inputs (every op in tensor.hpp does).
using ScalarFn = std::function<Tensor(const Tensor&)>;

struct FdResult {
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  double worst_ad = 0.0;
  double worst_fd = 0.0;
};

// Compares backward() against central differences
//   (f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps)
// component by component and reports
//   max_i |ad_i - fd_i| / max(1e-8, |ad_i| + |fd_i|).
//
// `exempt`, when given, marks components to skip: a component whose only
// path to the loss runs through a declared stop-gradient barrier has an
// exact-zero reverse-mode gradient by contract, while finite differences
// still see the forward value dependence.
inline FdResult fd_check_full(const ScalarFn& f, const Tensor& x, double eps,
                              const std::vector<std::uint8_t>* exempt = nullptr) {
  if (!(eps >= 1e-8 && eps <= 1e-4)) {
    throw TensorError("fd_check eps must lie in [1e-8, 1e-4]");
  }
  if (exempt != nullptr && exempt->size() != x.numel()) {
    throw ShapeError("fd_check exempt mask length mismatch");
  }

  Tape tape;
  Tensor xt = tape.leaf(x.shape, x.data);
  Tensor loss = f(xt);
  if (!loss.is_scalar()) throw ShapeError("fd_check expects a scalar-valued function");
  const Gradients grads = backward(tape, loss);
  const Tensor ad = grads.at(xt);

  FdResult res;
  Tensor probe = x.detached();
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (exempt != nullptr && (*exempt)[i]) continue;
    const double orig = probe.data[i];
    probe.data[i] = orig + eps;
    const double fp = f(probe).value();
    probe.data[i] = orig - eps;
    const double fm = f(probe).value();
    probe.data[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("fd_check objective non-finite under perturbation");
    }
    const double fd = (fp - fm) / (2.0 * eps);
    const double err = std::abs(ad.data[i] - fd) /
                       std::max(1e-8, std::abs(ad.data[i]) + std::abs(fd));
    if (err > res.max_rel_err) {
      res.max_rel_err = err;
      res.worst_index = i;
      res.worst_ad = ad.data[i];
      res.worst_fd = fd;
    }
  }
  return res;
}

inline double fd_check(const ScalarFn& f, const Tensor& x, double eps,
                       const std::vector<std::uint8_t>* exempt = nullptr) {
  return fd_check_full(f, x, eps, exempt).max_rel_err;
}

}  // namespace remax
