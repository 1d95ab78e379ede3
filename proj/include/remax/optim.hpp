#pragma once

// First-order optimizers over a ParamStore, plus the step-decay learning
// rate schedule. Updates walk parameters in registration order, so a run
// is bit-reproducible.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "remax/model.hpp"

namespace remax {

struct OptimConfig {
  enum class Kind { kAdamW, kSgd } kind = Kind::kAdamW;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.005;  // decoupled
  double momentum = 0.9;        // SGD only
};

// Piecewise-constant decay: the base rate is multiplied by `factor` once
// the (1-based) step reaches ceil(milestone * total_steps).
struct LrSchedule {
  double base = 1e-3;
  std::vector<double> milestones{0.85, 0.95};
  double factor = 0.1;

  double at(int step, int total_steps) const {
    double lr = base;
    for (double m : milestones) {
      const int boundary = static_cast<int>(std::ceil(m * static_cast<double>(total_steps)));
      if (step >= boundary) lr *= factor;
    }
    return lr;
  }
};

// Gradients keyed by parameter name, accumulated in parameter order.
class GradBuffer {
 public:
  explicit GradBuffer(const ParamStore& params) {
    for (const auto& [name, t] : params) {
      names_.push_back(name);
      grads_.emplace_back(t.numel(), 0.0);
    }
  }

  void add(const std::string& name, const Tensor& g, double scale = 1.0) {
    auto& buf = slot(name);
    if (buf.size() != g.numel()) throw ShapeError("gradient shape mismatch for " + name);
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += scale * g.data[i];
  }

  std::size_t size() const { return names_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  const std::vector<double>& grad(std::size_t i) const { return grads_[i]; }

 private:
  std::vector<double>& slot(const std::string& name) {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (names_[i] == name) return grads_[i];
    }
    throw TensorError("gradient buffer: unknown parameter " + name);
  }
  std::vector<std::string> names_;
  std::vector<std::vector<double>> grads_;
};

class Optimizer {
 public:
  Optimizer(const OptimConfig& cfg, const ParamStore& params) : cfg_(cfg) {
    for (const auto& [name, t] : params) {
      m_.emplace_back(t.numel(), 0.0);
      v_.emplace_back(t.numel(), 0.0);
    }
  }

  void step(ParamStore& params, const GradBuffer& grads, double lr) {
    ++t_;
    std::size_t slot = 0;
    for (auto& [name, p] : params) {
      const auto& g = grads.grad(slot);
      auto& m = m_[slot];
      auto& v = v_[slot];
      if (cfg_.kind == OptimConfig::Kind::kAdamW) {
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < g.size(); ++i) {
          m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
          v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
          const double mhat = m[i] / bc1;
          const double vhat = v[i] / bc2;
          p.data[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                             cfg_.weight_decay * p.data[i]);
        }
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) {
          m[i] = cfg_.momentum * m[i] + g[i];
          p.data[i] -= lr * (m[i] + cfg_.weight_decay * p.data[i]);
        }
      }
      ++slot;
    }
  }

 private:
  OptimConfig cfg_;
  long t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace remax
