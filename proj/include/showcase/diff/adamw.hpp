#pragma once

#include <cmath>
#include <map>
#include <string>

#include "showcase/diff/tensor.hpp"

namespace showcase::diff {

struct AdamWOptions {
  double lr = 1e-4;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Decoupled-weight-decay Adam. Moments start at zero; with weight_decay = 0
/// this is plain Adam.
class AdamW {
 public:
  explicit AdamW(AdamWOptions options = {}) : options_(options) {}

  const AdamWOptions& options() const { return options_; }
  void set_lr(double lr) { options_.lr = lr; }
  long step_count() const { return step_; }

  /// Applies one update from the grads currently stored in `params`.
  void step(ParameterSet& params) {
    for (const auto& [name, p] : params) {
      if (!p.grad.all_finite()) throw NumericalError("non-finite gradient for parameter " + name);
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(step_));
    for (auto& [name, p] : params) {
      auto [it, inserted] = state_.try_emplace(name);
      Moments& st = it->second;
      if (inserted) {
        st.m = Tensor(p.value.rows(), p.value.cols());
        st.v = Tensor(p.value.rows(), p.value.cols());
      }
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        if (options_.weight_decay != 0.0) p.value[i] -= options_.lr * options_.weight_decay * p.value[i];
        st.m[i] = options_.beta1 * st.m[i] + (1.0 - options_.beta1) * g;
        st.v[i] = options_.beta2 * st.v[i] + (1.0 - options_.beta2) * g * g;
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        p.value[i] -= options_.lr * mhat / (std::sqrt(vhat) + options_.eps);
      }
    }
  }

 private:
  struct Moments {
    Tensor m;
    Tensor v;
  };
  AdamWOptions options_;
  std::map<std::string, Moments> state_;
  long step_ = 0;
};

}  // namespace showcase::diff
