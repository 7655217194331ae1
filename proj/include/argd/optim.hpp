#pragma once

// SGD with momentum and coupled weight decay, and the learning-rate schedules.

#include <string>
#include <vector>

#include "argd/nn.hpp"

namespace argd {

enum class LrSchedule { kConstant, kStep };

LrSchedule parse_lr_schedule(const std::string& name);
const char* lr_schedule_name(LrSchedule s);

/// Step schedule: x0.1 once half the epochs are done and again at three quarters.
double learning_rate_at(LrSchedule schedule, double base, int epoch, int total_epochs);

/// v = momentum * v + (g + wd * w); w -= lr * v. Parameters whose decay flag
/// is off (batch-norm affine, biases of projectors) skip the wd term.
template <typename T>
class Sgd {
 public:
  Sgd(std::vector<nn::Parameter<T>*> params, double momentum, double weight_decay)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    for (auto* p : params_) p->velocity.assign(p->value.size(), T{});
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  void step(double lr) {
    const T mu = static_cast<T>(momentum_);
    const T step = static_cast<T>(lr);
    for (auto* p : params_) {
      const T wd = p->decay ? static_cast<T>(weight_decay_) : T{};
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const T g = p->grad[i] + wd * p->value[i];
        p->velocity[i] = mu * p->velocity[i] + g;
        p->value[i] -= step * p->velocity[i];
      }
    }
  }

  const std::vector<nn::Parameter<T>*>& params() const { return params_; }

 private:
  std::vector<nn::Parameter<T>*> params_;
  double momentum_;
  double weight_decay_;
};

}  // namespace argd
