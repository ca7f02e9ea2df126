#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "densemae/nn.hpp"
#include "json.hpp"

namespace densemae {

struct OptimizerConfig {
  double lr = 1.5e-4;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  int warmup_epochs = 5;
  int epochs = 100;
  int batch_size = 16;

  void validate() const;
};

struct ScheduleShape {
  std::size_t total_steps = 0;
  std::size_t warmup_steps = 0;
};

// epochs * ceil(samples / batch) steps, warm-up scaled the same way.
ScheduleShape schedule_shape(const OptimizerConfig& cfg, std::size_t samples);

// Linear 0 -> base over [0, warmup], then base * (1 + cos(pi * progress)) / 2
// reaching 0 at total_steps. Update k (1-based) runs at lr_at(k).
double lr_at(std::size_t step, const OptimizerConfig& cfg, const ScheduleShape& shape);

// Adam with decoupled weight decay (p -= lr * wd * p for parameters flagged decay).
class AdamW {
 public:
  struct Slot {
    std::string name;
    std::vector<float> m, v;
  };

  explicit AdamW(const OptimizerConfig& cfg) : cfg_(cfg) {}

  void step(const std::vector<nn::Parameter<float>*>& params, double lr);
  std::size_t steps_taken() const { return t_; }

  const std::vector<Slot>& slots() const { return slots_; }
  // Restores moments saved by slots(); names and sizes must match `params` at the next step.
  void restore(std::vector<Slot> slots, std::size_t steps_taken);

 private:
  OptimizerConfig cfg_;
  std::vector<Slot> slots_;
  std::size_t t_ = 0;
};

nlohmann::json to_json(const OptimizerConfig& cfg);
OptimizerConfig optimizer_config_from_json(const nlohmann::json& j);

}  // namespace densemae
