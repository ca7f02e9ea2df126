#include "densemae/optimizer.hpp"

#include <cmath>
#include <numbers>

#include "densemae/errors.hpp"

namespace densemae {

void OptimizerConfig::validate() const {
  if (!(lr > 0.0)) throw config_error("learning rate must be > 0");
  if (!(weight_decay >= 0.0)) throw config_error("weight decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw config_error("moment coefficients must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw config_error("optimizer eps must be > 0");
  if (epochs < 1) throw config_error("epochs must be >= 1");
  if (warmup_epochs < 0 || warmup_epochs > epochs) {
    throw config_error("warm-up epochs must lie in [0, epochs]");
  }
  if (batch_size < 1) throw config_error("batch size must be >= 1");
}

ScheduleShape schedule_shape(const OptimizerConfig& cfg, std::size_t samples) {
  cfg.validate();
  const std::size_t per_epoch = (samples + cfg.batch_size - 1) / cfg.batch_size;
  return {per_epoch * cfg.epochs, per_epoch * cfg.warmup_epochs};
}

double lr_at(std::size_t step, const OptimizerConfig& cfg, const ScheduleShape& shape) {
  const double base = cfg.lr;
  if (step < shape.warmup_steps) return base * static_cast<double>(step) / shape.warmup_steps;
  if (step >= shape.total_steps) return 0.0;
  const double span = static_cast<double>(shape.total_steps - shape.warmup_steps);
  const double progress = (step - shape.warmup_steps) / span;
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void AdamW::step(const std::vector<nn::Parameter<float>*>& params, double lr) {
  if (slots_.empty()) {
    slots_.reserve(params.size());
    for (const auto* p : params) slots_.push_back({p->name, std::vector<float>(p->size(), 0.0f),
                                                   std::vector<float>(p->size(), 0.0f)});
  }
  if (slots_.size() != params.size()) throw training_error("optimizer state does not match the parameter list");
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const float step = static_cast<float>(lr / c1);
  const float inv_c2 = static_cast<float>(1.0 / c2);
  const float eps = static_cast<float>(cfg_.eps);
  const float fb1 = static_cast<float>(b1), fb2 = static_cast<float>(b2);
  for (std::size_t k = 0; k < params.size(); ++k) {
    nn::Parameter<float>& p = *params[k];
    Slot& s = slots_[k];
    if (s.name != p.name || s.m.size() != p.size()) {
      throw training_error("optimizer state for '" + s.name + "' does not match parameter '" + p.name + "'");
    }
    const float shrink = p.decay ? static_cast<float>(1.0 - lr * cfg_.weight_decay) : 1.0f;
    float* w = p.value.data();
    const float* g = p.grad.data();
    float* m = s.m.data();
    float* v = s.v.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = fb1 * m[i] + (1.0f - fb1) * g[i];
      v[i] = fb2 * v[i] + (1.0f - fb2) * g[i] * g[i];
      w[i] = w[i] * shrink - step * m[i] / (std::sqrt(v[i] * inv_c2) + eps);
    }
  }
}

void AdamW::restore(std::vector<Slot> slots, std::size_t steps_taken) {
  slots_ = std::move(slots);
  t_ = steps_taken;
}

nlohmann::json to_json(const OptimizerConfig& c) {
  return {{"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"betas", {c.beta1, c.beta2}},
          {"eps", c.eps},
          {"warmup_epochs", c.warmup_epochs},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size}};
}

OptimizerConfig optimizer_config_from_json(const nlohmann::json& j) {
  OptimizerConfig c;
  try {
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    if (j.contains("betas")) {
      const auto b = j.at("betas").get<std::vector<double>>();
      if (b.size() != 2) throw config_error("betas must have 2 entries");
      c.beta1 = b[0];
      c.beta2 = b[1];
    }
    c.eps = j.value("eps", c.eps);
    c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
  } catch (const nlohmann::json::exception& e) {
    throw config_error(std::string("invalid optimizer config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace densemae
