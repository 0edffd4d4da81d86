// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#include "nsmae/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace nsmae {

AdamW::AdamW(const ParamStore& params, AdamWConfig cfg) : cfg_(cfg) {
  if (!(cfg_.beta1 >= 0.0 && cfg_.beta1 < 1.0) || !(cfg_.beta2 >= 0.0 && cfg_.beta2 < 1.0))
    throw std::invalid_argument("adamw betas must lie in [0, 1)");
  if (!(cfg_.eps > 0.0)) throw std::invalid_argument("adamw eps must be positive");
  if (!(cfg_.weight_decay >= 0.0))
    throw std::invalid_argument("adamw weight decay must be non-negative");
  for (const std::string& name : params.names()) {
    m_.emplace(name, Tensor::zeros(params.at(name).shape));
    v_.emplace(name, Tensor::zeros(params.at(name).shape));
  }
}

const Tensor& AdamW::moment1(const std::string& name) const {
  const auto it = m_.find(name);
  if (it == m_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

const Tensor& AdamW::moment2(const std::string& name) const {
  const auto it = v_.find(name);
  if (it == v_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

void AdamW::step(ParamStore& params, const GradTable& grads, double lr) {
  if (!std::isfinite(lr) || lr < 0.0)
    throw std::invalid_argument("learning rate must be finite and non-negative");
  // Validate everything before mutating anything: a rejected step must leave
  // parameters and moments untouched.
  for (const auto& [name, g] : grads) {
    if (!params.has(name))
      throw std::invalid_argument("gradient for unknown parameter: " + name);
    if (!same_shape(g.shape, params.at(name).shape))
      throw std::invalid_argument("gradient shape mismatch for " + name + ": " +
                                  shape_str(g.shape) + " vs " + shape_str(params.at(name).shape));
    for (int64_t i = 0; i < g.numel(); ++i)
      if (!std::isfinite(g[i]))
        throw std::runtime_error("step aborted: non-finite gradient for " + name +
                                 " at coordinate " + std::to_string(i));
  }

  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));

  for (const std::string& name : params.names()) {
    Tensor& theta = params.at(name);
    Tensor& m = m_.at(name);
    Tensor& v = v_.at(name);
    const auto it = grads.find(name);
    const Tensor* g = it == grads.end() ? nullptr : &it->second;
    for (int64_t i = 0; i < theta.numel(); ++i) {
      const double gi = g ? (*g)[i] : 0.0;
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      theta[i] = theta[i] - lr * (m_hat / (std::sqrt(v_hat) + cfg_.eps)) -
                 lr * cfg_.weight_decay * theta[i];
    }
  }
}

double one_cycle_lr(int64_t step, int64_t total_steps, double max_lr, double warmup_fraction,
                    double div_factor, double final_div) {
  if (total_steps < 1) throw std::invalid_argument("total_steps must be at least 1");
  if (step < 0 || step > total_steps)
    throw std::invalid_argument("step " + std::to_string(step) + " outside [0, " +
                                std::to_string(total_steps) + "]");
  if (!(max_lr > 0.0)) throw std::invalid_argument("max_lr must be positive");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0))
    throw std::invalid_argument("warmup_fraction must lie in [0, 1)");
  if (!(div_factor >= 1.0) || !(final_div >= 1.0))
    throw std::invalid_argument("div factors must be at least 1");

  const int64_t up = std::llround(warmup_fraction * static_cast<double>(total_steps));
  const double initial = max_lr / div_factor;
  const double final_lr = max_lr / final_div;
  if (step == up) return max_lr;  // exact peak
  if (step < up) {
    const double t = static_cast<double>(step) / static_cast<double>(up);
    return initial + (max_lr - initial) * 0.5 * (1.0 - std::cos(M_PI * t));
  }
  const double t = static_cast<double>(step - up) / static_cast<double>(total_steps - up);
  return final_lr + (max_lr - final_lr) * 0.5 * (1.0 + std::cos(M_PI * t));
}

double clip_global_norm(GradTable& grads, const ParamStore& params, double max_norm) {
  if (!(max_norm > 0.0)) throw std::invalid_argument("max_norm must be positive");
  double sq = 0.0;
  for (const std::string& name : params.names()) {
    const auto it = grads.find(name);
    if (it == grads.end()) continue;
    const Tensor& g = it->second;
    for (int64_t i = 0; i < g.numel(); ++i) sq += g[i] * g[i];
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (const std::string& name : params.names()) {
      const auto it = grads.find(name);
      if (it == grads.end()) continue;
      for (double& x : it->second.data) x *= s;
    }
  }
  return norm;
}

}  // namespace nsmae
