// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "nsmae/params.hpp"
#include "nsmae/tensor.hpp"

namespace nsmae {

/// Gradients keyed by parameter path. Parameters absent from the table are
/// treated as having a zero gradient.
using GradTable = std::map<std::string, Tensor>;

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Bias-corrected Adam with decoupled weight decay:
///   θ ← θ − lr·m̂/(√v̂ + ε) − lr·wd·θ
/// The decay path is applied independently of the gradient path, so lr = 0
/// leaves parameters bit-identical. One moment pair per parameter, shaped
/// like it; updates walk the store's insertion order.
class AdamW {
 public:
  explicit AdamW(const ParamStore& params, AdamWConfig cfg = {});

  /// One optimizer step. Every gradient is validated (known name, matching
  /// shape, all entries finite) before any buffer is touched, so a rejected
  /// step leaves parameters and moments unchanged.
  void step(ParamStore& params, const GradTable& grads, double lr);

  int64_t step_count() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }
  const Tensor& moment1(const std::string& name) const;
  const Tensor& moment2(const std::string& name) const;

 private:
  AdamWConfig cfg_;
  int64_t t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

/// Cosine one-cycle schedule: warmup from max_lr/div_factor to max_lr over
/// the first warmup_fraction of steps, then anneal to max_lr/final_div.
/// Continuous and piecewise-smooth; throws when step falls outside
/// [0, total_steps].
double one_cycle_lr(int64_t step, int64_t total_steps, double max_lr,
                    double warmup_fraction = 0.3, double div_factor = 25.0,
                    double final_div = 1e4);

/// Scales every gradient in place so the global L2 norm (accumulated in the
/// store's insertion order) is at most max_norm. Returns the pre-clip norm.
double clip_global_norm(GradTable& grads, const ParamStore& params, double max_norm);

}  // namespace nsmae
