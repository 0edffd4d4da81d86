// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <vector>

#include "nsmae/graph.hpp"

namespace nsmae {

struct GradCheckReport {
  double max_rel_err = 0.0;
  int64_t worst_coord = -1;  // flat coordinate (or sample index for the multi-leaf variant)
  double analytic = 0.0;     // analytic derivative at the worst coordinate
  double numeric = 0.0;      // central difference at the worst coordinate
  int64_t n_checked = 0;
};

/// Central-difference check of the gradient of a scalar function built on the
/// graph. f receives a fresh graph plus the leaf for `point` and must return a
/// scalar-shaped loss. Checks all coordinates when coords is empty; relative
/// error is |analytic - numeric| / max(1, |numeric|). Non-finite values throw
/// with the offending coordinate index.
GradCheckReport grad_check(const std::function<Var(Graph&, Var)>& f, const Tensor& point,
                           double eps = 1e-5, const std::vector<int64_t>& coords = {});

/// Multi-leaf variant for whole-pipeline checks. build receives one leaf per
/// entry of points; coords names (tensor index, flat coordinate) pairs to
/// perturb.
struct ParamCoord {
  size_t param = 0;
  int64_t coord = 0;
};

GradCheckReport grad_check_many(
    const std::function<Var(Graph&, const std::vector<Var>&)>& build,
    const std::vector<Tensor>& points, double eps, const std::vector<ParamCoord>& coords);

}  // namespace nsmae
