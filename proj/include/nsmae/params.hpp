// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "nsmae/graph.hpp"
#include "nsmae/tensor.hpp"

namespace nsmae {

/// Named learnable parameters, insertion-ordered. Names follow dotted
/// "module.layer.kind" paths ("camera.conv1.kernel"); the checkpoint format
/// and the transfer probe address parameters by these names.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor init);
  bool has(const std::string& name) const { return by_name_.count(name) != 0; }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  const std::vector<std::string>& names() const { return order_; }
  size_t count() const { return order_.size(); }
  int64_t total_size() const;

 private:
  std::vector<std::string> order_;
  std::map<std::string, Tensor> by_name_;
};

/// Per-graph leaf handles for every parameter, created once per step.
struct Bound {
  std::map<std::string, Var> vars;
  Var at(const std::string& name) const;
};

Bound bind_params(Graph& g, const ParamStore& ps);

/// FNV-1a, used to give every parameter its own deterministic init stream.
uint64_t name_hash(const std::string& name);

/// Uniform in [-limit, limit], seeded by (seed, name).
Tensor uniform_init(Shape shape, double limit, uint64_t seed, const std::string& name);

}  // namespace nsmae
