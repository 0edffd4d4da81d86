// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#include "nsmae/params.hpp"

#include <stdexcept>
#include <utility>

#include "nsmae/rng.hpp"

namespace nsmae {

Tensor& ParamStore::add(const std::string& name, Tensor init) {
  if (name.empty()) throw std::invalid_argument("parameter name is empty");
  auto [it, fresh] = by_name_.emplace(name, std::move(init));
  if (!fresh) throw std::invalid_argument("duplicate parameter: " + name);
  order_.push_back(name);
  return it->second;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

int64_t ParamStore::total_size() const {
  int64_t n = 0;
  for (const auto& [name, t] : by_name_) n += t.numel();
  return n;
}

Var Bound::at(const std::string& name) const {
  auto it = vars.find(name);
  if (it == vars.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

Bound bind_params(Graph& g, const ParamStore& ps) {
  Bound b;
  for (const auto& name : ps.names()) b.vars.emplace(name, g.leaf(ps.at(name)));
  return b;
}

uint64_t name_hash(const std::string& name) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Tensor uniform_init(Shape shape, double limit, uint64_t seed, const std::string& name) {
  Rng rng(seed ^ name_hash(name));
  Tensor t = Tensor::zeros(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = (2.0 * rng.uniform() - 1.0) * limit;
  return t;
}

}  // namespace nsmae
