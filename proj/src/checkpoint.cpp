// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#include "nsmae/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace nsmae {

namespace {

constexpr char kMagic[8] = {'N', 'S', 'M', 'A', 'E', 'C', 'K', 'P'};
constexpr uint32_t kVersion = 1;

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

void put_bytes(std::FILE* f, const void* p, size_t n) {
  if (std::fwrite(p, 1, n, f) != n) throw std::runtime_error("checkpoint write failed");
}

void put_u32(std::FILE* f, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(f, b, 4);
}

void put_u64(std::FILE* f, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(f, b, 8);
}

void put_f64(std::FILE* f, double v) { put_u64(f, std::bit_cast<uint64_t>(v)); }

void get_bytes(std::FILE* f, void* p, size_t n) {
  if (std::fread(p, 1, n, f) != n) throw std::runtime_error("truncated checkpoint");
}

uint32_t get_u32(std::FILE* f) {
  unsigned char b[4];
  get_bytes(f, b, 4);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

uint64_t get_u64(std::FILE* f) {
  unsigned char b[8];
  get_bytes(f, b, 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

double get_f64(std::FILE* f) { return std::bit_cast<double>(get_u64(f)); }

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& params,
                     const CheckpointMeta& meta) {
  File f(std::fopen(path.c_str(), "wb"));
  if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  put_bytes(f.get(), kMagic, 8);
  put_u32(f.get(), kVersion);
  put_u32(f.get(), static_cast<uint32_t>(params.count()));
  for (const std::string& name : params.names()) {
    const Tensor& t = params.at(name);
    put_u32(f.get(), static_cast<uint32_t>(name.size()));
    put_bytes(f.get(), name.data(), name.size());
    put_u32(f.get(), static_cast<uint32_t>(t.shape.size()));
    for (const int64_t e : t.shape) put_u64(f.get(), static_cast<uint64_t>(e));
    for (int64_t i = 0; i < t.numel(); ++i) put_f64(f.get(), t[i]);
  }
  std::ostringstream text;
  text << "step " << meta.step << "\n";
  text << "epoch " << meta.epoch << "\n";
  text << "rng_state " << meta.rng_state << "\n";
  text << "config_hash " << meta.config_hash << "\n";
  const std::string block = text.str();
  put_u64(f.get(), block.size());
  put_bytes(f.get(), block.data(), block.size());
  if (std::fflush(f.get()) != 0) throw std::runtime_error("checkpoint write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  File f(std::fopen(path.c_str(), "rb"));
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  get_bytes(f.get(), magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("bad magic: " + path + " is not a checkpoint");
  const uint32_t version = get_u32(f.get());
  if (version != kVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  const uint32_t count = get_u32(f.get());

  Checkpoint ck;
  for (uint32_t k = 0; k < count; ++k) {
    const uint32_t path_len = get_u32(f.get());
    std::string name(path_len, '\0');
    get_bytes(f.get(), name.data(), path_len);
    const uint32_t rank = get_u32(f.get());
    Shape shape(rank);
    for (uint32_t r = 0; r < rank; ++r) {
      const uint64_t e = get_u64(f.get());
      shape[r] = static_cast<int64_t>(e);
      if (shape[r] < 1) throw std::runtime_error("corrupt extent for " + name);
    }
    Tensor t = Tensor::zeros(shape);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = get_f64(f.get());
    ck.params.add(name, std::move(t));
  }

  const uint64_t block_len = get_u64(f.get());
  std::string block(block_len, '\0');
  get_bytes(f.get(), block.data(), block_len);
  std::istringstream text(block);
  std::string key;
  uint64_t value = 0;
  while (text >> key >> value) {
    if (key == "step")
      ck.meta.step = value;
    else if (key == "epoch")
      ck.meta.epoch = value;
    else if (key == "rng_state")
      ck.meta.rng_state = value;
    else if (key == "config_hash")
      ck.meta.config_hash = value;
    // unknown metadata keys are ignored for forward compatibility
  }
  return ck;
}

void apply_exact(ParamStore& target, const Checkpoint& ck) {
  for (const std::string& name : target.names())
    if (!ck.params.has(name))
      throw std::runtime_error("checkpoint is missing parameter " + name);
  for (const std::string& name : ck.params.names()) {
    if (!target.has(name))
      throw std::runtime_error("checkpoint carries unknown parameter " + name);
    const Tensor& src = ck.params.at(name);
    Tensor& dst = target.at(name);
    if (!same_shape(src.shape, dst.shape))
      throw std::runtime_error("shape mismatch for " + name + ": checkpoint " +
                               shape_str(src.shape) + " vs model " + shape_str(dst.shape));
    dst = src;
  }
}

size_t apply_prefix(ParamStore& target, const Checkpoint& ck) {
  size_t applied = 0;
  for (const std::string& name : ck.params.names()) {
    if (!target.has(name)) continue;
    const Tensor& src = ck.params.at(name);
    Tensor& dst = target.at(name);
    if (!same_shape(src.shape, dst.shape))
      throw std::runtime_error("shape mismatch for " + name + ": checkpoint " +
                               shape_str(src.shape) + " vs model " + shape_str(dst.shape));
    dst = src;
    ++applied;
  }
  return applied;
}

}  // namespace nsmae
