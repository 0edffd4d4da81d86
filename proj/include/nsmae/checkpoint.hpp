// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>

#include "nsmae/params.hpp"

namespace nsmae {

/// Training provenance carried alongside the parameter table.
struct CheckpointMeta {
  uint64_t step = 0;
  uint64_t epoch = 0;
  uint64_t rng_state = 0;
  uint64_t config_hash = 0;
};

struct Checkpoint {
  ParamStore params;
  CheckpointMeta meta;
};

/// Binary checkpoint: 8-byte magic "NSMAECKP", u32 version, u32 entry count,
/// then per entry a length-prefixed UTF-8 path, u32 rank, u64 extents, and a
/// little-endian f64 payload; a length-prefixed structured-text metadata
/// block trails the entries. Round-trips are bit-exact.
void save_checkpoint(const std::string& path, const ParamStore& params, const CheckpointMeta& meta);
Checkpoint load_checkpoint(const std::string& path);

/// Overwrites every target parameter from the checkpoint. The tables must
/// match exactly: a missing, extra, or differently-shaped path fails with
/// that path named.
void apply_exact(ParamStore& target, const Checkpoint& ck);

/// Transfer loading (φ_down ⊃ φ_emb): copies the checkpoint entries whose
/// paths exist in the target. Shape mismatches fail with the path named;
/// paths private to either side are left alone. Returns how many parameters
/// were copied.
size_t apply_prefix(ParamStore& target, const Checkpoint& ck);

}  // namespace nsmae
