// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#include "nsmae/config.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace nsmae {

namespace {

std::string trim(const std::string& s) {
  size_t b = 0;
  size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

}  // namespace

const std::vector<ConfigKey>& Config::keys() {
  static const std::vector<ConfigKey> table = {
      // --- data generation ---
      {"scene.objects", "6", "objects placed per generated scene"},
      {"scene.train", "64", "number of training scenes"},
      {"scene.val", "16", "number of validation scenes"},
      {"scene.probe_train", "24", "scenes in the transfer probe's labeled pool"},
      {"scene.probe_test", "8", "held-out scenes the probe is scored on"},
      {"scene.seed", "1", "base seed for scene generation (pools use disjoint offsets)"},
      {"camera.focal", "48", "pinhole focal length in pixels"},
      {"lidar.azimuths", "96", "lidar rays per elevation ring"},
      {"lidar.elevations", "32", "lidar elevation rings"},
      // --- network geometry ---
      {"net.image_h", "32", "camera image height in pixels"},
      {"net.image_w", "64", "camera image width in pixels"},
      {"net.kappa", "4", "camera encoder downsampling factor"},
      {"net.depth_bins", "8", "depth bins per perspective ray (D)"},
      {"net.cam_channels", "16", "camera embedding channels (C_I)"},
      {"net.lidar_channels", "16", "lidar embedding channels (C_L)"},
      {"net.depth_min", "0.5", "nearest metric depth covered by the bins"},
      {"net.depth_max", "22.978250586152114", "farthest metric depth (world diagonal)"},
      {"net.delta_per", "0.8", "perspective-ray sample spacing in meters"},
      {"net.delta_bev", "0.2", "top-down-ray sample spacing in meters"},
      // --- world / voxel grid ---
      {"world.half_extent", "8", "world half-width in x and y, meters"},
      {"world.height", "4", "world height in z, meters"},
      {"grid.voxel", "0.25", "voxel edge length in meters"},
      // --- masking ---
      {"mask.enabled", "on", "master switch: off trains on unmasked inputs"},
      {"mask.image_ratio", "0.5", "fraction of image patches replaced by the mask token"},
      {"mask.patch", "4", "square image patch size in pixels"},
      {"mask.voxel_ratio", "0.9", "fraction of non-empty voxels zeroed"},
      // --- reconstruction objective ---
      {"loss.color", "on", "reconstruct masked color (L_C)"},
      {"loss.depth_per", "on", "reconstruct perspective depth (L_D PER)"},
      {"loss.depth_bev", "on", "reconstruct top-down depth (L_D BEV)"},
      {"loss.lambda_color", "10000", "weight on the color term"},
      {"loss.lambda_depth_per", "0.01", "weight on the perspective depth term"},
      {"loss.lambda_depth_bev", "0.01", "weight on the top-down depth term"},
      {"loss.p_color", "2", "Lp exponent for color"},
      {"loss.p_depth", "1", "Lp exponent for depth"},
      {"loss.on_masked_only", "off", "restrict camera-view losses to fully masked cells"},
      // --- optimization ---
      {"train.epochs", "50", "pre-training epochs"},
      {"train.batch", "4", "frames per optimizer step"},
      {"train.max_lr", "0.0001", "one-cycle peak learning rate"},
      {"train.weight_decay", "0.01", "decoupled weight decay"},
      {"train.beta1", "0.9", "Adam first-moment decay"},
      {"train.beta2", "0.999", "Adam second-moment decay"},
      {"train.eps", "1e-8", "Adam denominator epsilon"},
      {"train.clip_norm", "35", "global gradient-norm clip"},
      {"train.patience", "10", "epochs without validation improvement before stopping"},
      {"train.seed", "7", "seed for masks, shuffling, and parameter init"},
      // --- transfer probe ---
      {"probe.iterations", "60", "fine-tuning steps per probe arm"},
      // --- output ---
      {"out.dir", "out", "artifact directory (NSMAE_OUT env overrides)"},
  };
  return table;
}

std::string Config::documented() {
  std::ostringstream out;
  out << "# nsmae configuration — every key with its default.\n";
  out << "# Lines are `key = value`; `#` starts a comment; flags are on/off.\n";
  std::string section;
  for (const ConfigKey& k : keys()) {
    const std::string name = k.name;
    const std::string prefix = name.substr(0, name.find('.'));
    if (prefix != section) {
      out << "\n";
      section = prefix;
    }
    out << "# " << k.doc << "\n" << name << " = " << k.fallback << "\n";
  }
  return out.str();
}

Config::Config() {
  for (const ConfigKey& k : keys()) values_[k.name] = k.fallback;
}

void Config::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const size_t eq = stripped.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument(path + ":" + std::to_string(line_no) +
                                  ": expected key = value, got '" + stripped + "'");
    set(trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
  }
}

void Config::set(const std::string& assignment) {
  const size_t eq = assignment.find('=');
  if (eq == std::string::npos)
    throw std::invalid_argument("expected key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void Config::set(const std::string& key, const std::string& value) {
  const auto it = values_.find(key);
  if (it == values_.end()) throw std::invalid_argument("unknown config key: " + key);
  if (key.empty()) throw std::invalid_argument("empty config key");
  it->second = value;
}

const std::string& Config::raw(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw std::invalid_argument("unknown config key: " + key);
  return it->second;
}

double Config::number(const std::string& key) const {
  const std::string& v = raw(key);
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (end == v.c_str() || *end != '\0' || !std::isfinite(x))
    throw std::invalid_argument("config key " + key + " needs a finite number, got '" + v + "'");
  return x;
}

int64_t Config::integer(const std::string& key) const {
  const std::string& v = raw(key);
  char* end = nullptr;
  const long long x = std::strtoll(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0')
    throw std::invalid_argument("config key " + key + " needs a whole number, got '" + v + "'");
  return static_cast<int64_t>(x);
}

bool Config::flag(const std::string& key) const {
  const std::string& v = raw(key);
  if (v == "on") return true;
  if (v == "off") return false;
  throw std::invalid_argument("config key " + key + " needs on or off, got '" + v + "'");
}

const std::string& Config::text(const std::string& key) const { return raw(key); }

uint64_t Config::fingerprint() const {
  // values_ is a std::map, so iteration is already key-sorted.
  uint64_t h = 14695981039346656037ull;
  const auto mix = [&h](const std::string& s) {
    for (const char c : s) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ull;
    }
  };
  for (const auto& [key, value] : values_) {
    mix(key);
    mix("=");
    mix(value);
    mix("\n");
  }
  return h;
}

std::string Config::describe() const {
  std::ostringstream out;
  for (const auto& [key, value] : values_) out << key << " = " << value << "\n";
  return out.str();
}

}  // namespace nsmae
