// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0
//
// Flat key/value configuration with a closed key set.
//
// Every tunable of the pipeline lives in one static table of
// {key, default, doc}. A Config starts at the defaults; values can then be
// overridden from a file ("key = value" lines, '#' comments) or from
// individual "key=value" strings (CLI --set). Unknown keys are rejected by
// name — a typo fails loudly instead of silently training with a default.
//
// Values are stored as strings and parsed on access. The typed getters
// validate on every read, so a bad value surfaces at the first use with the
// key named. `fingerprint()` hashes the *effective* configuration (sorted
// key=value lines, FNV-1a), so two configs agree iff every setting agrees,
// regardless of the order overrides arrived in.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace nsmae {

struct ConfigKey {
  const char* name;
  const char* fallback;  // default value, as written in a config file
  const char* doc;
};

class Config {
 public:
  // All known keys with defaults and one-line documentation.
  static const std::vector<ConfigKey>& keys();

  // Default configuration rendered as a commented config file.
  static std::string documented();

  Config();  // defaults

  // Parse a config file: blank lines and '#' comments ignored, otherwise
  // "key = value". Throws on unreadable files, malformed lines, or unknown
  // keys (the offending key/line is named).
  void load_file(const std::string& path);

  // Apply one "key=value" override (whitespace around '=' tolerated).
  void set(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  // Typed access. Throws std::invalid_argument naming the key when the
  // stored text does not parse (or violates the stated constraint).
  double number(const std::string& key) const;
  int64_t integer(const std::string& key) const;  // whole numbers only
  bool flag(const std::string& key) const;        // "on"/"off"
  const std::string& text(const std::string& key) const;

  // FNV-1a over sorted "key=value\n" lines of the effective configuration.
  uint64_t fingerprint() const;

  // Effective configuration as sorted "key = value" lines (for logging).
  std::string describe() const;

 private:
  const std::string& raw(const std::string& key) const;
  std::map<std::string, std::string> values_;
};

}  // namespace nsmae
