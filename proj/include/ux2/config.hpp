// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ux2/data.hpp"
#include "ux2/model.hpp"
#include "ux2/optim.hpp"
#include "ux2/schedule.hpp"
#include "ux2/tasks.hpp"

namespace ux2 {

/// One documented run-config key with its default.
struct KeySpec {
  const char* key;
  const char* default_value;
  const char* doc;
};

const std::vector<KeySpec>& config_keys();

/// Run configuration: `key = value` lines ('#' comments), every key
/// documented with a default, unknown keys rejected. Command-line
/// overrides use the same key names.
class RunConfig {
public:
  static RunConfig defaults();
  static RunConfig from_file(const std::string& path);

  void set(const std::string& key, const std::string& value);
  /// "key=value" strings, e.g. from --set flags.
  void apply_override(const std::string& assignment);

  const std::string& get(const std::string& key) const;
  int64_t get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  /// Sorted "key = value" text of the full (defaulted) configuration.
  std::string canonical() const;
  /// FNV-1a hash of the canonical text as 16 hex digits.
  std::string hash() const;

  ModelConfig model() const;
  Schedule schedule() const;
  Vocab vocab() const;
  AdamWConfig adamw() const;
  std::vector<TaskKind> active_tasks() const;

private:
  std::map<std::string, std::string> values_;
};

}  // namespace ux2
