// SPDX-License-Identifier: Apache-2.0

// Flat `key=value` text, one entry per line, `#` starts a comment line.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>

namespace evla {

class KeyValues {
 public:
  using Map = std::map<std::string, std::string>;

  static KeyValues parse(std::string_view text, std::string_view origin = "config");

  void set(const std::string& key, std::string value) { map_[key] = std::move(value); }
  void set(const std::string& key, double value);
  void set(const std::string& key, std::int64_t value);
  void set(const std::string& key, int value) { set(key, static_cast<std::int64_t>(value)); }
  void set(const std::string& key, std::uint64_t value);
  void set(const std::string& key, bool value) { map_[key] = value ? "true" : "false"; }

  bool contains(const std::string& key) const { return map_.contains(key); }
  // Each getter throws a config error when the key is missing or malformed.
  const std::string& get(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::int64_t get_int(const std::string& key) const;
  std::uint64_t get_uint(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  // Entries of `other` override entries here.
  void merge(const KeyValues& other);
  // Entries whose key starts with `prefix`.
  KeyValues with_prefix(std::string_view prefix) const;

  // Sorted `key=value\n` lines, each preceded by `line_prefix`.
  std::string format(std::string_view line_prefix = "") const;

  const Map& entries() const { return map_; }
  bool operator==(const KeyValues&) const = default;

 private:
  Map map_;
};

// Shortest decimal text that parses back to exactly `value`.
std::string format_double(double value);

}  // namespace evla
