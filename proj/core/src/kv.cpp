// SPDX-License-Identifier: Apache-2.0

#include "evla/kv.hpp"

#include <charconv>
#include <cstdlib>
#include <system_error>

#include "evla/error.hpp"

namespace evla {
namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const char* type) {
  fail(ErrorKind::kConfig,
       "config key '" + key + "': '" + value + "' is not a valid " + type);
}

}  // namespace

std::string format_double(double value) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, end);
}

KeyValues KeyValues::parse(std::string_view text, std::string_view origin) {
  KeyValues kv;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos || trim(line.substr(0, eq)).empty()) {
      fail(ErrorKind::kConfig, std::string(origin) + ":" +
                                   std::to_string(line_no) +
                                   ": expected key=value");
    }
    kv.map_[std::string(trim(line.substr(0, eq)))] =
        std::string(trim(line.substr(eq + 1)));
  }
  return kv;
}

void KeyValues::set(const std::string& key, double value) {
  map_[key] = format_double(value);
}

void KeyValues::set(const std::string& key, std::int64_t value) {
  map_[key] = std::to_string(value);
}

void KeyValues::set(const std::string& key, std::uint64_t value) {
  map_[key] = std::to_string(value);
}

const std::string& KeyValues::get(const std::string& key) const {
  const auto it = map_.find(key);
  if (it == map_.end()) fail(ErrorKind::kConfig, "missing config key '" + key + "'");
  return it->second;
}

double KeyValues::get_double(const std::string& key) const {
  const std::string& s = get(key);
  double v = 0.0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) bad_value(key, s, "number");
  return v;
}

std::int64_t KeyValues::get_int(const std::string& key) const {
  const std::string& s = get(key);
  std::int64_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) bad_value(key, s, "integer");
  return v;
}

std::uint64_t KeyValues::get_uint(const std::string& key) const {
  const std::string& s = get(key);
  std::uint64_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    bad_value(key, s, "unsigned integer");
  }
  return v;
}

bool KeyValues::get_bool(const std::string& key) const {
  const std::string& s = get(key);
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  bad_value(key, s, "boolean");
}

void KeyValues::merge(const KeyValues& other) {
  for (const auto& [k, v] : other.map_) map_[k] = v;
}

KeyValues KeyValues::with_prefix(std::string_view prefix) const {
  KeyValues out;
  for (const auto& [k, v] : map_) {
    if (std::string_view(k).starts_with(prefix)) out.map_[k] = v;
  }
  return out;
}

std::string KeyValues::format(std::string_view line_prefix) const {
  std::string out;
  for (const auto& [k, v] : map_) {
    out.append(line_prefix);
    out.append(k);
    out.push_back('=');
    out.append(v);
    out.push_back('\n');
  }
  return out;
}

}  // namespace evla
