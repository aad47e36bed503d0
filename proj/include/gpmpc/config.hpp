#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace gpmpc {

/// Flat `key = value` configuration text: one pair per line, '#' comments.
/// Canonical serialization (sorted keys) backs the config hash embedded in
/// benchmark reports.
class KeyValueConfig {
public:
  KeyValueConfig() = default;
  static KeyValueConfig from_file(const std::string& path);
  static KeyValueConfig from_string(const std::string& text);

  bool has(const std::string& key) const { return entries_.count(key) > 0; }
  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  int get_int(const std::string& key, int fallback) const;
  std::uint64_t get_uint64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  void set(const std::string& key, const std::string& value) { entries_[key] = value; }
  std::string canonical() const;
  const std::map<std::string, std::string>& entries() const { return entries_; }

private:
  std::map<std::string, std::string> entries_;
};

}  // namespace gpmpc
