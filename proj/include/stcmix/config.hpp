// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace stcmix {

/// Flat dotted-key configuration with a closed registry: setting a key that
/// is not in the registry is a hard error, so misspellings never fall back to
/// silent defaults. Values are stored as strings and parsed on access.
class Config {
public:
  static Config defaults();

  /// Accepts "key = value" lines with '#' comments, or a JSON file (either a
  /// flat object or a run manifest with a "config" object).
  void load_file(const std::string& path);
  void set(const std::string& key, const std::string& value);
  void set_kv(const std::string& key_equals_value); // "key=value"

  bool has(const std::string& key) const;
  const std::string& str(const std::string& key) const;
  int64_t i64(const std::string& key) const;
  uint64_t u64(const std::string& key) const;
  size_t index(const std::string& key) const;
  double f64(const std::string& key) const;
  bool flag(const std::string& key) const;

  const std::map<std::string, std::string>& items() const { return values_; }

private:
  std::map<std::string, std::string> values_;
};

} // namespace stcmix
