#pragma once

// Flat `key = value` text documents used for config sidecars. Lines starting
// with '#' are comments; keys keep their file order.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace pht {

class KeyValueDoc {
 public:
  void set(const std::string& key, const std::string& value);
  void set(const std::string& key, double value);
  void set(const std::string& key, std::int64_t value);
  void set(const std::string& key, std::uint64_t value);
  void set(const std::string& key, bool value);

  bool contains(const std::string& key) const;
  std::optional<std::string> find(const std::string& key) const;
  // ConfigError when the key is absent or does not parse.
  std::string get(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::int64_t get_int(const std::string& key) const;
  std::uint64_t get_uint(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  const std::vector<std::pair<std::string, std::string>>& items() const { return items_; }

  std::string to_string() const;
  static KeyValueDoc parse(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static KeyValueDoc load(const std::filesystem::path& path);

 private:
  std::vector<std::pair<std::string, std::string>> items_;
};

}  // namespace pht
