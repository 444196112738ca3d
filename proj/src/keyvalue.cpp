#include "pht/keyvalue.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "pht/errors.hpp"

namespace pht {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return {};
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

}  // namespace

void KeyValueDoc::set(const std::string& key, const std::string& value) {
  if (key.empty() || key.find('=') != std::string::npos || value.find('\n') != std::string::npos) {
    throw ContractError("invalid key/value entry: " + key);
  }
  for (auto& [k, v] : items_) {
    if (k == key) {
      v = value;
      return;
    }
  }
  items_.emplace_back(key, value);
}

void KeyValueDoc::set(const std::string& key, double value) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", value);
  set(key, std::string(buf));
}

void KeyValueDoc::set(const std::string& key, std::int64_t value) { set(key, std::to_string(value)); }

void KeyValueDoc::set(const std::string& key, std::uint64_t value) { set(key, std::to_string(value)); }

void KeyValueDoc::set(const std::string& key, bool value) { set(key, std::string(value ? "true" : "false")); }

bool KeyValueDoc::contains(const std::string& key) const { return find(key).has_value(); }

std::optional<std::string> KeyValueDoc::find(const std::string& key) const {
  for (const auto& [k, v] : items_) {
    if (k == key) return v;
  }
  return std::nullopt;
}

std::string KeyValueDoc::get(const std::string& key) const {
  auto v = find(key);
  if (!v) throw ConfigError("missing config key: " + key);
  return *v;
}

double KeyValueDoc::get_double(const std::string& key) const {
  const std::string v = get(key);
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + " is not a number: " + v);
  }
}

std::int64_t KeyValueDoc::get_int(const std::string& key) const {
  const std::string v = get(key);
  std::int64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("config key " + key + " is not an integer: " + v);
  }
  return out;
}

std::uint64_t KeyValueDoc::get_uint(const std::string& key) const {
  const std::string v = get(key);
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("config key " + key + " is not an unsigned integer: " + v);
  }
  return out;
}

bool KeyValueDoc::get_bool(const std::string& key) const {
  const std::string v = get(key);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key " + key + " is not a boolean: " + v);
}

std::string KeyValueDoc::to_string() const {
  std::ostringstream os;
  for (const auto& [k, v] : items_) os << k << " = " << v << '\n';
  return os.str();
}

KeyValueDoc KeyValueDoc::parse(const std::string& text) {
  KeyValueDoc doc;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    }
    doc.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return doc;
}

void KeyValueDoc::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write config: " + path.string());
  os << to_string();
}

KeyValueDoc KeyValueDoc::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config: " + path.string());
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse(buf.str());
}

}  // namespace pht
