#pragma once

// Flat text configuration:
//
//   # comment
//   [section]
//   key = value
//
// Sections may repeat only if they carry distinct names. Values are kept as
// strings with their source line so validation errors can point at them.

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace rsd {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigSection {
 public:
  explicit ConfigSection(std::string name = {}, int line = 0) : name_(std::move(name)), line_(line) {}

  const std::string& name() const { return name_; }
  int line() const { return line_; }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, std::string value, int line = 0);

  std::string get_string(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<double> get_doubles(const std::string& key) const;
  std::vector<std::int64_t> get_ints(const std::string& key) const;

  // Keys in insertion order.
  const std::vector<std::string>& keys() const { return order_; }
  // "line N: [section] key: message"
  [[noreturn]] void fail(const std::string& key, const std::string& message) const;

 private:
  struct Entry {
    std::string value;
    int line = 0;
  };
  const Entry& entry(const std::string& key) const;

  std::string name_;
  int line_ = 0;
  std::map<std::string, Entry> values_;
  std::vector<std::string> order_;
};

class ConfigFile {
 public:
  static ConfigFile parse(const std::string& text, const std::string& origin = "<string>");
  static ConfigFile load(const std::string& path);

  bool has(const std::string& section) const;
  const ConfigSection& section(const std::string& name) const;
  ConfigSection& section_or_add(const std::string& name);
  const std::vector<ConfigSection>& sections() const { return sections_; }

  std::string to_string() const;

 private:
  std::vector<ConfigSection> sections_;
};

}  // namespace rsd
