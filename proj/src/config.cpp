#include "rsd/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

namespace rsd {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

bool parse_double(const std::string& s, double& out) {
  const char* begin = s.data();
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(begin, end, out);
  return ec == std::errc() && ptr == end;
}

bool parse_int(const std::string& s, std::int64_t& out) {
  const char* begin = s.data();
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(begin, end, out);
  return ec == std::errc() && ptr == end;
}

}  // namespace

void ConfigSection::set(const std::string& key, std::string value, int line) {
  if (!has(key)) order_.push_back(key);
  values_[key] = Entry{std::move(value), line};
}

void ConfigSection::fail(const std::string& key, const std::string& message) const {
  std::ostringstream os;
  const auto it = values_.find(key);
  const int line = it != values_.end() ? it->second.line : line_;
  os << "line " << line << ": [" << name_ << "] " << key << ": " << message;
  throw ConfigError(os.str());
}

const ConfigSection::Entry& ConfigSection::entry(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) fail(key, "required key is missing");
  return it->second;
}

std::string ConfigSection::get_string(const std::string& key) const { return entry(key).value; }

std::string ConfigSection::get_string(const std::string& key, const std::string& fallback) const {
  return has(key) ? get_string(key) : fallback;
}

double ConfigSection::get_double(const std::string& key) const {
  double v = 0.0;
  if (!parse_double(entry(key).value, v)) fail(key, "expected a real number, got '" + entry(key).value + "'");
  return v;
}

double ConfigSection::get_double(const std::string& key, double fallback) const {
  return has(key) ? get_double(key) : fallback;
}

std::int64_t ConfigSection::get_int(const std::string& key) const {
  std::int64_t v = 0;
  if (!parse_int(entry(key).value, v)) fail(key, "expected an integer, got '" + entry(key).value + "'");
  return v;
}

std::int64_t ConfigSection::get_int(const std::string& key, std::int64_t fallback) const {
  return has(key) ? get_int(key) : fallback;
}

bool ConfigSection::get_bool(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  const std::string& v = entry(key).value;
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  fail(key, "expected true/false, got '" + v + "'");
}

std::vector<double> ConfigSection::get_doubles(const std::string& key) const {
  std::vector<double> out;
  for (const auto& item : split_list(entry(key).value)) {
    double v = 0.0;
    if (!parse_double(item, v)) fail(key, "expected a comma-separated list of reals");
    out.push_back(v);
  }
  return out;
}

std::vector<std::int64_t> ConfigSection::get_ints(const std::string& key) const {
  std::vector<std::int64_t> out;
  for (const auto& item : split_list(entry(key).value)) {
    std::int64_t v = 0;
    if (!parse_int(item, v)) fail(key, "expected a comma-separated list of integers");
    out.push_back(v);
  }
  return out;
}

ConfigFile ConfigFile::parse(const std::string& text, const std::string& origin) {
  ConfigFile cfg;
  std::istringstream is(text);
  std::string raw;
  int line_no = 0;
  ConfigSection* current = nullptr;
  while (std::getline(is, raw)) {
    ++line_no;
    std::string line = raw;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) {
        throw ConfigError(origin + ": line " + std::to_string(line_no) + ": malformed section header");
      }
      const std::string name = trim(line.substr(1, line.size() - 2));
      if (cfg.has(name)) {
        throw ConfigError(origin + ": line " + std::to_string(line_no) + ": duplicate section [" + name + "]");
      }
      cfg.sections_.emplace_back(name, line_no);
      current = &cfg.sections_.back();
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ": line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    if (current == nullptr) {
      throw ConfigError(origin + ": line " + std::to_string(line_no) + ": key outside of any [section]");
    }
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(origin + ": line " + std::to_string(line_no) + ": empty key");
    if (current->has(key)) {
      throw ConfigError(origin + ": line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
    current->set(key, trim(line.substr(eq + 1)), line_no);
  }
  return cfg;
}

ConfigFile ConfigFile::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

bool ConfigFile::has(const std::string& section) const {
  return std::any_of(sections_.begin(), sections_.end(),
                     [&](const ConfigSection& s) { return s.name() == section; });
}

const ConfigSection& ConfigFile::section(const std::string& name) const {
  for (const auto& s : sections_) {
    if (s.name() == name) return s;
  }
  throw ConfigError("missing required section [" + name + "]");
}

ConfigSection& ConfigFile::section_or_add(const std::string& name) {
  for (auto& s : sections_) {
    if (s.name() == name) return s;
  }
  sections_.emplace_back(name, 0);
  return sections_.back();
}

std::string ConfigFile::to_string() const {
  std::ostringstream os;
  bool first = true;
  for (const auto& s : sections_) {
    if (!first) os << '\n';
    first = false;
    os << '[' << s.name() << "]\n";
    for (const auto& k : s.keys()) os << k << " = " << s.get_string(k) << '\n';
  }
  return os.str();
}

}  // namespace rsd
