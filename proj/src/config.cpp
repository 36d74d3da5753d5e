#include "prtg/config.hpp"

#include <fstream>
#include <sstream>

#include "prtg/common.hpp"

namespace prtg {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename F>
auto convert(const std::string& key, const std::string& value, F f) {
  try {
    std::size_t used = 0;
    auto out = f(value, &used);
    if (used != value.size()) throw std::invalid_argument("trailing characters");
    return out;
  } catch (const std::exception&) {
    throw InvalidInput("config: bad value '" + value + "' for key '" + key + "'");
  }
}

}  // namespace

KeyValueConfig KeyValueConfig::parse(const std::string& text) {
  KeyValueConfig cfg;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw InvalidInput("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw InvalidInput("config line " + std::to_string(line_no) + ": empty key or value");
    if (!cfg.values_.emplace(key, value).second)
      throw InvalidInput("config: duplicate key '" + key + "'");
  }
  return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InvalidInput("cannot open config " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

std::string KeyValueConfig::get_string(const std::string& key, const std::string& fallback) const {
  const auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

int KeyValueConfig::get_int(const std::string& key, int fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  return convert(key, it->second, [](const std::string& s, std::size_t* p) { return std::stoi(s, p); });
}

std::int64_t KeyValueConfig::get_int64(const std::string& key, std::int64_t fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  return convert(key, it->second,
                 [](const std::string& s, std::size_t* p) { return static_cast<std::int64_t>(std::stoll(s, p)); });
}

std::uint64_t KeyValueConfig::get_uint64(const std::string& key, std::uint64_t fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  if (!it->second.empty() && it->second[0] == '-')
    throw InvalidInput("config: key '" + key + "' must be non-negative");
  return convert(key, it->second, [](const std::string& s, std::size_t* p) {
    return static_cast<std::uint64_t>(std::stoull(s, p));
  });
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  return convert(key, it->second, [](const std::string& s, std::size_t* p) { return std::stod(s, p); });
}

void KeyValueConfig::require_known(const std::set<std::string>& allowed) const {
  for (const auto& [key, value] : values_)
    if (allowed.count(key) == 0) throw InvalidInput("config: unknown key '" + key + "'");
}

}  // namespace prtg
