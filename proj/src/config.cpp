#include "gcrf/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

namespace gcrf {

namespace {

class LineParser {
 public:
  LineParser(std::string_view s, const std::string& where) : s_(s), where_(where) {}

  nlohmann::json value() {
    skip_space();
    if (eof()) fail("missing value");
    const char c = s_[pos_];
    if (c == '"' || c == '\'') return string_value();
    if (c == '[') return array_value();
    if (starts_with("true")) {
      pos_ += 4;
      return true;
    }
    if (starts_with("false")) {
      pos_ += 5;
      return false;
    }
    return number_value();
  }

  void finish() {
    skip_space();
    if (!eof() && s_[pos_] != '#') fail("unexpected text after value");
  }

 private:
  bool eof() const { return pos_ >= s_.size(); }
  bool starts_with(std::string_view w) const { return s_.substr(pos_, w.size()) == w; }
  void skip_space() {
    while (!eof() && (s_[pos_] == ' ' || s_[pos_] == '\t')) ++pos_;
  }
  [[noreturn]] void fail(const std::string& what) const { throw ConfigError(where_ + ": " + what); }

  nlohmann::json string_value() {
    const char quote = s_[pos_++];
    std::string out;
    while (!eof() && s_[pos_] != quote) {
      char c = s_[pos_++];
      if (c == '\\' && quote == '"' && !eof()) {
        const char e = s_[pos_++];
        c = e == 'n' ? '\n' : e == 't' ? '\t' : e;
      }
      out.push_back(c);
    }
    if (eof()) fail("unterminated string");
    ++pos_;
    return out;
  }

  nlohmann::json array_value() {
    ++pos_;
    nlohmann::json out = nlohmann::json::array();
    skip_space();
    if (!eof() && s_[pos_] == ']') {
      ++pos_;
      return out;
    }
    while (true) {
      out.push_back(value());
      skip_space();
      if (eof()) fail("unterminated array");
      if (s_[pos_] == ',') {
        ++pos_;
        skip_space();
        if (!eof() && s_[pos_] == ']') {
          ++pos_;
          return out;
        }
        continue;
      }
      if (s_[pos_] == ']') {
        ++pos_;
        return out;
      }
      fail("expected ',' or ']' in array");
    }
  }

  nlohmann::json number_value() {
    const std::size_t start = pos_;
    while (!eof() && (std::isalnum(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '.' ||
                      s_[pos_] == '-' || s_[pos_] == '+' || s_[pos_] == '_'))
      ++pos_;
    std::string token(s_.substr(start, pos_ - start));
    token.erase(std::remove(token.begin(), token.end(), '_'), token.end());
    if (token.empty()) fail("missing value");
    const bool is_float = token.find_first_of(".eE") != std::string::npos || token == "inf" || token == "nan";
    if (!is_float) {
      long long v = 0;
      const auto [p, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
      if (ec == std::errc() && p == token.data() + token.size()) return v;
    } else {
      double v = 0.0;
      const auto [p, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
      if (ec == std::errc() && p == token.data() + token.size()) return v;
    }
    fail("cannot parse value '" + token + "'");
  }

  std::string_view s_;
  std::string where_;
  std::size_t pos_ = 0;
};

bool valid_key(std::string_view k) {
  if (k.empty()) return false;
  return std::all_of(k.begin(), k.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
  });
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

}  // namespace

Config Config::parse(std::string_view text, const std::string& source) {
  Config cfg;
  std::string section;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string raw;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string where = source + ":" + std::to_string(line_no);
    const auto line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    if (line.front() == '[') {
      const auto close = line.find(']');
      if (close == std::string_view::npos) throw ConfigError(where + ": unterminated section header");
      const auto rest = trim(line.substr(close + 1));
      if (!rest.empty() && rest.front() != '#') throw ConfigError(where + ": unexpected text after section header");
      section = std::string(trim(line.substr(1, close - 1)));
      if (!valid_key(section)) throw ConfigError(where + ": invalid section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where + ": expected 'key = value'");
    const auto key = trim(line.substr(0, eq));
    if (!valid_key(key)) throw ConfigError(where + ": invalid key '" + std::string(key) + "'");
    const std::string full = section.empty() ? std::string(key) : section + "." + std::string(key);
    if (cfg.has(full)) throw ConfigError(where + ": duplicate key '" + full + "'");
    LineParser p(line.substr(eq + 1), where);
    auto v = p.value();
    p.finish();
    cfg.values_[full] = std::move(v);
  }
  return cfg;
}

Config Config::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

void Config::require_known(const std::vector<std::string>& known) const {
  for (const auto& [k, v] : values_.items())
    if (std::find(known.begin(), known.end(), k) == known.end())
      throw ConfigError("unknown config key '" + k + "'");
}

std::vector<std::string> Config::keys() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : values_.items()) out.push_back(k);
  return out;
}

}  // namespace gcrf
