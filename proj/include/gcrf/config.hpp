#pragma once

// TOML-style configuration: `[section]` headers and `key = value` lines with
// strings, booleans, numbers, and single-line arrays. Keys are addressed as
// "section.key"; keys before any header are top-level.
//
//   seed = 3
//   [estimate]
//   estimators = ["reinforce_ms", "gumbel_crf"]
//   taus = [1.0, 0.5]   # comment

#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace gcrf {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Config {
 public:
  static Config parse(std::string_view text, const std::string& source = "<config>");
  static Config load(const std::string& path);

  bool has(const std::string& key) const { return values_.contains(key); }
  void set(const std::string& key, nlohmann::json value) { values_[key] = std::move(value); }

  // Value at `key`, or `fallback` when absent. Throws ConfigError on a type
  // mismatch. A scalar is accepted where a list is expected.
  template <class T>
  T get(const std::string& key, T fallback) const {
    if (!has(key)) return fallback;
    nlohmann::json v = values_.at(key);
    if constexpr (is_vector<T>::value)
      if (!v.is_array()) v = nlohmann::json::array({v});
    try {
      check_type<T>(v);
      return v.get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config key '" + key + "' has the wrong type");
    } catch (const ConfigError&) {
      throw ConfigError("config key '" + key + "' has the wrong type");
    }
  }

  // Throws ConfigError naming the first key outside `known`.
  void require_known(const std::vector<std::string>& known) const;
  std::vector<std::string> keys() const;
  const nlohmann::json& values() const { return values_; }

 private:
  template <class T>
  struct is_vector : std::false_type {};
  template <class T>
  struct is_vector<std::vector<T>> : std::true_type {};

  template <class T>
  static void check_type(const nlohmann::json& v) {
    if constexpr (is_vector<T>::value) {
      for (const auto& e : v) check_type<typename T::value_type>(e);
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("type");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || (std::is_unsigned_v<T> && v.get<long long>() < 0)) throw ConfigError("type");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("type");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("type");
    }
  }

  nlohmann::json values_ = nlohmann::json::object();
};

}  // namespace gcrf
