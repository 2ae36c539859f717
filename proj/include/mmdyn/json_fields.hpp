#pragma once

#include <set>
#include <string>

#include <json.hpp>

#include "mmdyn/errors.hpp"

namespace mmdyn {

/// Reads fields from one JSON object and rejects keys nobody asked for.
///
///   JsonFields f(j, "model");
///   f.read("latent_dim", cfg.latent_dim);
///   f.finish();  // throws ConfigError on unknown keys
class JsonFields {
 public:
  JsonFields(const nlohmann::json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j_.is_object()) throw ConfigError(section_ + ": expected a JSON object");
  }

  template <typename V>
  bool read(const std::string& key, V& out) {
    known_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return false;
    try {
      out = it->template get<V>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(section_ + "." + key + ": " + e.what());
    }
    return true;
  }

  /// Marks a key as handled by the caller (e.g. a nested section).
  const nlohmann::json* child(const std::string& key) {
    known_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!known_.count(it.key())) throw ConfigError(section_ + ": unknown key \"" + it.key() + "\"");
    }
  }

 private:
  const nlohmann::json& j_;
  std::string section_;
  std::set<std::string> known_;
};

}  // namespace mmdyn
