#pragma once

// Key/value text files: one `key = value` per line, `#` starts a comment,
// blank lines ignored, keys are case-sensitive and may not repeat. Used for
// the hyperparameter config and the encoder backend manifest.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <type_traits>

#include "facetune/core.hpp"

namespace facetune {

using KeyValues = std::map<std::string, std::string, std::less<>>;

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline KeyValues parse_key_values(std::string_view text) {
  KeyValues out;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected `key = value`");
    }
    std::string key(trim(line.substr(0, eq)));
    std::string value(trim(line.substr(eq + 1)));
    if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    if (!out.emplace(std::move(key), std::move(value)).second) {
      throw ConfigError("line " + std::to_string(line_no) + ": duplicate key");
    }
  }
  return out;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline KeyValues load_key_values(const std::filesystem::path& path) {
  return parse_key_values(read_text_file(path));
}

/// Shortest decimal text that parses back to exactly `v`.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
  T value{};
  const auto* end = text.data() + text.size();
  const auto res = std::from_chars(text.data(), end, value);
  if (res.ec != std::errc{} || res.ptr != end) {
    throw ConfigError("invalid value for " + std::string(key) + ": `" + std::string(text) + "`");
  }
  return value;
}

namespace detail {

template <typename Visitor>
void visit_hyperparams(HyperParams& hp, Visitor&& v) {
  v("learning_rate_initial", hp.learning_rate_initial);
  v("weight_decay", hp.weight_decay);
  v("beta1", hp.beta1);
  v("beta2", hp.beta2);
  v("epsilon", hp.epsilon);
  v("batch_size", hp.batch_size);
  v("epochs", hp.epochs);
  v("lr_min", hp.lr_min);
  v("confidence_threshold", hp.confidence_threshold);
  v("logit_scale", hp.logit_scale);
}

}  // namespace detail

inline std::string hyperparams_to_config(HyperParams hp) {
  std::string out = "# facetune hyperparameters\n";
  detail::visit_hyperparams(hp, [&](const char* key, auto& field) {
    out += key;
    out += " = ";
    if constexpr (std::is_same_v<std::decay_t<decltype(field)>, double>) {
      out += format_double(field);
    } else {
      out += std::to_string(field);
    }
    out += '\n';
  });
  return out;
}

/// Applies the keys present in `kv` over `base`. Unknown keys are an error so
/// typos do not silently fall back to defaults.
inline HyperParams hyperparams_from_config(const KeyValues& kv, HyperParams base = {}) {
  std::size_t used = 0;
  detail::visit_hyperparams(base, [&](const char* key, auto& field) {
    const auto it = kv.find(std::string_view(key));
    if (it == kv.end()) return;
    field = parse_number<std::decay_t<decltype(field)>>(key, it->second);
    ++used;
  });
  if (used != kv.size()) {
    for (const auto& [key, value] : kv) {
      bool known = false;
      HyperParams probe;
      detail::visit_hyperparams(probe, [&](const char* k, auto&) { known = known || key == k; });
      if (!known) throw ConfigError("unknown config key `" + key + "`");
    }
  }
  base.validate();
  return base;
}

}  // namespace facetune
