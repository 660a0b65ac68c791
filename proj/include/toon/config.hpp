#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace toon {

/// Flat `key = value` configuration. Lines starting with '#' are comments.
/// Lookups with a default record the default, so `resolved()` is a complete
/// snapshot of what a run actually used.
class KeyValueConfig {
public:
    KeyValueConfig() = default;

    static KeyValueConfig parse(const std::string& text);
    static KeyValueConfig load(const std::filesystem::path& path);

    /// Applies a "key=value" override; throws ConfigError when malformed.
    void set_override(const std::string& assignment);
    void set(const std::string& key, const std::string& value) { values_[key] = value; }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_string(const std::string& key) const;
    std::string get_string(const std::string& key, const std::string& fallback);
    std::int64_t get_int(const std::string& key) const;
    std::int64_t get_int(const std::string& key, std::int64_t fallback);
    double get_double(const std::string& key) const;
    double get_double(const std::string& key, double fallback);
    bool get_bool(const std::string& key, bool fallback);
    /// Comma-separated integers, e.g. "1,2,4".
    std::vector<std::int64_t> get_int_list(const std::string& key, const std::vector<std::int64_t>& fallback);

    /// Sorted `key = value` lines.
    std::string resolved() const;
    const std::map<std::string, std::string>& values() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

}  // namespace toon
