#include "toon/config.hpp"

#include "toon/errors.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace toon {

namespace {

std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::pair<std::string, std::string> split_assignment(const std::string& line) {
    auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + line + "'");
    auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("empty key in '" + line + "'");
    return {key, trim(line.substr(eq + 1))};
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
    T v{};
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || ptr != text.data() + text.size())
        throw ConfigError("key '" + key + "': cannot parse '" + text + "' as a number");
    return v;
}

}  // namespace

KeyValueConfig KeyValueConfig::parse(const std::string& text) {
    KeyValueConfig cfg;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        auto [k, v] = split_assignment(line);
        cfg.values_[k] = v;
    }
    return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
}

void KeyValueConfig::set_override(const std::string& assignment) {
    auto [k, v] = split_assignment(assignment);
    values_[k] = v;
}

std::string KeyValueConfig::get_string(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing required key '" + key + "'");
    return it->second;
}

std::string KeyValueConfig::get_string(const std::string& key, const std::string& fallback) {
    auto [it, _] = values_.try_emplace(key, fallback);
    return it->second;
}

std::int64_t KeyValueConfig::get_int(const std::string& key) const {
    return parse_number<std::int64_t>(key, get_string(key));
}

std::int64_t KeyValueConfig::get_int(const std::string& key, std::int64_t fallback) {
    return parse_number<std::int64_t>(key, get_string(key, std::to_string(fallback)));
}

double KeyValueConfig::get_double(const std::string& key) const {
    return parse_number<double>(key, get_string(key));
}

double KeyValueConfig::get_double(const std::string& key, double fallback) {
    std::ostringstream os;
    os.precision(17);
    os << fallback;
    return parse_number<double>(key, get_string(key, os.str()));
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) {
    auto v = get_string(key, fallback ? "true" : "false");
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("key '" + key + "': expected boolean, got '" + v + "'");
}

std::vector<std::int64_t> KeyValueConfig::get_int_list(const std::string& key,
                                                       const std::vector<std::int64_t>& fallback) {
    std::string joined;
    for (std::size_t i = 0; i < fallback.size(); ++i) joined += (i ? "," : "") + std::to_string(fallback[i]);
    auto text = get_string(key, joined);
    std::vector<std::int64_t> out;
    std::istringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(parse_number<std::int64_t>(key, item));
    }
    return out;
}

std::string KeyValueConfig::resolved() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
}

}  // namespace toon
