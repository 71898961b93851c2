#pragma once

#include <filesystem>
#include <map>
#include <string>

namespace mcti {

// Flat `key=value` text; blank lines and lines starting with '#' are skipped.
using KeyValues = std::map<std::string, std::string>;

KeyValues parse_key_values(const std::string& text);
KeyValues read_key_values(const std::filesystem::path& path);

double parse_double(const std::string& key, const std::string& value);
long long parse_int(const std::string& key, const std::string& value);
bool parse_bool(const std::string& key, const std::string& value);
// Shortest text that parses back to exactly v.
std::string format_double(double v);

}  // namespace mcti
