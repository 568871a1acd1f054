#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace flowcast::util {

/// FNV-1a 64-bit hash, used for file and artifact digests.
std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a_file(const std::filesystem::path& path);
std::string hex64(std::uint64_t v);

/// Shortest round-trip decimal rendering of a double (locale-free).
std::string format_double(double v);

/// Flat key=value configuration file: one `key = value` pair per line,
/// '#' starts a comment, blank lines ignored. Keys may be dotted
/// (e.g. "subway.amplitude"). Duplicate keys are an error.
class KeyValueFile {
public:
    static KeyValueFile parse_file(const std::filesystem::path& path);
    static KeyValueFile parse_string(std::string_view text);

    bool has(const std::string& key) const;
    std::optional<std::string> get(const std::string& key) const;
    std::string get_or(const std::string& key, std::string def) const;
    double get_double(const std::string& key, double def) const;
    long long get_int(const std::string& key, long long def) const;
    bool get_bool(const std::string& key, bool def) const;

    /// Keys present in the file but never queried; used to reject typos.
    std::vector<std::string> unconsumed() const;

    const std::map<std::string, std::string>& entries() const { return entries_; }

private:
    std::map<std::string, std::string> entries_;
    mutable std::map<std::string, bool> consumed_;
};

/// Write `text` to `path` atomically (temp file + rename).
void write_file_atomic(const std::filesystem::path& path, const std::string& text);

std::string read_file(const std::filesystem::path& path);

std::vector<std::string> split(std::string_view s, char sep);
std::string trim(std::string_view s);

} // namespace flowcast::util
