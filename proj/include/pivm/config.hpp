#pragma once

// Flat run configuration.
//
// File syntax: one `key = value` per line, '#' starts a comment line, blank
// lines are ignored. Keys are namespaced (phantom.*, priors.*, diffusion.*,
// denoiser.*, sample.*, volume.*, seg.*, eval.*, ablate.*, io.*, run.*).
// Every key has a typed default; unknown keys and unparsable values are
// ErrorKind::config.
//
// Environment override: PIVM_<KEY> with the key upper-cased and '.' replaced
// by "__", e.g. PIVM_DIFFUSION__T=100. Unknown PIVM_ variables are errors.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace pivm::config {

enum class Type { integer, real, boolean, text };

class RunConfig {
public:
    /// All keys at their defaults.
    RunConfig();

    bool has(const std::string& key) const { return entries_.count(key) != 0; }
    void set(const std::string& key, const std::string& value);

    void load_text(const std::string& text, const std::string& origin = "config");
    void load_file(const std::filesystem::path& path);
    /// `environ`-style null-terminated array; nullptr reads the process environment.
    void apply_env(char** env = nullptr);

    long long get_int(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    const std::string& get_string(const std::string& key) const;

    /// Sorted `key = value` lines of every key.
    std::string snapshot() const;
    /// FNV-1a of the snapshot, as 16 hex digits.
    std::string hash() const;

    static std::string env_name(const std::string& key);

private:
    struct Entry {
        Type type;
        std::string value;
    };
    const Entry& entry(const std::string& key) const;

    std::map<std::string, Entry> entries_;
};

}  // namespace pivm::config
