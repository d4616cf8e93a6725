#include "pivm/config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <sstream>

#include "pivm/error.hpp"
#include "pivm/storage.hpp"

extern char** environ;

namespace pivm::config {

namespace {

struct Default {
    const char* key;
    Type type;
    const char* value;
};

constexpr Default kDefaults[] = {
    {"phantom.image_size", Type::integer, "64"},
    {"phantom.n_organs", Type::integer, "8"},
    {"phantom.organ_mean_lo", Type::real, "-150"},
    {"phantom.organ_mean_hi", Type::real, "250"},
    {"phantom.organ_texture_sd", Type::real, "20"},
    {"phantom.background_hu", Type::real, "-80"},
    {"phantom.air_hu", Type::real, "-1000"},
    {"phantom.slice_drift", Type::real, "0.03"},
    {"phantom.volumes", Type::integer, "20"},
    {"phantom.slices_per_volume", Type::integer, "16"},
    {"phantom.train_fraction", Type::real, "0.75"},
    {"priors.clip_lo", Type::real, "-200"},
    {"priors.clip_hi", Type::real, "300"},
    {"priors.variation_scale", Type::real, "150"},
    {"priors.image_scale", Type::real, "400"},
    {"priors.label_organs", Type::integer, "8"},
    {"diffusion.mode", Type::text, "pivm"},
    {"diffusion.T", Type::integer, "200"},
    {"diffusion.beta_start", Type::real, "0.0005"},
    {"diffusion.beta_end", Type::real, "0.1"},
    {"diffusion.clip_x0", Type::boolean, "true"},
    {"denoiser.epochs", Type::integer, "30"},
    {"denoiser.batch_size", Type::integer, "16"},
    {"denoiser.lr", Type::real, "0.0001"},
    {"denoiser.beta1", Type::real, "0.9"},
    {"denoiser.beta2", Type::real, "0.99"},
    {"denoiser.halving_epochs", Type::integer, "20"},
    {"denoiser.volume_mode", Type::boolean, "false"},
    {"sample.count", Type::integer, "8"},
    {"volume.count", Type::integer, "2"},
    {"volume.noise_scale", Type::boolean, "false"},
    {"volume.plane_index", Type::integer, "-1"},
    {"seg.epochs", Type::integer, "10"},
    {"seg.batch_size", Type::integer, "8"},
    {"seg.lr", Type::real, "0.001"},
    {"seg.halving_epochs", Type::integer, "20"},
    {"seg.budget", Type::integer, "500"},
    {"eval.volumes", Type::integer, "5"},
    {"ablate.coarse_labels", Type::integer, "4"},
    {"io.data", Type::text, "data"},
    {"io.priors", Type::text, "priors"},
    {"io.checkpoint", Type::text, "checkpoint"},
    {"io.pivm_checkpoint", Type::text, "checkpoint-pivm"},
    {"io.cddpm_checkpoint", Type::text, "checkpoint-cddpm"},
    {"run.seed", Type::integer, "0"},
    {"run.threads", Type::integer, "1"},
};

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

void check_value(const std::string& key, Type type, const std::string& v) {
    auto bad = [&](const char* what) {
        fail(ErrorKind::config, "config key '" + key + "': expected " + what + ", got '" + v + "'");
    };
    switch (type) {
        case Type::integer: {
            try {
                std::size_t pos = 0;
                std::stoll(v, &pos);
                if (pos != v.size()) bad("an integer");
            } catch (const std::exception&) {
                bad("an integer");
            }
            break;
        }
        case Type::real: {
            try {
                std::size_t pos = 0;
                std::stod(v, &pos);
                if (pos != v.size()) bad("a number");
            } catch (const std::exception&) {
                bad("a number");
            }
            break;
        }
        case Type::boolean:
            if (v != "true" && v != "false" && v != "1" && v != "0") bad("true or false");
            break;
        case Type::text:
            break;
    }
}

}  // namespace

RunConfig::RunConfig() {
    for (const auto& d : kDefaults) entries_[d.key] = Entry{d.type, d.value};
}

const RunConfig::Entry& RunConfig::entry(const std::string& key) const {
    const auto it = entries_.find(key);
    require(it != entries_.end(), ErrorKind::config, "unknown config key '" + key + "'");
    return it->second;
}

void RunConfig::set(const std::string& key, const std::string& value) {
    const auto it = entries_.find(key);
    require(it != entries_.end(), ErrorKind::config, "unknown config key '" + key + "'");
    const std::string v = trim(value);
    check_value(key, it->second.type, v);
    it->second.value = v;
}

void RunConfig::load_text(const std::string& text, const std::string& origin) {
    std::istringstream is(text);
    std::string line;
    int n = 0;
    while (std::getline(is, line)) {
        ++n;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        require(eq != std::string::npos, ErrorKind::config,
                origin + ":" + std::to_string(n) + ": expected 'key = value'");
        set(trim(t.substr(0, eq)), t.substr(eq + 1));
    }
}

void RunConfig::load_file(const std::filesystem::path& path) {
    try {
        load_text(storage::read_text(path), path.string());
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::io) fail(ErrorKind::config, std::string("cannot read config: ") + e.what());
        throw;
    }
}

std::string RunConfig::env_name(const std::string& key) {
    std::string s = "PIVM_";
    for (char c : key) {
        if (c == '.')
            s += "__";
        else
            s += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    }
    return s;
}

void RunConfig::apply_env(char** env) {
    if (!env) env = environ;
    std::map<std::string, std::string> names;
    for (const auto& [key, _] : entries_) names[env_name(key)] = key;
    for (char** p = env; p && *p; ++p) {
        const std::string kv = *p;
        if (kv.rfind("PIVM_", 0) != 0) continue;
        const auto eq = kv.find('=');
        const std::string name = kv.substr(0, eq);
        const auto it = names.find(name);
        require(it != names.end(), ErrorKind::config, "unknown environment override " + name);
        set(it->second, eq == std::string::npos ? "" : kv.substr(eq + 1));
    }
}

long long RunConfig::get_int(const std::string& key) const {
    const auto& e = entry(key);
    require(e.type == Type::integer, ErrorKind::internal, "config key '" + key + "' is not an integer");
    return std::stoll(e.value);
}

double RunConfig::get_double(const std::string& key) const {
    const auto& e = entry(key);
    require(e.type == Type::real || e.type == Type::integer, ErrorKind::internal,
            "config key '" + key + "' is not numeric");
    return std::stod(e.value);
}

bool RunConfig::get_bool(const std::string& key) const {
    const auto& e = entry(key);
    require(e.type == Type::boolean, ErrorKind::internal, "config key '" + key + "' is not a boolean");
    return e.value == "true" || e.value == "1";
}

const std::string& RunConfig::get_string(const std::string& key) const { return entry(key).value; }

std::string RunConfig::snapshot() const {
    std::string s;
    for (const auto& [k, e] : entries_) s += k + " = " + e.value + "\n";
    return s;
}

std::string RunConfig::hash() const { return storage::hex64(storage::fnv1a64(snapshot())); }

}  // namespace pivm::config
