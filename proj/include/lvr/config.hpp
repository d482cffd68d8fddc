#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lvr/common.hpp"

namespace lvr {

/// Everything a run needs, parsed from flat `key = value` text. The echoed
/// form round-trips bit-exactly, so a run directory's config echo plus the
/// master seed reproduces the run.
struct RunConfig {
    // model geometry
    std::size_t image_size = 64;
    std::size_t channels = 1;
    std::size_t patch_size = 8;
    std::size_t encoder_depth = 4;
    std::size_t encoder_dim = 64;
    std::size_t encoder_heads = 4;
    std::size_t decoder_depth = 2;
    std::size_t decoder_dim = 64;
    std::size_t decoder_heads = 4;
    std::size_t mlp_ratio = 4;

    // pretraining
    double mask_ratio = 0.6;
    std::map<std::size_t, std::size_t> window_counts = {{3, 4}, {5, 2}, {7, 1}};
    double recon_beta = 1.0;  // smooth-L1 beta; 0 selects plain L1
    std::size_t total_epochs = 30;
    std::size_t breakpoint_epoch = 8;
    std::size_t warmup_epochs = 4;
    double lr = 1e-3;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.95;
    std::size_t batch_size = 32;

    // finetuning
    std::size_t finetune_epochs = 10;
    std::size_t finetune_warmup_epochs = 1;
    double finetune_lr = 1e-3;
    std::size_t finetune_train_count = 256;  // labeled subset actually used
    std::size_t fpn_dim = 64;
    std::size_t num_classes = 4;
    std::vector<std::size_t> tap_blocks;  // empty: depth * {1/4,1/2,3/4,1}, rounded up

    // data
    std::size_t n_train = 2000;
    std::size_t n_val = 200;
    std::size_t n_test = 200;
    std::string data_manifest;  // optional; empty synthesizes the split

    // bench
    std::vector<std::size_t> bench_grids = {14, 28};
    std::size_t bench_trials = 20;

    // reproducibility / execution
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    bool debug_checks = false;

    std::size_t grid_h() const { return image_size / patch_size; }
    std::size_t grid_w() const { return image_size / patch_size; }

    std::vector<std::size_t> effective_taps() const {
        if (!tap_blocks.empty()) return tap_blocks;
        std::vector<std::size_t> taps;
        for (std::size_t k = 1; k <= 4; ++k) {
            std::size_t t = (encoder_depth * k + 3) / 4;  // ceil(depth*k/4)
            if (taps.empty() || taps.back() != t) taps.push_back(t);
        }
        return taps;
    }

    void validate() const;
    std::string echo() const;

    static RunConfig parse_text(const std::string& text);
    static RunConfig from_file(const std::string& path);
    void apply_env_overrides(const char* prefix = "LVR_");
    void set_key(const std::string& key, const std::string& value);
};

namespace detail {

struct ConfigField {
    const char* name;
    std::function<void(RunConfig&, const std::string&)> parse;
    std::function<std::string(const RunConfig&)> format;
};

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::size_t parse_size(const std::string& s) {
    std::size_t pos = 0;
    unsigned long long v = std::stoull(s, &pos);
    if (pos != s.size()) throw ConfigError("not an integer: '" + s + "'");
    return static_cast<std::size_t>(v);
}

inline double parse_double(const std::string& s) {
    std::size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw ConfigError("not a number: '" + s + "'");
    return v;
}

inline bool parse_bool(const std::string& s) {
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError("not a boolean: '" + s + "'");
}

inline std::vector<std::size_t> parse_size_list(const std::string& s) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(parse_size(item));
    return out;
}

inline std::string fmt_size_list(const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

// "5:4,7:2,9:1" -> {5:4, 7:2, 9:1}
inline std::map<std::size_t, std::size_t> parse_window_counts(const std::string& s) {
    std::map<std::size_t, std::size_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        auto colon = item.find(':');
        if (colon == std::string::npos) throw ConfigError("window_counts entry needs size:count, got '" + item + "'");
        out[parse_size(item.substr(0, colon))] = parse_size(item.substr(colon + 1));
    }
    return out;
}

inline std::string fmt_window_counts(const std::map<std::size_t, std::size_t>& m) {
    std::string s;
    for (const auto& [size, count] : m) {
        if (!s.empty()) s += ",";
        s += std::to_string(size) + ":" + std::to_string(count);
    }
    return s;
}

#define LVR_SIZE_FIELD(field)                                                                      \
    ConfigField{#field, [](RunConfig& c, const std::string& v) { c.field = parse_size(v); },       \
                [](const RunConfig& c) { return std::to_string(c.field); }}
#define LVR_DOUBLE_FIELD(field)                                                                    \
    ConfigField{#field, [](RunConfig& c, const std::string& v) { c.field = parse_double(v); },     \
                [](const RunConfig& c) { return fmt_double(c.field); }}

inline const std::vector<ConfigField>& config_fields() {
    static const std::vector<ConfigField> fields = {
        LVR_SIZE_FIELD(image_size),
        LVR_SIZE_FIELD(channels),
        LVR_SIZE_FIELD(patch_size),
        LVR_SIZE_FIELD(encoder_depth),
        LVR_SIZE_FIELD(encoder_dim),
        LVR_SIZE_FIELD(encoder_heads),
        LVR_SIZE_FIELD(decoder_depth),
        LVR_SIZE_FIELD(decoder_dim),
        LVR_SIZE_FIELD(decoder_heads),
        LVR_SIZE_FIELD(mlp_ratio),
        LVR_DOUBLE_FIELD(mask_ratio),
        ConfigField{"window_counts",
                    [](RunConfig& c, const std::string& v) { c.window_counts = parse_window_counts(v); },
                    [](const RunConfig& c) { return fmt_window_counts(c.window_counts); }},
        LVR_DOUBLE_FIELD(recon_beta),
        LVR_SIZE_FIELD(total_epochs),
        LVR_SIZE_FIELD(breakpoint_epoch),
        LVR_SIZE_FIELD(warmup_epochs),
        LVR_DOUBLE_FIELD(lr),
        LVR_DOUBLE_FIELD(weight_decay),
        LVR_DOUBLE_FIELD(beta1),
        LVR_DOUBLE_FIELD(beta2),
        LVR_SIZE_FIELD(batch_size),
        LVR_SIZE_FIELD(finetune_epochs),
        LVR_SIZE_FIELD(finetune_warmup_epochs),
        LVR_DOUBLE_FIELD(finetune_lr),
        LVR_SIZE_FIELD(finetune_train_count),
        LVR_SIZE_FIELD(fpn_dim),
        LVR_SIZE_FIELD(num_classes),
        ConfigField{"tap_blocks", [](RunConfig& c, const std::string& v) { c.tap_blocks = parse_size_list(v); },
                    [](const RunConfig& c) { return fmt_size_list(c.tap_blocks); }},
        LVR_SIZE_FIELD(n_train),
        LVR_SIZE_FIELD(n_val),
        LVR_SIZE_FIELD(n_test),
        ConfigField{"data_manifest", [](RunConfig& c, const std::string& v) { c.data_manifest = v; },
                    [](const RunConfig& c) { return c.data_manifest; }},
        ConfigField{"bench_grids", [](RunConfig& c, const std::string& v) { c.bench_grids = parse_size_list(v); },
                    [](const RunConfig& c) { return fmt_size_list(c.bench_grids); }},
        LVR_SIZE_FIELD(bench_trials),
        ConfigField{"seed",
                    [](RunConfig& c, const std::string& v) { c.seed = std::stoull(v); },
                    [](const RunConfig& c) { return std::to_string(c.seed); }},
        LVR_SIZE_FIELD(threads),
        ConfigField{"debug_checks", [](RunConfig& c, const std::string& v) { c.debug_checks = parse_bool(v); },
                    [](const RunConfig& c) { return c.debug_checks ? std::string("true") : std::string("false"); }},
    };
    return fields;
}

#undef LVR_SIZE_FIELD
#undef LVR_DOUBLE_FIELD

}  // namespace detail

inline void RunConfig::set_key(const std::string& key, const std::string& value) {
    for (const auto& f : detail::config_fields()) {
        if (key == f.name) {
            try {
                f.parse(*this, value);
            } catch (const ConfigError& e) {
                throw ConfigError("config field '" + key + "': " + e.what());
            } catch (const std::exception& e) {
                throw ConfigError("config field '" + key + "': cannot parse '" + value + "'");
            }
            return;
        }
    }
    throw ConfigError("unknown config key '" + key + "'");
}

inline RunConfig RunConfig::parse_text(const std::string& text) {
    RunConfig cfg;
    std::stringstream ss(text);
    std::string line;
    std::size_t lineno = 0;
    auto trim = [](std::string s) {
        auto b = s.find_first_not_of(" \t\r");
        auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    while (std::getline(ss, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
        cfg.set_key(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

inline RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_text(buf.str());
}

inline void RunConfig::apply_env_overrides(const char* prefix) {
    for (const auto& f : detail::config_fields()) {
        std::string var = prefix;
        for (const char* p = f.name; *p; ++p) var += static_cast<char>(std::toupper(*p));
        if (const char* v = std::getenv(var.c_str())) set_key(f.name, v);
    }
}

inline std::string RunConfig::echo() const {
    std::string out;
    for (const auto& f : detail::config_fields()) out += std::string(f.name) + " = " + f.format(*this) + "\n";
    return out;
}

inline void RunConfig::validate() const {
    if (patch_size == 0 || image_size % patch_size != 0)
        throw ConfigError("image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                          std::to_string(patch_size));
    if (encoder_dim % encoder_heads != 0)
        throw ConfigError("encoder_dim not divisible by encoder_heads");
    if (decoder_dim % decoder_heads != 0)
        throw ConfigError("decoder_dim not divisible by decoder_heads");
    if (encoder_dim % 4 != 0) throw ConfigError("encoder_dim must be divisible by 4 for the positional table");
    if (mask_ratio < 0.0 || mask_ratio >= 1.0)
        throw ConfigError("mask_ratio must be in [0,1), got " + detail::fmt_double(mask_ratio));
    for (const auto& [size, count] : window_counts)
        if (size == 0 || size > grid_h() || size > grid_w())
            throw ConfigError("window size " + std::to_string(size) + " exceeds grid " + std::to_string(grid_h()) +
                              "x" + std::to_string(grid_w()));
    if (window_counts.empty()) throw ConfigError("window_counts must name at least one window");
    if (breakpoint_epoch == 0 || breakpoint_epoch >= total_epochs)
        throw ConfigError("breakpoint_epoch must lie strictly inside (0, total_epochs), got " +
                          std::to_string(breakpoint_epoch) + " of " + std::to_string(total_epochs));
    for (std::size_t t : effective_taps())
        if (t == 0 || t > encoder_depth)
            throw ConfigError("tap block " + std::to_string(t) + " out of range for encoder depth " +
                              std::to_string(encoder_depth));
    if (recon_beta < 0) throw ConfigError("recon_beta must be >= 0");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (threads == 0) throw ConfigError("threads must be >= 1");
}

}  // namespace lvr
