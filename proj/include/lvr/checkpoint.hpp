#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "lvr/optim.hpp"

namespace lvr {

// Versioned binary container: config echo, named parameter blobs
// (little-endian float32), optional optimizer state, epoch/step counters,
// and the RNG master seed. Round-trips are bit-exact for float parameters.

inline constexpr char kCheckpointMagic[8] = {'L', 'V', 'R', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct LoadedCheckpoint {
    std::string config_echo;
    std::uint64_t epoch = 0;
    std::uint64_t step = 0;
    std::uint64_t master_seed = 0;
    std::vector<std::string> param_order;
    std::map<std::string, std::pair<Shape, std::vector<float>>> params;
    bool has_optimizer = false;
    std::uint64_t optimizer_t = 0;
    std::vector<std::vector<float>> opt_m, opt_v;  // aligned with param_order
};

namespace detail {

inline void wr_u32(std::ofstream& o, std::uint32_t v) { o.write(reinterpret_cast<const char*>(&v), 4); }
inline void wr_u64(std::ofstream& o, std::uint64_t v) { o.write(reinterpret_cast<const char*>(&v), 8); }
inline void wr_str(std::ofstream& o, const std::string& s) {
    wr_u64(o, s.size());
    o.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::uint32_t rd_u32(std::ifstream& i) {
    std::uint32_t v = 0;
    i.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
inline std::uint64_t rd_u64(std::ifstream& i) {
    std::uint64_t v = 0;
    i.read(reinterpret_cast<char*>(&v), 8);
    return v;
}
inline std::string rd_str(std::ifstream& i) {
    std::uint64_t n = rd_u64(i);
    std::string s(n, '\0');
    i.read(s.data(), static_cast<std::streamsize>(n));
    return s;
}

template <typename S>
void wr_floats(std::ofstream& o, const std::vector<S>& v) {
    for (S x : v) {
        float f = static_cast<float>(x);
        o.write(reinterpret_cast<const char*>(&f), 4);
    }
}

inline std::vector<float> rd_floats(std::ifstream& i, std::size_t n) {
    std::vector<float> v(n);
    i.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * 4));
    return v;
}

}  // namespace detail

template <typename S>
void save_checkpoint(const std::string& path, const std::string& config_echo, const ParamStore<S>& params,
                     const AdamWState<S>* opt, std::uint64_t epoch, std::uint64_t step, std::uint64_t master_seed) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open " + path + " for writing");
    out.write(kCheckpointMagic, 8);
    detail::wr_u32(out, kCheckpointVersion);
    detail::wr_str(out, config_echo);
    detail::wr_u64(out, epoch);
    detail::wr_u64(out, step);
    detail::wr_u64(out, master_seed);
    detail::wr_u64(out, params.size());
    for (const auto& [name, p] : params) {
        detail::wr_str(out, name);
        detail::wr_u32(out, static_cast<std::uint32_t>(p.shape().size()));
        for (std::size_t d : p.shape()) detail::wr_u64(out, d);
        detail::wr_floats(out, p.values());
    }
    out.put(opt ? 1 : 0);
    if (opt) {
        detail::wr_u64(out, opt->t);
        for (std::size_t i = 0; i < opt->m.size(); ++i) {
            detail::wr_floats(out, opt->m[i]);
            detail::wr_floats(out, opt->v[i]);
        }
    }
    if (!out) throw DataError("write failed for checkpoint " + path);
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || !std::equal(magic, magic + 8, kCheckpointMagic)) throw DataError("bad checkpoint magic in " + path);
    if (detail::rd_u32(in) != kCheckpointVersion) throw DataError("unsupported checkpoint version in " + path);
    LoadedCheckpoint ckpt;
    ckpt.config_echo = detail::rd_str(in);
    ckpt.epoch = detail::rd_u64(in);
    ckpt.step = detail::rd_u64(in);
    ckpt.master_seed = detail::rd_u64(in);
    std::uint64_t n = detail::rd_u64(in);
    for (std::uint64_t i = 0; i < n; ++i) {
        std::string name = detail::rd_str(in);
        std::uint32_t ndim = detail::rd_u32(in);
        Shape shape(ndim);
        for (auto& d : shape) d = detail::rd_u64(in);
        auto data = detail::rd_floats(in, shape_numel(shape));
        ckpt.param_order.push_back(name);
        ckpt.params[name] = {std::move(shape), std::move(data)};
    }
    ckpt.has_optimizer = in.get() == 1;
    if (ckpt.has_optimizer) {
        ckpt.optimizer_t = detail::rd_u64(in);
        for (const auto& name : ckpt.param_order) {
            std::size_t count = shape_numel(ckpt.params[name].first);
            ckpt.opt_m.push_back(detail::rd_floats(in, count));
            ckpt.opt_v.push_back(detail::rd_floats(in, count));
        }
    }
    if (!in) throw DataError("truncated checkpoint " + path);
    return ckpt;
}

/// Copies checkpoint entries into matching store parameters. Only names
/// starting with `prefix` are considered on both sides. Any store parameter
/// under the prefix that is missing from the checkpoint, or whose shape
/// differs, is an error; all offenders are listed.
template <typename S>
void restore_params(const LoadedCheckpoint& ckpt, ParamStore<S>& store, const std::string& prefix = "") {
    std::string problems;
    std::size_t restored = 0;
    for (auto& [name, p] : store) {
        if (name.rfind(prefix, 0) != 0) continue;
        auto it = ckpt.params.find(name);
        if (it == ckpt.params.end()) {
            problems += "  missing from checkpoint: " + name + "\n";
            continue;
        }
        if (it->second.first != p.shape()) {
            problems += "  shape mismatch for " + name + ": checkpoint " + shape_str(it->second.first) + " vs model " +
                        shape_str(p.shape()) + "\n";
            continue;
        }
        const auto& src = it->second.second;
        auto& dst = p.values();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<S>(src[i]);
        ++restored;
    }
    if (!problems.empty()) throw DataError("checkpoint/config mismatch:\n" + problems);
    if (restored == 0) throw DataError("no parameters under prefix '" + prefix + "' in checkpoint");
}

}  // namespace lvr
