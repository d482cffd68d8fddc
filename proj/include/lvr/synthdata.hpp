#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lvr/rng.hpp"
#include "lvr/tensor.hpp"

namespace lvr {

// Pixel classes for element segmentation.
inline constexpr std::uint8_t kClassBackground = 0;
inline constexpr std::uint8_t kClassVia = 1;
inline constexpr std::uint8_t kClassWire = 2;
inline constexpr std::uint8_t kClassPad = 3;
inline constexpr std::size_t kNumClasses = 4;

inline const char* class_name(std::size_t c) {
    switch (c) {
        case kClassBackground: return "background";
        case kClassVia: return "via";
        case kClassWire: return "wire";
        case kClassPad: return "pad";
        default: return "unknown";
    }
}

/// Procedural scene description: grayscale CT-like board cutout with vias
/// (bright ring, dark center), pads (solid bright discs) and wires
/// (straight or L-shaped traces between element centers). Noise is applied
/// to the image only, never to the labels.
struct SceneSpec {
    std::size_t size = 64;

    std::size_t via_count = 3;
    double via_radius_min = 2.5, via_radius_max = 4.5;
    std::size_t pad_count = 2;
    double pad_radius_min = 4.0, pad_radius_max = 6.5;
    std::size_t wire_count = 3;
    double wire_width_min = 1.0, wire_width_max = 2.5;

    double gradient_amp = 0.08;  // slow grayscale ramp across the image
    double streak_amp = 0.05;    // straight bright/dark artifact bands
    std::size_t blur_radius = 1;
    double noise_sigma = 0.03;   // per-pixel grain

    std::uint64_t seed = 0;

    void validate() const {
        if (size < 16) throw ConfigError("SceneSpec: size must be >= 16");
        if (via_radius_min <= 0 || pad_radius_min <= 0 || wire_width_min <= 0)
            throw ConfigError("SceneSpec: radii and widths must be positive");
        if (via_radius_max < via_radius_min || pad_radius_max < pad_radius_min || wire_width_max < wire_width_min)
            throw ConfigError("SceneSpec: empty range");
        double max_r = std::max(via_radius_max, pad_radius_max);
        if (2.0 * max_r + 2.0 >= static_cast<double>(size))
            throw ConfigError("SceneSpec: elements do not fit in the image");
        if (wire_count > 0 && via_count + pad_count < 2)
            throw ConfigError("SceneSpec: wires need at least two elements to connect");
    }

    /// Hash over everything except the seed; identifies the generator
    /// configuration in manifests.
    std::uint64_t config_hash() const {
        std::uint64_t h = fnv1a(&size, sizeof size);
        auto mix = [&h](const auto& v) { h = fnv1a(&v, sizeof v, h); };
        mix(via_count); mix(via_radius_min); mix(via_radius_max);
        mix(pad_count); mix(pad_radius_min); mix(pad_radius_max);
        mix(wire_count); mix(wire_width_min); mix(wire_width_max);
        mix(gradient_amp); mix(streak_amp); mix(blur_radius); mix(noise_sigma);
        return h;
    }
};

/// Scene defaults scaled to an image size; radii and counts shrink for
/// small grids so placement stays feasible.
inline SceneSpec default_scene(std::size_t image_size) {
    SceneSpec s;
    s.size = image_size;
    double f = static_cast<double>(image_size) / 64.0;
    if (f < 1.0) {
        s.via_radius_min = std::max(1.0, s.via_radius_min * f);
        s.via_radius_max = std::max(1.5, s.via_radius_max * f);
        s.pad_radius_min = std::max(1.5, s.pad_radius_min * f);
        s.pad_radius_max = std::max(2.0, s.pad_radius_max * f);
        s.wire_width_min = 1.0;
        s.wire_width_max = std::max(1.0, s.wire_width_max * f);
        s.via_count = std::max<std::size_t>(1, static_cast<std::size_t>(s.via_count * f));
        s.pad_count = std::max<std::size_t>(1, static_cast<std::size_t>(s.pad_count * f));
        s.wire_count = std::max<std::size_t>(1, static_cast<std::size_t>(s.wire_count * f));
    }
    return s;
}

/// Image plus per-pixel class labels.
template <typename S>
struct SegSample {
    Tensor<S> image;  // [1, H, W], values in [0, 1]
    std::vector<std::uint8_t> labels;  // H*W row-major
    std::size_t height = 0, width = 0;
};

namespace detail {

struct Disc {
    double x, y, r;
};

// Shared geometry: the label raster is written by the same loop that
// shades the image, so labeled pixels are exactly the drawn pixels.
template <typename S>
void draw_disc(std::vector<S>& img, std::vector<std::uint8_t>& labels, std::size_t size, const Disc& d,
               std::uint8_t cls, bool via_style) {
    auto x0 = static_cast<std::size_t>(std::max(0.0, d.x - d.r - 1));
    auto y0 = static_cast<std::size_t>(std::max(0.0, d.y - d.r - 1));
    auto x1 = std::min(size - 1, static_cast<std::size_t>(d.x + d.r + 1));
    auto y1 = std::min(size - 1, static_cast<std::size_t>(d.y + d.r + 1));
    for (std::size_t y = y0; y <= y1; ++y)
        for (std::size_t x = x0; x <= x1; ++x) {
            double dx = static_cast<double>(x) - d.x, dy = static_cast<double>(y) - d.y;
            double dist2 = dx * dx + dy * dy;
            if (dist2 > d.r * d.r) continue;
            labels[y * size + x] = cls;
            double v;
            if (via_style)
                v = dist2 <= (0.55 * d.r) * (0.55 * d.r) ? 0.12 : 0.95;  // dark bore, bright ring
            else
                v = 0.82;
            img[y * size + x] = static_cast<S>(v);
        }
}

template <typename S>
void draw_hseg(std::vector<S>& img, std::vector<std::uint8_t>& labels, std::size_t size, double xa, double xb,
               double y, double halfw) {
    if (xa > xb) std::swap(xa, xb);
    auto x0 = static_cast<std::size_t>(std::max(0.0, xa));
    auto x1 = std::min(size - 1, static_cast<std::size_t>(std::max(0.0, xb)));
    auto y0 = static_cast<std::size_t>(std::max(0.0, y - halfw));
    auto y1 = std::min(size - 1, static_cast<std::size_t>(std::max(0.0, y + halfw)));
    for (std::size_t yy = y0; yy <= y1; ++yy)
        for (std::size_t xx = x0; xx <= x1; ++xx) {
            labels[yy * size + xx] = kClassWire;
            img[yy * size + xx] = static_cast<S>(0.6);
        }
}

template <typename S>
void draw_vseg(std::vector<S>& img, std::vector<std::uint8_t>& labels, std::size_t size, double ya, double yb,
               double x, double halfw) {
    if (ya > yb) std::swap(ya, yb);
    auto y0 = static_cast<std::size_t>(std::max(0.0, ya));
    auto y1 = std::min(size - 1, static_cast<std::size_t>(std::max(0.0, yb)));
    auto x0 = static_cast<std::size_t>(std::max(0.0, x - halfw));
    auto x1 = std::min(size - 1, static_cast<std::size_t>(std::max(0.0, x + halfw)));
    for (std::size_t yy = y0; yy <= y1; ++yy)
        for (std::size_t xx = x0; xx <= x1; ++xx) {
            labels[yy * size + xx] = kClassWire;
            img[yy * size + xx] = static_cast<S>(0.6);
        }
}

}  // namespace detail

/// Deterministic sample generation: same spec (including seed) gives the
/// identical image and labels, bit for bit.
template <typename S>
SegSample<S> generate(const SceneSpec& spec) {
    spec.validate();
    const std::size_t size = spec.size;
    Rng rng(splitmix64(spec.seed ^ 0x5eedDa7aull));

    std::vector<S> img(size * size, static_cast<S>(0.3));
    std::vector<std::uint8_t> labels(size * size, kClassBackground);

    auto place = [&](double rmin, double rmax, std::vector<detail::Disc>& all) -> detail::Disc {
        for (int attempt = 0; attempt < 200; ++attempt) {
            double r = rng.next_range(rmin, rmax);
            double x = rng.next_range(r + 1.0, static_cast<double>(size) - r - 1.0);
            double y = rng.next_range(r + 1.0, static_cast<double>(size) - r - 1.0);
            bool clear = true;
            for (const auto& d : all) {
                double dx = d.x - x, dy = d.y - y;
                if (std::sqrt(dx * dx + dy * dy) < d.r + r + 2.0) {
                    clear = false;
                    break;
                }
            }
            if (clear) {
                all.push_back({x, y, r});
                return all.back();
            }
        }
        throw DataError("generate: infeasible element placement after bounded retries (seed " +
                        std::to_string(spec.seed) + ")");
    };

    std::vector<detail::Disc> discs;
    std::vector<detail::Disc> pads, vias;
    for (std::size_t i = 0; i < spec.pad_count; ++i) pads.push_back(place(spec.pad_radius_min, spec.pad_radius_max, discs));
    for (std::size_t i = 0; i < spec.via_count; ++i) vias.push_back(place(spec.via_radius_min, spec.via_radius_max, discs));

    // Draw order fixes the overlap label priority: wire < pad < via.
    for (std::size_t i = 0; i < spec.wire_count && discs.size() >= 2; ++i) {
        std::size_t a = static_cast<std::size_t>(rng.next_below(discs.size()));
        std::size_t b = static_cast<std::size_t>(rng.next_below(discs.size() - 1));
        if (b >= a) ++b;
        double halfw = 0.5 * rng.next_range(spec.wire_width_min, spec.wire_width_max);
        // L-shaped: horizontal from a, then vertical into b (straight when aligned)
        detail::draw_hseg(img, labels, size, discs[a].x, discs[b].x, discs[a].y, halfw);
        detail::draw_vseg(img, labels, size, discs[a].y, discs[b].y, discs[b].x, halfw);
    }
    for (const auto& p : pads) detail::draw_disc(img, labels, size, p, kClassPad, false);
    for (const auto& v : vias) detail::draw_disc(img, labels, size, v, kClassVia, true);

    // Noise goes on the image only; labels above are final.
    if (spec.gradient_amp > 0) {
        double theta = rng.next_range(0.0, 2.0 * std::numbers::pi);
        double cx = 0.5 * size, cy = 0.5 * size;
        for (std::size_t y = 0; y < size; ++y)
            for (std::size_t x = 0; x < size; ++x) {
                double t = ((x - cx) * std::cos(theta) + (y - cy) * std::sin(theta)) / static_cast<double>(size);
                img[y * size + x] += static_cast<S>(spec.gradient_amp * t);
            }
    }
    if (spec.streak_amp > 0) {
        for (int k = 0; k < 3; ++k) {
            double theta = rng.next_range(0.0, std::numbers::pi);
            double px = rng.next_range(0.0, static_cast<double>(size));
            double py = rng.next_range(0.0, static_cast<double>(size));
            double amp = spec.streak_amp * (k % 2 == 0 ? 1.0 : -1.0);
            double nx = -std::sin(theta), ny = std::cos(theta);
            for (std::size_t y = 0; y < size; ++y)
                for (std::size_t x = 0; x < size; ++x) {
                    double dist = std::abs((x - px) * nx + (y - py) * ny);
                    if (dist < 1.5) img[y * size + x] += static_cast<S>(amp * (1.5 - dist) / 1.5);
                }
        }
    }
    if (spec.blur_radius > 0) {
        std::vector<S> tmp(img.size());
        int r = static_cast<int>(spec.blur_radius);
        int n = static_cast<int>(size);
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                double acc = 0;
                int cnt = 0;
                for (int dx = -r; dx <= r; ++dx) {
                    int xx = x + dx;
                    if (xx < 0 || xx >= n) continue;
                    acc += img[y * size + xx];
                    ++cnt;
                }
                tmp[y * size + x] = static_cast<S>(acc / cnt);
            }
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                double acc = 0;
                int cnt = 0;
                for (int dy = -r; dy <= r; ++dy) {
                    int yy = y + dy;
                    if (yy < 0 || yy >= n) continue;
                    acc += tmp[yy * size + x];
                    ++cnt;
                }
                img[y * size + x] = static_cast<S>(acc / cnt);
            }
    }
    if (spec.noise_sigma > 0)
        for (auto& v : img) v += static_cast<S>(spec.noise_sigma * rng.next_normal());
    for (auto& v : img) v = std::clamp(v, S(0), S(1));

    SegSample<S> sample;
    sample.image = Tensor<S>::from_data({1, size, size}, std::move(img));
    sample.labels = std::move(labels);
    sample.height = sample.width = size;
    return sample;
}

// ---------------------------------------------------------------------------
// Splits and manifests

struct ManifestEntry {
    std::string split;
    std::size_t index = 0;
    std::uint64_t seed = 0;
    std::uint64_t spec_hash = 0;
};

/// Sample list with disjoint per-split seed ranges; regenerating from a
/// manifest reproduces every sample bit-identically.
struct DatasetManifest {
    SceneSpec base;  // seed field unused; per-entry seeds below
    std::vector<ManifestEntry> entries;

    std::vector<ManifestEntry> split(const std::string& name) const {
        std::vector<ManifestEntry> out;
        for (const auto& e : entries)
            if (e.split == name) out.push_back(e);
        return out;
    }

    template <typename S>
    SegSample<S> materialize(const ManifestEntry& e) const {
        SceneSpec spec = base;
        spec.seed = e.seed;
        return generate<S>(spec);
    }
};

/// Seeds are consecutive from base_seed: train takes the first n_train,
/// validation the next n_val, test the next n_test. Overlap between splits
/// is impossible by construction.
inline DatasetManifest make_split(const SceneSpec& base, std::size_t n_train, std::size_t n_val, std::size_t n_test,
                                  std::uint64_t base_seed) {
    DatasetManifest m;
    m.base = base;
    std::uint64_t next = base_seed;
    std::uint64_t spec_hash = base.config_hash();
    auto emit = [&](const char* split, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) m.entries.push_back({split, i, next++, spec_hash});
    };
    emit("train", n_train);
    emit("val", n_val);
    emit("test", n_test);
    return m;
}

inline void write_manifest(const DatasetManifest& m, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open " + path + " for writing");
    nlohmann::json header = {
        {"type", "dataset_header"},
        {"image_size", m.base.size},
        {"spec_hash", m.base.config_hash()},
        {"via_count", m.base.via_count},
        {"pad_count", m.base.pad_count},
        {"wire_count", m.base.wire_count},
    };
    out << header.dump() << "\n";
    for (const auto& e : m.entries) {
        nlohmann::json row = {{"split", e.split}, {"index", e.index}, {"seed", e.seed}, {"spec_hash", e.spec_hash}};
        out << row.dump() << "\n";
    }
}

inline DatasetManifest read_manifest(const std::string& path, const SceneSpec& base) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest " + path);
    DatasetManifest m;
    m.base = base;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto row = nlohmann::json::parse(line);
        if (row.value("type", "") == "dataset_header") {
            m.base.size = row.at("image_size").get<std::size_t>();
            continue;
        }
        m.entries.push_back({row.at("split").get<std::string>(), row.at("index").get<std::size_t>(),
                             row.at("seed").get<std::uint64_t>(), row.at("spec_hash").get<std::uint64_t>()});
    }
    return m;
}

// ---------------------------------------------------------------------------
// Flat binary sample files: magic, version, dims, image float32, label bytes.

inline constexpr char kSampleMagic[8] = {'L', 'V', 'R', 'S', 'M', 'P', 'L', '\0'};

template <typename S>
void save_sample(const SegSample<S>& sample, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open " + path + " for writing");
    out.write(kSampleMagic, 8);
    std::uint32_t version = 1, c = 1, h = static_cast<std::uint32_t>(sample.height),
                  w = static_cast<std::uint32_t>(sample.width);
    out.write(reinterpret_cast<const char*>(&version), 4);
    out.write(reinterpret_cast<const char*>(&c), 4);
    out.write(reinterpret_cast<const char*>(&h), 4);
    out.write(reinterpret_cast<const char*>(&w), 4);
    for (S v : sample.image.values()) {
        float f = static_cast<float>(v);
        out.write(reinterpret_cast<const char*>(&f), 4);
    }
    out.write(reinterpret_cast<const char*>(sample.labels.data()), static_cast<std::streamsize>(sample.labels.size()));
}

template <typename S>
SegSample<S> load_sample(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open sample " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || !std::equal(magic, magic + 8, kSampleMagic)) throw DataError("bad sample magic in " + path);
    std::uint32_t version = 0, c = 0, h = 0, w = 0;
    in.read(reinterpret_cast<char*>(&version), 4);
    in.read(reinterpret_cast<char*>(&c), 4);
    in.read(reinterpret_cast<char*>(&h), 4);
    in.read(reinterpret_cast<char*>(&w), 4);
    if (!in || version != 1 || c != 1) throw DataError("unsupported sample format in " + path);
    std::vector<S> img(static_cast<std::size_t>(h) * w);
    for (auto& v : img) {
        float f;
        in.read(reinterpret_cast<char*>(&f), 4);
        v = static_cast<S>(f);
    }
    SegSample<S> s;
    s.labels.resize(static_cast<std::size_t>(h) * w);
    in.read(reinterpret_cast<char*>(s.labels.data()), static_cast<std::streamsize>(s.labels.size()));
    if (!in) throw DataError("truncated sample file " + path);
    s.image = Tensor<S>::from_data({1, h, w}, std::move(img));
    s.height = h;
    s.width = w;
    return s;
}

}  // namespace lvr
