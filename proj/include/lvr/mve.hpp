#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lvr/rng.hpp"
#include "lvr/tensor.hpp"
#include "lvr/vit.hpp"

namespace lvr {

/// One square local visual field on the patch grid.
struct WindowSpec {
    std::size_t size = 0;              // side length in patches
    GridCoord top_left;                // (row, col)
    std::vector<std::size_t> token_indices;  // covered grid cells, row-major within the window

    bool operator==(const WindowSpec&) const = default;
};

/// The sampled multi-scale windows for one image. Serializes as
/// (size, row, col) triples in checkpoints and logs.
struct WindowPlan {
    std::vector<WindowSpec> specs;
    std::uint64_t seed = 0;
    std::map<std::size_t, std::size_t> counts_by_size;

    std::size_t total_slots() const {
        std::size_t n = 0;
        for (const auto& w : specs) n += w.size * w.size;
        return n;
    }
};

/// Per-window gathered tokens plus masked-position flags; each window is an
/// independent reconstruction unit.
template <typename S>
struct LocalFieldBatch {
    std::vector<Tensor<S>> windows;                      // each [l_i^2, D]
    std::vector<std::vector<std::uint8_t>> masked_flags; // per window, size l_i^2
    WindowPlan plan;

    std::size_t masked_occurrences() const {
        std::size_t n = 0;
        for (const auto& f : masked_flags)
            for (std::uint8_t v : f) n += v;
        return n;
    }
};

inline WindowSpec make_window(std::size_t size, std::size_t row, std::size_t col, std::size_t gh, std::size_t gw) {
    if (row + size > gh || col + size > gw)
        throw std::invalid_argument("window " + std::to_string(size) + "x" + std::to_string(size) + " at (" +
                                    std::to_string(row) + "," + std::to_string(col) + ") exceeds grid " +
                                    std::to_string(gh) + "x" + std::to_string(gw));
    WindowSpec w;
    w.size = size;
    w.top_left = {row, col};
    w.token_indices.reserve(size * size);
    for (std::size_t r = 0; r < size; ++r)
        for (std::size_t c = 0; c < size; ++c) w.token_indices.push_back((row + r) * gw + (col + c));
    return w;
}

/// Independently places `count` windows of each size uniformly over the
/// valid top-left positions; overlaps are allowed (and arithmetically
/// unavoidable at the default plan). Sizes are processed ascending, so the
/// plan order is deterministic in the seed.
inline WindowPlan sample_window_plan(std::size_t gh, std::size_t gw,
                                     const std::map<std::size_t, std::size_t>& counts_by_size, std::uint64_t seed) {
    WindowPlan plan;
    plan.seed = seed;
    plan.counts_by_size = counts_by_size;
    Rng rng(seed);
    for (const auto& [size, count] : counts_by_size) {
        if (size == 0) throw ConfigError("window size must be positive");
        if (size > gh || size > gw)
            throw ConfigError("window size " + std::to_string(size) + " exceeds grid " + std::to_string(gh) + "x" +
                              std::to_string(gw));
        for (std::size_t i = 0; i < count; ++i) {
            std::size_t row = static_cast<std::size_t>(rng.next_below(gh - size + 1));
            std::size_t col = static_cast<std::size_t>(rng.next_below(gw - size + 1));
            plan.specs.push_back(make_window(size, row, col, gh, gw));
        }
    }
    return plan;
}

/// Rebuilds the full [T, D] grid from encoded visible tokens plus the shared
/// mask token: visible slots carry encoder outputs, masked slots carry
/// mask_token + positional embedding of that slot.
template <typename S>
Tensor<S> assemble_full_grid(const Tensor<S>& encoded_visible, const MaskPlan& plan, const Tensor<S>& mask_token,
                             const Tensor<S>& pos_table) {
    std::size_t total = pos_table.dim(0);
    std::size_t visible = total - plan.masked_count();
    if (encoded_visible.dim(0) != visible)
        throw std::invalid_argument("assemble_full_grid: " + std::to_string(encoded_visible.dim(0)) +
                                    " visible tokens, expected " + std::to_string(visible) + " of " +
                                    std::to_string(total));
    if (encoded_visible.dim(1) != pos_table.dim(1) || mask_token.numel() != pos_table.dim(1))
        shape_error("assemble_full_grid", encoded_visible.shape(), pos_table.shape());

    auto vis_idx = plan.visible_indices(total);
    Tensor<S> out = scatter_rows(encoded_visible, vis_idx, total);
    if (!plan.masked_indices.empty()) {
        Tensor<S> masked_pos = gather_rows(pos_table, plan.masked_indices);
        Tensor<S> masked_rows = add(masked_pos, mask_token);  // broadcast [M,D] + [D]
        out = add(out, scatter_rows(masked_rows, plan.masked_indices, total));
    }
    return out;
}

/// Pure gather of each window's tokens and masked flags from the assembled
/// grid; no cross-window mixing.
template <typename S>
LocalFieldBatch<S> extract(const Tensor<S>& full_grid, const WindowPlan& plan, const MaskPlan& mask_plan) {
    std::size_t total = full_grid.dim(0);
    auto flags = mask_plan.mask_flags(total);
    LocalFieldBatch<S> batch;
    batch.plan = plan;
    batch.windows.reserve(plan.specs.size());
    batch.masked_flags.reserve(plan.specs.size());
    for (const auto& w : plan.specs) {
        for (std::size_t i : w.token_indices)
            if (i >= total) throw std::invalid_argument("extract: window index out of grid");
        batch.windows.push_back(gather_rows(full_grid, w.token_indices));
        std::vector<std::uint8_t> wf(w.token_indices.size());
        for (std::size_t i = 0; i < w.token_indices.size(); ++i) wf[i] = flags[w.token_indices[i]];
        batch.masked_flags.push_back(std::move(wf));
    }
    return batch;
}

/// Attention score entries per layer for a full grid: (gh*gw)^2.
inline std::uint64_t attention_pair_count(std::size_t gh, std::size_t gw) {
    std::uint64_t t = static_cast<std::uint64_t>(gh) * gw;
    return t * t;
}

/// Attention score entries per layer under a window plan: sum (l_i^2)^2.
inline std::uint64_t attention_pair_count(const WindowPlan& plan) {
    std::uint64_t n = 0;
    for (const auto& w : plan.specs) {
        std::uint64_t t = static_cast<std::uint64_t>(w.size) * w.size;
        n += t * t;
    }
    return n;
}

}  // namespace lvr
