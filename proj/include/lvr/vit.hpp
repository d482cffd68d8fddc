#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "lvr/optim.hpp"
#include "lvr/rng.hpp"
#include "lvr/tensor.hpp"

namespace lvr {

/// Attention score entries materialized so far, N^2 added per attention
/// layer invocation over N tokens. The complexity benchmark and its oracle
/// read this counter.
inline std::atomic<std::uint64_t>& attention_entry_counter() {
    static std::atomic<std::uint64_t> counter{0};
    return counter;
}

struct GridCoord {
    std::size_t row = 0, col = 0;
    bool operator==(const GridCoord&) const = default;
};

/// Per-image token sequence with grid bookkeeping. Tokens are row-major over
/// the patch grid; coords is a bijection onto the grid positions.
template <typename S>
struct TokenGrid {
    Tensor<S> tokens;  // [T, D] (embedded) or [T, C*p*p] (raw pixels)
    std::size_t grid_h = 0, grid_w = 0;
    std::vector<GridCoord> coords;

    std::size_t token_count() const { return grid_h * grid_w; }
};

struct MaskPlan {
    double mask_ratio = 0.0;
    std::vector<std::size_t> masked_indices;  // sorted, unique, < T
    std::uint64_t seed = 0;

    std::size_t masked_count() const { return masked_indices.size(); }

    std::vector<std::size_t> visible_indices(std::size_t total) const {
        std::vector<std::size_t> vis;
        vis.reserve(total - masked_indices.size());
        std::size_t mi = 0;
        for (std::size_t t = 0; t < total; ++t) {
            if (mi < masked_indices.size() && masked_indices[mi] == t)
                ++mi;
            else
                vis.push_back(t);
        }
        return vis;
    }

    std::vector<std::uint8_t> mask_flags(std::size_t total) const {
        std::vector<std::uint8_t> f(total, 0);
        for (std::size_t i : masked_indices) f[i] = 1;
        return f;
    }
};

struct StackConfig {
    std::size_t depth = 4;
    std::size_t dim = 64;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 4;
    std::size_t patch_size = 8;

    void validate() const {
        if (dim == 0 || heads == 0 || dim % heads != 0)
            throw ConfigError("StackConfig: dim " + std::to_string(dim) + " not divisible by heads " +
                              std::to_string(heads));
        if (mlp_ratio == 0) throw ConfigError("StackConfig: mlp_ratio must be positive");
        if (patch_size == 0) throw ConfigError("StackConfig: patch_size must be positive");
    }
};

// ---------------------------------------------------------------------------
// Patchify

/// Splits [C,H,W] into non-overlapping patch_size x patch_size patches,
/// one token per patch (flattened pixels, length C*p*p), row-major grid.
template <typename S>
TokenGrid<S> patchify(const Tensor<S>& image, std::size_t patch_size) {
    const Shape& s = image.shape();
    if (s.size() != 3) throw std::invalid_argument("patchify: want [C,H,W], got " + shape_str(s));
    std::size_t c = s[0], h = s[1], w = s[2];
    if (patch_size == 0 || h % patch_size != 0 || w % patch_size != 0)
        throw std::invalid_argument("patchify: image " + shape_str(s) + " not divisible by patch size " +
                                    std::to_string(patch_size));
    std::size_t gh = h / patch_size, gw = w / patch_size;
    std::size_t t = gh * gw, d = c * patch_size * patch_size;
    std::vector<S> tokens(t * d);
    const S* px = image.values().data();
    for (std::size_t gr = 0; gr < gh; ++gr)
        for (std::size_t gc = 0; gc < gw; ++gc) {
            S* tok = tokens.data() + (gr * gw + gc) * d;
            std::size_t i = 0;
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t py = 0; py < patch_size; ++py)
                    for (std::size_t pxi = 0; pxi < patch_size; ++pxi)
                        tok[i++] = px[(ch * h + gr * patch_size + py) * w + gc * patch_size + pxi];
        }
    TokenGrid<S> grid;
    grid.tokens = Tensor<S>::from_data({t, d}, std::move(tokens));
    grid.grid_h = gh;
    grid.grid_w = gw;
    grid.coords.resize(t);
    for (std::size_t i = 0; i < t; ++i) grid.coords[i] = {i / gw, i % gw};
    return grid;
}

template <typename S>
Tensor<S> unpatchify(const Tensor<S>& tokens, std::size_t gh, std::size_t gw, std::size_t channels,
                     std::size_t patch_size) {
    const Shape& s = tokens.shape();
    std::size_t d = channels * patch_size * patch_size;
    if (s.size() != 2 || s[0] != gh * gw || s[1] != d)
        throw std::invalid_argument("unpatchify: token shape " + shape_str(s) + " does not match grid");
    std::size_t h = gh * patch_size, w = gw * patch_size;
    std::vector<S> img(channels * h * w);
    const S* tok = tokens.values().data();
    for (std::size_t gr = 0; gr < gh; ++gr)
        for (std::size_t gc = 0; gc < gw; ++gc) {
            const S* t = tok + (gr * gw + gc) * d;
            std::size_t i = 0;
            for (std::size_t ch = 0; ch < channels; ++ch)
                for (std::size_t py = 0; py < patch_size; ++py)
                    for (std::size_t px = 0; px < patch_size; ++px)
                        img[(ch * h + gr * patch_size + py) * w + gc * patch_size + px] = t[i++];
        }
    return Tensor<S>::from_data({channels, h, w}, std::move(img));
}

// ---------------------------------------------------------------------------
// Fixed 2-D sine-cosine positional table

/// [gh*gw, dim] table; first half of the channels encodes the row
/// coordinate, second half the column, each as interleaved sin/cos over a
/// geometric frequency ladder. Not learned.
template <typename S>
Tensor<S> sincos_pos_table(std::size_t gh, std::size_t gw, std::size_t dim) {
    if (dim % 4 != 0) throw std::invalid_argument("sincos_pos_table: dim must be divisible by 4, got " + std::to_string(dim));
    std::size_t quarter = dim / 4;
    std::vector<double> omega(quarter);
    for (std::size_t i = 0; i < quarter; ++i)
        omega[i] = 1.0 / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(quarter));
    std::vector<S> table(gh * gw * dim);
    for (std::size_t r = 0; r < gh; ++r)
        for (std::size_t c = 0; c < gw; ++c) {
            S* row = table.data() + (r * gw + c) * dim;
            for (std::size_t i = 0; i < quarter; ++i) {
                row[2 * i] = static_cast<S>(std::sin(static_cast<double>(r) * omega[i]));
                row[2 * i + 1] = static_cast<S>(std::cos(static_cast<double>(r) * omega[i]));
                row[dim / 2 + 2 * i] = static_cast<S>(std::sin(static_cast<double>(c) * omega[i]));
                row[dim / 2 + 2 * i + 1] = static_cast<S>(std::cos(static_cast<double>(c) * omega[i]));
            }
        }
    return Tensor<S>::from_data({gh * gw, dim}, std::move(table));
}

// ---------------------------------------------------------------------------
// Masking

/// Uniform sample of floor(ratio * total) indices without replacement,
/// deterministic in the seed.
inline MaskPlan sample_mask(std::size_t total, double mask_ratio, std::uint64_t seed) {
    if (mask_ratio < 0.0 || mask_ratio >= 1.0)
        throw ConfigError("sample_mask: mask_ratio must be in [0,1), got " + std::to_string(mask_ratio));
    std::size_t count = static_cast<std::size_t>(mask_ratio * static_cast<double>(total));
    std::vector<std::size_t> all(total);
    std::iota(all.begin(), all.end(), std::size_t{0});
    Rng rng(seed);
    rng.shuffle(all);
    MaskPlan plan;
    plan.mask_ratio = mask_ratio;
    plan.seed = seed;
    plan.masked_indices.assign(all.begin(), all.begin() + count);
    std::sort(plan.masked_indices.begin(), plan.masked_indices.end());
    return plan;
}

// ---------------------------------------------------------------------------
// Transformer

template <typename S>
struct LinearLayer {
    Tensor<S> w;  // [in, out]
    Tensor<S> b;  // [out]

    static LinearLayer init(ParamStore<S>& store, const std::string& prefix, std::size_t in, std::size_t out,
                            Rng& rng) {
        LinearLayer l;
        l.w = store.add(prefix + ".w", Tensor<S>::trunc_normal({in, out}, rng, 0.02));
        l.b = store.add(prefix + ".b", Tensor<S>::zeros({out}));
        return l;
    }

    Tensor<S> forward(const Tensor<S>& x) const { return add(matmul(x, w), b); }
};

/// token_i := W patch_i + b + pos(row_i, col_i). Coordinates and grid
/// extents carry over from the raw grid.
template <typename S>
TokenGrid<S> embed(const TokenGrid<S>& raw, const LinearLayer<S>& projection, const Tensor<S>& pos_table) {
    if (pos_table.dim(0) != raw.token_count())
        throw std::invalid_argument("embed: pos table rows " + std::to_string(pos_table.dim(0)) +
                                    " do not match token count " + std::to_string(raw.token_count()));
    TokenGrid<S> out;
    out.grid_h = raw.grid_h;
    out.grid_w = raw.grid_w;
    out.coords = raw.coords;
    out.tokens = add(projection.forward(raw.tokens), pos_table);
    return out;
}

/// Pre-norm ViT block: x + MHSA(LN(x)), then + MLP(LN(.)). The pairwise
/// score matrix over N tokens is N x N per layer (counted once per call).
template <typename S>
struct TransformerBlock {
    std::size_t heads = 1;
    Tensor<S> ln1_g, ln1_b, ln2_g, ln2_b;
    LinearLayer<S> wq, wk, wv, wo;
    LinearLayer<S> mlp1, mlp2;

    static TransformerBlock init(ParamStore<S>& store, const std::string& prefix, const StackConfig& cfg, Rng& rng) {
        TransformerBlock blk;
        blk.heads = cfg.heads;
        blk.ln1_g = store.add(prefix + ".ln1.g", Tensor<S>::full({cfg.dim}, S(1)));
        blk.ln1_b = store.add(prefix + ".ln1.b", Tensor<S>::zeros({cfg.dim}));
        blk.wq = LinearLayer<S>::init(store, prefix + ".attn.wq", cfg.dim, cfg.dim, rng);
        blk.wk = LinearLayer<S>::init(store, prefix + ".attn.wk", cfg.dim, cfg.dim, rng);
        blk.wv = LinearLayer<S>::init(store, prefix + ".attn.wv", cfg.dim, cfg.dim, rng);
        blk.wo = LinearLayer<S>::init(store, prefix + ".attn.wo", cfg.dim, cfg.dim, rng);
        blk.ln2_g = store.add(prefix + ".ln2.g", Tensor<S>::full({cfg.dim}, S(1)));
        blk.ln2_b = store.add(prefix + ".ln2.b", Tensor<S>::zeros({cfg.dim}));
        blk.mlp1 = LinearLayer<S>::init(store, prefix + ".mlp.w1", cfg.dim, cfg.dim * cfg.mlp_ratio, rng);
        blk.mlp2 = LinearLayer<S>::init(store, prefix + ".mlp.w2", cfg.dim * cfg.mlp_ratio, cfg.dim, rng);
        return blk;
    }

    Tensor<S> forward(const Tensor<S>& x) const {
        const Shape& s = x.shape();
        if (s.size() != 2) throw std::invalid_argument("TransformerBlock: want [N,D], got " + shape_str(s));
        std::size_t n = s[0], d = s[1];
        std::size_t dh = d / heads;

        Tensor<S> h = layernorm(x, ln1_g, ln1_b);
        auto split = [&](const Tensor<S>& t) {
            // [N,D] -> [H,N,dh]
            return transpose(reshape(t, {n, heads, dh}), 0, 1);
        };
        Tensor<S> q = split(wq.forward(h));
        Tensor<S> k = split(wk.forward(h));
        Tensor<S> v = split(wv.forward(h));

        attention_entry_counter().fetch_add(static_cast<std::uint64_t>(n) * n, std::memory_order_relaxed);
        Tensor<S> scores = scale(matmul(q, transpose(k, 1, 2)), static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh))));
        Tensor<S> attn = softmax(scores, 2);
        Tensor<S> ctx = reshape(transpose(matmul(attn, v), 0, 1), {n, d});
        Tensor<S> y = add(x, wo.forward(ctx));

        Tensor<S> m = layernorm(y, ln2_g, ln2_b);
        Tensor<S> mlp = mlp2.forward(gelu(mlp1.forward(m)));
        return add(y, mlp);
    }
};

/// A stack of blocks; depth 0 is the identity.
template <typename S>
struct EncoderStack {
    StackConfig cfg;
    std::vector<TransformerBlock<S>> blocks;

    static EncoderStack init(ParamStore<S>& store, const std::string& prefix, const StackConfig& cfg, Rng& rng) {
        cfg.validate();
        EncoderStack st;
        st.cfg = cfg;
        st.blocks.reserve(cfg.depth);
        for (std::size_t i = 0; i < cfg.depth; ++i)
            st.blocks.push_back(TransformerBlock<S>::init(store, prefix + ".block" + std::to_string(i), cfg, rng));
        return st;
    }

    Tensor<S> forward(const Tensor<S>& x) const {
        Tensor<S> h = x;
        for (const auto& blk : blocks) h = blk.forward(h);
        return h;
    }

    /// Forward that also returns activations after the 1-based block indices
    /// in `taps` (must be sorted ascending, each <= depth).
    std::vector<Tensor<S>> forward_with_taps(const Tensor<S>& x, const std::vector<std::size_t>& taps) const {
        for (std::size_t t : taps)
            if (t == 0 || t > blocks.size())
                throw ConfigError("tap index " + std::to_string(t) + " out of range for depth " +
                                  std::to_string(blocks.size()));
        std::vector<Tensor<S>> out;
        out.reserve(taps.size());
        Tensor<S> h = x;
        std::size_t ti = 0;
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            h = blocks[i].forward(h);
            while (ti < taps.size() && taps[ti] == i + 1) {
                out.push_back(h);
                ++ti;
            }
        }
        return out;
    }
};

/// Encoder over visible tokens only; output order matches visible-index
/// order (ascending grid index).
template <typename S>
Tensor<S> encode_visible(const TokenGrid<S>& grid, const MaskPlan& plan, const EncoderStack<S>& stack) {
    std::size_t total = grid.token_count();
    if (!plan.masked_indices.empty() && plan.masked_indices.back() >= total)
        throw std::invalid_argument("encode_visible: mask plan does not fit grid");
    auto vis = plan.visible_indices(total);
    return stack.forward(gather_rows(grid.tokens, vis));
}

}  // namespace lvr
