#pragma once

#include <cmath>

#include "lvr/tensor.hpp"

namespace lvr {

/// Nearest-neighbor upsample of an [H,W,C] map by an integer factor.
template <typename S>
Tensor<S> nearest_upsample(const Tensor<S>& x, std::size_t factor) {
    const Shape& s = x.shape();
    if (s.size() != 3) throw std::invalid_argument("nearest_upsample: want [H,W,C], got " + shape_str(s));
    if (factor == 0) throw std::invalid_argument("nearest_upsample: zero factor");
    std::size_t h = s[0], w = s[1], c = s[2];
    std::size_t oh = h * factor, ow = w * factor;
    std::vector<S> out(oh * ow * c);
    const S* src = x.values().data();
    for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
            const S* p = src + ((y / factor) * w + (xx / factor)) * c;
            S* q = out.data() + (y * ow + xx) * c;
            for (std::size_t ch = 0; ch < c; ++ch) q[ch] = p[ch];
        }
    Tensor<S> result = Tensor<S>::from_data({oh, ow, c}, std::move(out));
    if (detail::recording(x)) {
        auto an = x.impl();
        auto* on = result.impl().get();
        detail::record(result, {an}, [an, on, h, w, c, factor, oh, ow] {
            an->ensure_grad();
            for (std::size_t y = 0; y < oh; ++y)
                for (std::size_t xx = 0; xx < ow; ++xx) {
                    S* p = an->grad.data() + ((y / factor) * w + (xx / factor)) * c;
                    const S* g = on->grad.data() + (y * ow + xx) * c;
                    for (std::size_t ch = 0; ch < c; ++ch) p[ch] += g[ch];
                }
        });
    }
    return result;
}

/// Strided downsample of an [H,W,C] map: keeps the top-left pixel of every
/// factor x factor cell.
template <typename S>
Tensor<S> stride_downsample(const Tensor<S>& x, std::size_t factor) {
    const Shape& s = x.shape();
    if (s.size() != 3) throw std::invalid_argument("stride_downsample: want [H,W,C], got " + shape_str(s));
    std::size_t h = s[0], w = s[1], c = s[2];
    if (factor == 0 || h % factor != 0 || w % factor != 0)
        throw std::invalid_argument("stride_downsample: " + shape_str(s) + " not divisible by factor " +
                                    std::to_string(factor));
    std::size_t oh = h / factor, ow = w / factor;
    std::vector<S> out(oh * ow * c);
    const S* src = x.values().data();
    for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
            const S* p = src + ((y * factor) * w + (xx * factor)) * c;
            S* q = out.data() + (y * ow + xx) * c;
            for (std::size_t ch = 0; ch < c; ++ch) q[ch] = p[ch];
        }
    Tensor<S> result = Tensor<S>::from_data({oh, ow, c}, std::move(out));
    if (detail::recording(x)) {
        auto an = x.impl();
        auto* on = result.impl().get();
        detail::record(result, {an}, [an, on, w, c, factor, oh, ow] {
            an->ensure_grad();
            for (std::size_t y = 0; y < oh; ++y)
                for (std::size_t xx = 0; xx < ow; ++xx) {
                    S* p = an->grad.data() + ((y * factor) * w + (xx * factor)) * c;
                    const S* g = on->grad.data() + (y * ow + xx) * c;
                    for (std::size_t ch = 0; ch < c; ++ch) p[ch] += g[ch];
                }
        });
    }
    return result;
}

namespace detail {

// Shared by forward and backward: source coordinates and weights for one
// output pixel under half-pixel alignment.
struct BilinearTap {
    std::size_t i0, i1;
    double w0, w1;
};

inline BilinearTap bilinear_tap(std::size_t out_idx, std::size_t factor, std::size_t in_extent) {
    double src = (static_cast<double>(out_idx) + 0.5) / static_cast<double>(factor) - 0.5;
    double lo = std::floor(src);
    double frac = src - lo;
    long i0 = static_cast<long>(lo);
    long i1 = i0 + 1;
    i0 = std::clamp<long>(i0, 0, static_cast<long>(in_extent) - 1);
    i1 = std::clamp<long>(i1, 0, static_cast<long>(in_extent) - 1);
    return {static_cast<std::size_t>(i0), static_cast<std::size_t>(i1), 1.0 - frac, frac};
}

}  // namespace detail

/// Bilinear upsample of an [H,W,C] map by an integer factor (half-pixel
/// centers, edges clamped).
template <typename S>
Tensor<S> bilinear_upsample(const Tensor<S>& x, std::size_t factor) {
    const Shape& s = x.shape();
    if (s.size() != 3) throw std::invalid_argument("bilinear_upsample: want [H,W,C], got " + shape_str(s));
    if (factor == 0) throw std::invalid_argument("bilinear_upsample: zero factor");
    std::size_t h = s[0], w = s[1], c = s[2];
    std::size_t oh = h * factor, ow = w * factor;
    std::vector<S> out(oh * ow * c);
    const S* src = x.values().data();
    for (std::size_t y = 0; y < oh; ++y) {
        auto ty = detail::bilinear_tap(y, factor, h);
        for (std::size_t xx = 0; xx < ow; ++xx) {
            auto tx = detail::bilinear_tap(xx, factor, w);
            S* q = out.data() + (y * ow + xx) * c;
            for (std::size_t ch = 0; ch < c; ++ch) {
                double v = ty.w0 * (tx.w0 * src[(ty.i0 * w + tx.i0) * c + ch] + tx.w1 * src[(ty.i0 * w + tx.i1) * c + ch]) +
                           ty.w1 * (tx.w0 * src[(ty.i1 * w + tx.i0) * c + ch] + tx.w1 * src[(ty.i1 * w + tx.i1) * c + ch]);
                q[ch] = static_cast<S>(v);
            }
        }
    }
    Tensor<S> result = Tensor<S>::from_data({oh, ow, c}, std::move(out));
    if (detail::recording(x)) {
        auto an = x.impl();
        auto* on = result.impl().get();
        detail::record(result, {an}, [an, on, h, w, c, factor, oh, ow] {
            an->ensure_grad();
            for (std::size_t y = 0; y < oh; ++y) {
                auto ty = detail::bilinear_tap(y, factor, h);
                for (std::size_t xx = 0; xx < ow; ++xx) {
                    auto tx = detail::bilinear_tap(xx, factor, w);
                    const S* g = on->grad.data() + (y * ow + xx) * c;
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        an->grad[(ty.i0 * w + tx.i0) * c + ch] += static_cast<S>(ty.w0 * tx.w0) * g[ch];
                        an->grad[(ty.i0 * w + tx.i1) * c + ch] += static_cast<S>(ty.w0 * tx.w1) * g[ch];
                        an->grad[(ty.i1 * w + tx.i0) * c + ch] += static_cast<S>(ty.w1 * tx.w0) * g[ch];
                        an->grad[(ty.i1 * w + tx.i1) * c + ch] += static_cast<S>(ty.w1 * tx.w1) * g[ch];
                    }
                }
            }
        });
    }
    return result;
}

}  // namespace lvr
