#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "lvr/common.hpp"
#include "lvr/rng.hpp"

namespace lvr {

/// Dense row-major tensor with reverse-mode autodiff. A Tensor is a shared
/// handle to a node on a dynamic tape; the tape is recorded per forward pass
/// and freed by backward(). Gradients of leaf tensors accumulate across
/// forward/backward rounds until zero_grad().
///
/// Values are immutable once a node participates in a graph, except for
/// gradient accumulation and optimizer updates on leaves between steps.
template <typename S>
class Tensor {
  public:
    struct Node {
        Shape shape;
        std::vector<S> data;
        std::vector<S> grad;  // empty until first accumulation
        bool requires_grad = false;
        std::function<void()> backward_fn;  // null on leaves
        std::vector<std::shared_ptr<Node>> parents;

        void ensure_grad() {
            if (grad.empty()) grad.assign(data.size(), S(0));
        }
    };

    Tensor() = default;

    static Tensor zeros(Shape shape) {
        return from_data(std::move(shape), {});
    }

    static Tensor full(Shape shape, S value) {
        std::size_t n = shape_numel(shape);
        return from_data(std::move(shape), std::vector<S>(n, value));
    }

    static Tensor scalar(S value) { return from_data({1}, {value}); }

    static Tensor from_data(Shape shape, std::vector<S> data) {
        for (std::size_t d : shape)
            if (d == 0) throw std::invalid_argument("Tensor: zero extent in shape " + shape_str(shape));
        std::size_t n = shape_numel(shape);
        if (data.empty()) data.assign(n, S(0));
        if (data.size() != n)
            throw std::invalid_argument("Tensor: data length " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = std::move(shape);
        t.node_->data = std::move(data);
        return t;
    }

    static Tensor trunc_normal(Shape shape, Rng& rng, double stddev) {
        std::size_t n = shape_numel(shape);
        std::vector<S> d(n);
        for (auto& v : d) v = static_cast<S>(rng.next_trunc_normal(stddev));
        return from_data(std::move(shape), std::move(d));
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape[i]; }
    std::size_t numel() const { return node_->data.size(); }

    const std::vector<S>& values() const { return node_->data; }
    std::vector<S>& values() { return node_->data; }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        node_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return node_ && !node_->grad.empty(); }
    const std::vector<S>& grad() const { return node_->grad; }
    std::vector<S>& grad_mut() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        if (node_) std::fill(node_->grad.begin(), node_->grad.end(), S(0));
    }

    S item() const {
        if (numel() != 1) throw std::invalid_argument("Tensor::item: not a scalar, shape " + shape_str(shape()));
        return node_->data[0];
    }

    S at(std::initializer_list<std::size_t> idx) const { return node_->data[flat_index(idx)]; }
    S& at_mut(std::initializer_list<std::size_t> idx) { return node_->data[flat_index(idx)]; }

    /// Deep copy of values; no graph history, requires_grad off.
    Tensor clone_detached() const { return from_data(node_->shape, node_->data); }

    // Internal: graph node handle, used by the op implementations below.
    const std::shared_ptr<Node>& impl() const { return node_; }

  private:
    std::size_t flat_index(std::initializer_list<std::size_t> idx) const {
        const Shape& sh = node_->shape;
        if (idx.size() != sh.size())
            throw std::invalid_argument("Tensor::at: rank mismatch for shape " + shape_str(sh));
        std::size_t off = 0, i = 0;
        for (std::size_t v : idx) {
            if (v >= sh[i]) throw std::out_of_range("Tensor::at: index out of range");
            off = off * sh[i] + v;
            ++i;
        }
        return off;
    }

    std::shared_ptr<Node> node_;
};

// ---------------------------------------------------------------------------
// Grad mode. Ops record tape entries only while enabled (thread-local).

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

namespace detail {

template <typename S>
using NodePtr = std::shared_ptr<typename Tensor<S>::Node>;

template <typename S>
bool recording(const Tensor<S>& a) {
    return grad_mode() && a.requires_grad();
}

template <typename S>
bool recording(const Tensor<S>& a, const Tensor<S>& b) {
    return grad_mode() && (a.requires_grad() || b.requires_grad());
}

// Attaches tape state to `out`. The closure must capture parent nodes by
// shared_ptr and the output node by raw pointer (the closure lives on the
// output node, so no cycle and no dangling).
template <typename S>
void record(Tensor<S>& out, std::vector<NodePtr<S>> parents, std::function<void()> fn) {
    auto& n = *out.impl();
    n.requires_grad = true;
    n.parents = std::move(parents);
    n.backward_fn = std::move(fn);
}

// NumPy broadcast rules over trailing dimensions.
inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
    std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1) shape_error(op, a, b);
        out[i] = std::max(da, db);
    }
    return out;
}

// Row-major strides with 0 where the (right-aligned) input broadcasts.
inline std::vector<std::size_t> bcast_strides(const Shape& in, const Shape& out) {
    std::vector<std::size_t> st(out.size(), 0);
    std::size_t stride = 1;
    std::size_t off = out.size() - in.size();
    for (std::size_t i = in.size(); i-- > 0;) {
        if (in[i] != 1) st[off + i] = stride;
        stride *= in[i];
    }
    return st;
}

// Visits every element of `out_shape`, passing flat offsets (oa, ob, oo).
template <typename F>
void bcast_visit(const Shape& out_shape, const std::vector<std::size_t>& sa,
                 const std::vector<std::size_t>& sb, F&& f) {
    std::size_t r = out_shape.size();
    std::size_t n = shape_numel(out_shape);
    std::vector<std::size_t> counter(r, 0);
    std::size_t oa = 0, ob = 0;
    for (std::size_t o = 0; o < n; ++o) {
        f(oa, ob, o);
        for (std::size_t i = r; i-- > 0;) {
            ++counter[i];
            oa += sa[i];
            ob += sb[i];
            if (counter[i] < out_shape[i]) break;
            oa -= sa[i] * out_shape[i];
            ob -= sb[i] * out_shape[i];
            counter[i] = 0;
        }
    }
}

template <typename S, typename FwdF>
Tensor<S> elementwise_bcast(const char* name, const Tensor<S>& a, const Tensor<S>& b, FwdF f) {
    Shape os = broadcast_shape(name, a.shape(), b.shape());
    std::vector<S> out(shape_numel(os));
    const S* pa = a.values().data();
    const S* pb = b.values().data();
    if (a.shape() == b.shape()) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(pa[i], pb[i]);
    } else {
        auto sa = bcast_strides(a.shape(), os);
        auto sb = bcast_strides(b.shape(), os);
        bcast_visit(os, sa, sb, [&](std::size_t oa, std::size_t ob, std::size_t o) { out[o] = f(pa[oa], pb[ob]); });
    }
    return Tensor<S>::from_data(std::move(os), std::move(out));
}

// Accumulates d(out)/d(input) contributions back through a broadcast:
// for every output element, g(oa, ob, o) returns the contribution and the
// caller adds it at the input's (possibly repeated) offset.
template <typename S, typename G>
void bcast_accumulate(const Shape& out_shape, const Shape& in_shape, const Shape& other_shape, G g) {
    auto si = bcast_strides(in_shape, out_shape);
    auto so = bcast_strides(other_shape, out_shape);
    bcast_visit(out_shape, si, so, g);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (broadcasting)

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    Tensor<S> out = detail::elementwise_bcast("add", a, b, [](S x, S y) { return x + y; });
    if (detail::recording(a, b)) {
        auto an = a.impl(), bn = b.impl();
        auto* on = out.impl().get();
        detail::record(out, {an, bn}, [an, bn, on] {
            const auto& g = on->grad;
            for (auto& [n, sh] : {std::pair{an.get(), an->shape}, std::pair{bn.get(), bn->shape}}) {
                if (!n->requires_grad) continue;
                n->ensure_grad();
                auto st = detail::bcast_strides(sh, on->shape);
                auto dummy = detail::bcast_strides(on->shape, on->shape);
                detail::bcast_visit(on->shape, st, dummy,
                                    [&](std::size_t oi, std::size_t, std::size_t o) { n->grad[oi] += g[o]; });
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    Tensor<S> out = detail::elementwise_bcast("sub", a, b, [](S x, S y) { return x - y; });
    if (detail::recording(a, b)) {
        auto an = a.impl(), bn = b.impl();
        auto* on = out.impl().get();
        detail::record(out, {an, bn}, [an, bn, on] {
            const auto& g = on->grad;
            if (an->requires_grad) {
                an->ensure_grad();
                auto st = detail::bcast_strides(an->shape, on->shape);
                auto z = detail::bcast_strides(on->shape, on->shape);
                detail::bcast_visit(on->shape, st, z,
                                    [&](std::size_t oi, std::size_t, std::size_t o) { an->grad[oi] += g[o]; });
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                auto st = detail::bcast_strides(bn->shape, on->shape);
                auto z = detail::bcast_strides(on->shape, on->shape);
                detail::bcast_visit(on->shape, st, z,
                                    [&](std::size_t oi, std::size_t, std::size_t o) { bn->grad[oi] -= g[o]; });
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    Tensor<S> out = detail::elementwise_bcast("mul", a, b, [](S x, S y) { return x * y; });
    if (detail::recording(a, b)) {
        auto an = a.impl(), bn = b.impl();
        auto* on = out.impl().get();
        detail::record(out, {an, bn}, [an, bn, on] {
            const auto& g = on->grad;
            auto sa = detail::bcast_strides(an->shape, on->shape);
            auto sb = detail::bcast_strides(bn->shape, on->shape);
            if (an->requires_grad) an->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            detail::bcast_visit(on->shape, sa, sb, [&](std::size_t oa, std::size_t ob, std::size_t o) {
                if (an->requires_grad) an->grad[oa] += g[o] * bn->data[ob];
                if (bn->requires_grad) bn->grad[ob] += g[o] * an->data[oa];
            });
        });
    }
    return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
    std::vector<S> d(a.numel());
    const auto& src = a.values();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = src[i] * c;
    Tensor<S> out = Tensor<S>::from_data(a.shape(), std::move(d));
    if (detail::recording(a)) {
        auto an = a.impl();
        auto* on = out.impl().get();
        detail::record(out, {an}, [an, on, c] {
            an->ensure_grad();
            for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[i] * c;
        });
    }
    return out;
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) {
    return scale(a, S(-1));
}

template <typename S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <typename S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <typename S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Matrix multiply: a [..,m,k] x b [..,k,n] -> [..,m,n], batch dims broadcast.

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using CMap = Eigen::Map<const Mat>;
    using MMap = Eigen::Map<Mat>;

    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (as.size() < 2 || bs.size() < 2) shape_error("matmul", as, bs);
    std::size_t m = as[as.size() - 2], k = as[as.size() - 1];
    std::size_t k2 = bs[bs.size() - 2], n = bs[bs.size() - 1];
    if (k != k2) shape_error("matmul", as, bs);

    Shape abatch(as.begin(), as.end() - 2), bbatch(bs.begin(), bs.end() - 2);
    Shape batch = detail::broadcast_shape("matmul", abatch, bbatch);
    std::size_t nb = shape_numel(batch);

    Shape os = batch;
    os.push_back(m);
    os.push_back(n);
    std::vector<S> out(nb * m * n);

    auto sa = detail::bcast_strides(abatch, batch);
    auto sb = detail::bcast_strides(bbatch, batch);
    const S* pa = a.values().data();
    const S* pb = b.values().data();

    // Per-batch flat offsets of the a/b matrices (broadcast-aware).
    std::vector<std::size_t> aoff(nb), boff(nb);
    {
        std::size_t idx = 0;
        std::vector<std::size_t> counter(batch.size(), 0);
        std::size_t oa = 0, ob = 0;
        for (idx = 0; idx < nb; ++idx) {
            aoff[idx] = oa * m * k;
            boff[idx] = ob * k * n;
            for (std::size_t i = batch.size(); i-- > 0;) {
                ++counter[i];
                oa += sa[i];
                ob += sb[i];
                if (counter[i] < batch[i]) break;
                oa -= sa[i] * batch[i];
                ob -= sb[i] * batch[i];
                counter[i] = 0;
            }
        }
    }

    for (std::size_t i = 0; i < nb; ++i) {
        CMap A(pa + aoff[i], m, k);
        CMap B(pb + boff[i], k, n);
        MMap C(out.data() + i * m * n, m, n);
        C.noalias() = A * B;
    }

    Tensor<S> result = Tensor<S>::from_data(std::move(os), std::move(out));
    if (detail::recording(a, b)) {
        auto an = a.impl(), bn = b.impl();
        auto* on = result.impl().get();
        detail::record(result, {an, bn}, [an, bn, on, m, k, n, nb, aoff, boff] {
            const S* g = on->grad.data();
            if (an->requires_grad) an->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (std::size_t i = 0; i < nb; ++i) {
                CMap G(g + i * m * n, m, n);
                if (an->requires_grad) {
                    CMap B(bn->data.data() + boff[i], k, n);
                    MMap dA(an->grad.data() + aoff[i], m, k);
                    dA.noalias() += G * B.transpose();
                }
                if (bn->requires_grad) {
                    CMap A(an->data.data() + aoff[i], m, k);
                    MMap dB(bn->grad.data() + boff[i], k, n);
                    dB.noalias() += A.transpose() * G;
                }
            }
        });
    }
    return result;
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) shape_error("reshape", a.shape(), shape);
    Tensor<S> out = Tensor<S>::from_data(std::move(shape), a.values());
    if (detail::recording(a)) {
        auto an = a.impl();
        auto* on = out.impl().get();
        detail::record(out, {an}, [an, on] {
            an->ensure_grad();
            for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[i];
        });
    }
    return out;
}

namespace detail {

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size() - 1; i-- > 0;) st[i] = st[i + 1] * s[i + 1];
    return st;
}

template <typename S>
void transpose_copy(const Shape& src_shape, const S* src, std::size_t ax0, std::size_t ax1, S* dst) {
    Shape dst_shape = src_shape;
    std::swap(dst_shape[ax0], dst_shape[ax1]);
    auto sst = row_major_strides(src_shape);
    std::swap(sst[ax0], sst[ax1]);  // source strides viewed in dst order
    std::size_t n = shape_numel(dst_shape);
    std::vector<std::size_t> counter(dst_shape.size(), 0);
    std::size_t so = 0;
    for (std::size_t o = 0; o < n; ++o) {
        dst[o] = src[so];
        for (std::size_t i = dst_shape.size(); i-- > 0;) {
            ++counter[i];
            so += sst[i];
            if (counter[i] < dst_shape[i]) break;
            so -= sst[i] * dst_shape[i];
            counter[i] = 0;
        }
    }
}

}  // namespace detail

template <typename S>
Tensor<S> transpose(const Tensor<S>& a, std::size_t ax0, std::size_t ax1) {
    const Shape& s = a.shape();
    if (ax0 >= s.size() || ax1 >= s.size())
        throw std::invalid_argument("transpose: axis out of range for shape " + shape_str(s));
    Shape os = s;
    std::swap(os[ax0], os[ax1]);
    std::vector<S> out(a.numel());
    detail::transpose_copy(s, a.values().data(), ax0, ax1, out.data());
    Tensor<S> result = Tensor<S>::from_data(std::move(os), std::move(out));
    if (detail::recording(a)) {
        auto an = a.impl();
        auto* on = result.impl().get();
        detail::record(result, {an}, [an, on, ax0, ax1] {
            an->ensure_grad();
            std::vector<S> gt(on->grad.size());
            detail::transpose_copy(on->shape, on->grad.data(), ax0, ax1, gt.data());
            for (std::size_t i = 0; i < gt.size(); ++i) an->grad[i] += gt[i];
        });
    }
    return result;
}

// ---------------------------------------------------------------------------
// Row gather/scatter along axis 0. Scatter accumulates duplicate indices.

template <typename S>
Tensor<S> gather_rows(const Tensor<S>& a, const std::vector<std::size_t>& indices) {
    const Shape& s = a.shape();
    if (s.empty()) throw std::invalid_argument("gather_rows: rank-0 input");
    std::size_t rows = s[0];
    std::size_t cols = a.numel() / rows;
    for (std::size_t i : indices)
        if (i >= rows) throw std::out_of_range("gather_rows: index " + std::to_string(i) + " out of " + std::to_string(rows));
    Shape os = s;
    os[0] = indices.size();
    std::vector<S> out(indices.size() * cols);
    const S* src = a.values().data();
    for (std::size_t r = 0; r < indices.size(); ++r)
        std::copy_n(src + indices[r] * cols, cols, out.data() + r * cols);
    Tensor<S> result = Tensor<S>::from_data(std::move(os), std::move(out));
    if (detail::recording(a)) {
        auto an = a.impl();
        auto* on = result.impl().get();
        detail::record(result, {an}, [an, on, indices, cols] {
            an->ensure_grad();
            for (std::size_t r = 0; r < indices.size(); ++r) {
                S* dst = an->grad.data() + indices[r] * cols;
                const S* g = on->grad.data() + r * cols;
                for (std::size_t c = 0; c < cols; ++c) dst[c] += g[c];
            }
        });
    }
    return result;
}

template <typename S>
Tensor<S> scatter_rows(const Tensor<S>& a, const std::vector<std::size_t>& indices, std::size_t out_rows) {
    const Shape& s = a.shape();
    if (s.empty() || s[0] != indices.size())
        throw std::invalid_argument("scatter_rows: leading extent " + shape_str(s) + " must equal index count " +
                                    std::to_string(indices.size()));
    std::size_t cols = a.numel() / s[0];
    for (std::size_t i : indices)
        if (i >= out_rows) throw std::out_of_range("scatter_rows: index " + std::to_string(i) + " out of " + std::to_string(out_rows));
    Shape os = s;
    os[0] = out_rows;
    std::vector<S> out(out_rows * cols, S(0));
    const S* src = a.values().data();
    for (std::size_t r = 0; r < indices.size(); ++r) {
        S* dst = out.data() + indices[r] * cols;
        for (std::size_t c = 0; c < cols; ++c) dst[c] += src[r * cols + c];
    }
    Tensor<S> result = Tensor<S>::from_data(std::move(os), std::move(out));
    if (detail::recording(a)) {
        auto an = a.impl();
        auto* on = result.impl().get();
        detail::record(result, {an}, [an, on, indices, cols] {
            an->ensure_grad();
            for (std::size_t r = 0; r < indices.size(); ++r) {
                const S* g = on->grad.data() + indices[r] * cols;
                S* dst = an->grad.data() + r * cols;
                for (std::size_t c = 0; c < cols; ++c) dst[c] += g[c];
            }
        });
    }
    return result;
}

// ---------------------------------------------------------------------------
// Reductions

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
    S acc = 0;
    for (S v : a.values()) acc += v;
    Tensor<S> out = Tensor<S>::scalar(acc);
    if (detail::recording(a)) {
        auto an = a.impl();
        auto* on = out.impl().get();
        detail::record(out, {an}, [an, on] {
            an->ensure_grad();
            S g = on->grad[0];
            for (auto& v : an->grad) v += g;
        });
    }
    return out;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
    return scale(sum(a), S(1) / static_cast<S>(a.numel()));
}

template <typename S>
Tensor<S> sum_axis(const Tensor<S>& a, std::size_t axis) {
    const Shape& s = a.shape();
    if (axis >= s.size()) throw std::invalid_argument("sum_axis: axis out of range for shape " + shape_str(s));
    Shape os;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (i != axis) os.push_back(s[i]);
    if (os.empty()) os.push_back(1);
    std::size_t outer = 1, inner = 1, ext = s[axis];
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    std::vector<S> out(outer * inner, S(0));
    const S* src = a.values().data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t e = 0; e < ext; ++e)
            for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += src[(o * ext + e) * inner + i];
    Tensor<S> result = Tensor<S>::from_data(std::move(os), std::move(out));
    if (detail::recording(a)) {
        auto an = a.impl();
        auto* on = result.impl().get();
        detail::record(result, {an}, [an, on, outer, inner, ext] {
            an->ensure_grad();
            const S* g = on->grad.data();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t e = 0; e < ext; ++e)
                    for (std::size_t i = 0; i < inner; ++i) an->grad[(o * ext + e) * inner + i] += g[o * inner + i];
        });
    }
    return result;
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization

template <typename S>
Tensor<S> gelu(const Tensor<S>& a) {
    const S inv_sqrt2 = static_cast<S>(0.7071067811865475244);
    std::vector<S> out(a.numel());
    const auto& x = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = S(0.5) * x[i] * (S(1) + std::erf(x[i] * inv_sqrt2));
    Tensor<S> result = Tensor<S>::from_data(a.shape(), std::move(out));
    if (detail::recording(a)) {
        auto an = a.impl();
        auto* on = result.impl().get();
        detail::record(result, {an}, [an, on, inv_sqrt2] {
            an->ensure_grad();
            const S inv_sqrt2pi = static_cast<S>(0.3989422804014326779);
            for (std::size_t i = 0; i < an->grad.size(); ++i) {
                S x = an->data[i];
                S cdf = S(0.5) * (S(1) + std::erf(x * inv_sqrt2));
                S pdf = inv_sqrt2pi * std::exp(S(-0.5) * x * x);
                an->grad[i] += on->grad[i] * (cdf + x * pdf);
            }
        });
    }
    return result;
}

template <typename S>
Tensor<S> softmax(const Tensor<S>& a, std::size_t axis) {
    const Shape& s = a.shape();
    if (axis >= s.size()) throw std::invalid_argument("softmax: axis out of range for shape " + shape_str(s));
    std::size_t outer = 1, inner = 1, ext = s[axis];
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    std::vector<S> out(a.numel());
    const S* src = a.values().data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            const S* col = src + o * ext * inner + i;
            S mx = col[0];
            for (std::size_t e = 1; e < ext; ++e) mx = std::max(mx, col[e * inner]);
            S denom = 0;
            for (std::size_t e = 0; e < ext; ++e) denom += std::exp(col[e * inner] - mx);
            S* ocol = out.data() + o * ext * inner + i;
            for (std::size_t e = 0; e < ext; ++e) ocol[e * inner] = std::exp(col[e * inner] - mx) / denom;
        }
    }
    Tensor<S> result = Tensor<S>::from_data(s, std::move(out));
    if (detail::recording(a)) {
        auto an = a.impl();
        auto* on = result.impl().get();
        detail::record(result, {an}, [an, on, outer, inner, ext] {
            an->ensure_grad();
            const S* y = on->data.data();
            const S* g = on->grad.data();
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t i = 0; i < inner; ++i) {
                    std::size_t base = o * ext * inner + i;
                    S dot = 0;
                    for (std::size_t e = 0; e < ext; ++e) dot += y[base + e * inner] * g[base + e * inner];
                    for (std::size_t e = 0; e < ext; ++e) {
                        std::size_t k = base + e * inner;
                        an->grad[k] += y[k] * (g[k] - dot);
                    }
                }
            }
        });
    }
    return result;
}

/// Layer normalization over the last axis: zero mean, unit variance
/// (population variance, eps-regularized), then per-channel affine.
template <typename S>
Tensor<S> layernorm(const Tensor<S>& a, const Tensor<S>& gain, const Tensor<S>& bias, S eps = S(1e-6)) {
    const Shape& s = a.shape();
    if (s.empty()) throw std::invalid_argument("layernorm: rank-0 input");
    std::size_t d = s.back();
    if (gain.numel() != d || bias.numel() != d) shape_error("layernorm", s, gain.shape());
    std::size_t rows = a.numel() / d;
    std::vector<S> out(a.numel()), xhat(a.numel()), inv_std(rows);
    const S* x = a.values().data();
    const S* gp = gain.values().data();
    const S* bp = bias.values().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const S* row = x + r * d;
        S m = 0;
        for (std::size_t i = 0; i < d; ++i) m += row[i];
        m /= static_cast<S>(d);
        S var = 0;
        for (std::size_t i = 0; i < d; ++i) var += (row[i] - m) * (row[i] - m);
        var /= static_cast<S>(d);
        S is = S(1) / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t i = 0; i < d; ++i) {
            S xh = (row[i] - m) * is;
            xhat[r * d + i] = xh;
            out[r * d + i] = xh * gp[i] + bp[i];
        }
    }
    Tensor<S> result = Tensor<S>::from_data(s, std::move(out));
    if (grad_mode() && (a.requires_grad() || gain.requires_grad() || bias.requires_grad())) {
        auto an = a.impl(), gn = gain.impl(), bn = bias.impl();
        auto* on = result.impl().get();
        detail::record(result, {an, gn, bn},
                       [an, gn, bn, on, rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
            const S* g = on->grad.data();
            if (gn->requires_grad) gn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            if (an->requires_grad) an->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const S* grow = g + r * d;
                const S* xh = xhat.data() + r * d;
                if (gn->requires_grad)
                    for (std::size_t i = 0; i < d; ++i) gn->grad[i] += grow[i] * xh[i];
                if (bn->requires_grad)
                    for (std::size_t i = 0; i < d; ++i) bn->grad[i] += grow[i];
                if (an->requires_grad) {
                    S mean_gy = 0, mean_gyx = 0;
                    for (std::size_t i = 0; i < d; ++i) {
                        S gy = grow[i] * gn->data[i];
                        mean_gy += gy;
                        mean_gyx += gy * xh[i];
                    }
                    mean_gy /= static_cast<S>(d);
                    mean_gyx /= static_cast<S>(d);
                    for (std::size_t i = 0; i < d; ++i) {
                        S gy = grow[i] * gn->data[i];
                        an->grad[r * d + i] += inv_std[r] * (gy - mean_gy - xh[i] * mean_gyx);
                    }
                }
            }
        });
    }
    return result;
}

// ---------------------------------------------------------------------------
// Losses

/// Mean cross-entropy over rows of [N, K] logits (log-sum-exp stabilized).
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, const std::vector<std::size_t>& labels) {
    const Shape& s = logits.shape();
    if (s.size() != 2) throw std::invalid_argument("cross_entropy: want [N,K] logits, got " + shape_str(s));
    std::size_t n = s[0], k = s[1];
    if (labels.size() != n)
        throw std::invalid_argument("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                                    std::to_string(n) + " rows");
    for (std::size_t l : labels)
        if (l >= k) throw std::out_of_range("cross_entropy: label " + std::to_string(l) + " out of " + std::to_string(k) + " classes");
    const S* x = logits.values().data();
    S total = 0;
    for (std::size_t r = 0; r < n; ++r) {
        const S* row = x + r * k;
        S mx = row[0];
        for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, row[i]);
        S lse = 0;
        for (std::size_t i = 0; i < k; ++i) lse += std::exp(row[i] - mx);
        total += std::log(lse) + mx - row[labels[r]];
    }
    Tensor<S> out = Tensor<S>::scalar(total / static_cast<S>(n));
    if (detail::recording(logits)) {
        auto ln = logits.impl();
        auto* on = out.impl().get();
        detail::record(out, {ln}, [ln, on, labels, n, k] {
            ln->ensure_grad();
            S g = on->grad[0] / static_cast<S>(n);
            for (std::size_t r = 0; r < n; ++r) {
                const S* row = ln->data.data() + r * k;
                S mx = row[0];
                for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, row[i]);
                S lse = 0;
                for (std::size_t i = 0; i < k; ++i) lse += std::exp(row[i] - mx);
                for (std::size_t i = 0; i < k; ++i) {
                    S p = std::exp(row[i] - mx) / lse;
                    ln->grad[r * k + i] += g * (p - (labels[r] == i ? S(1) : S(0)));
                }
            }
        });
    }
    return out;
}

/// Elementwise smooth-L1: 0.5 d^2 / beta for |d| < beta, |d| - beta/2
/// otherwise. beta == 0 degenerates to plain |d|.
template <typename S>
Tensor<S> smooth_l1(const Tensor<S>& a, S beta) {
    if (beta < S(0)) throw std::invalid_argument("smooth_l1: beta must be >= 0");
    std::vector<S> out(a.numel());
    const auto& x = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        S ax = std::abs(x[i]);
        out[i] = (beta > S(0) && ax < beta) ? S(0.5) * x[i] * x[i] / beta : ax - S(0.5) * beta;
    }
    Tensor<S> result = Tensor<S>::from_data(a.shape(), std::move(out));
    if (detail::recording(a)) {
        auto an = a.impl();
        auto* on = result.impl().get();
        detail::record(result, {an}, [an, on, beta] {
            an->ensure_grad();
            for (std::size_t i = 0; i < an->grad.size(); ++i) {
                S x = an->data[i];
                S dx = (beta > S(0) && std::abs(x) < beta) ? x / beta : (x > S(0) ? S(1) : (x < S(0) ? S(-1) : S(0)));
                an->grad[i] += on->grad[i] * dx;
            }
        });
    }
    return result;
}

// ---------------------------------------------------------------------------
// Backward pass

/// Reverse-mode sweep from a scalar loss. Populates grads of every
/// requires_grad leaf reachable from the loss, then frees the tape
/// (intermediate grads, closures, and parent links).
template <typename S>
void backward(const Tensor<S>& loss) {
    using Node = typename Tensor<S>::Node;
    if (!loss.defined()) throw std::invalid_argument("backward: undefined tensor");
    auto root = loss.impl();
    if (root->data.size() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(root->shape));
    if (!root->requires_grad) return;

    // The topo order owns the nodes: intermediates are typically kept alive
    // only by parent links, which get severed when the tape is freed below.
    std::vector<std::shared_ptr<Node>> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            const auto& p = n->parents[i++];
            if (p->requires_grad && !visited.count(p.get())) {
                visited.insert(p.get());
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = it->get();
        if (n->backward_fn && !n->grad.empty()) n->backward_fn();
    }
    for (const auto& n : order) {
        if (n->backward_fn) {
            n->backward_fn = nullptr;
            n->parents.clear();
            n->grad.clear();
            n->grad.shrink_to_fit();
        }
    }
}

}  // namespace lvr
