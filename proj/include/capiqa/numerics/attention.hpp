#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "capiqa/numerics/ops.hpp"

namespace capiqa {

/// Learned query/key/value/output projections of a multi-head attention block.
template <class T>
struct AttentionProjections {
    Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

namespace detail {

struct AttentionLayout {
    std::size_t batch, rows, width, heads, head_dim;
};

template <class T>
AttentionLayout attention_layout(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads) {
    if (q.rank() != 2) throw DimensionError("attention query must be [N,d], got " + to_string(q.shape()));
    if (k.shape() != v.shape()) throw DimensionError(shapes_message("attention keys/values", k.shape(), v.shape()));
    const std::size_t n = q.dim(0), d = q.dim(1);
    std::size_t rows = 0;
    if (k.rank() == 2 && n == 1 && k.dim(1) == d) {
        rows = k.dim(0);
    } else if (k.rank() == 3 && k.dim(0) == n && k.dim(2) == d) {
        rows = k.dim(1);
    } else {
        throw DimensionError(shapes_message("attention query/keys", q.shape(), k.shape()));
    }
    if (heads == 0 || d % heads != 0) {
        throw ConfigError("attention width " + std::to_string(d) + " is not divisible by " + std::to_string(heads) +
                          " heads");
    }
    return {n, rows, d, heads, d / heads};
}

// Softmax weights laid out [batch, heads, rows].
template <class T>
Buffer<T> attention_softmax(const T* q, const T* k, const AttentionLayout& L) {
    Buffer<T> weights(L.batch * L.heads * L.rows);
    const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(L.head_dim));
    for (std::size_t n = 0; n < L.batch; ++n) {
        for (std::size_t h = 0; h < L.heads; ++h) {
            T* wrow = weights.data() + (n * L.heads + h) * L.rows;
            const T* qh = q + n * L.width + h * L.head_dim;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t r = 0; r < L.rows; ++r) {
                const T* kh = k + (n * L.rows + r) * L.width + h * L.head_dim;
                T s = 0;
                for (std::size_t j = 0; j < L.head_dim; ++j) s += qh[j] * kh[j];
                wrow[r] = s * inv_sqrt;
                mx = std::max(mx, wrow[r]);
            }
            T z = 0;
            for (std::size_t r = 0; r < L.rows; ++r) {
                wrow[r] = std::exp(wrow[r] - mx);
                z += wrow[r];
            }
            for (std::size_t r = 0; r < L.rows; ++r) wrow[r] /= z;
        }
    }
    return weights;
}

}  // namespace detail

/// Scaled dot-product attention split over `heads` equal slices of the
/// feature axis. q is [N,d]; k and v are [N,R,d], or [R,d] when N == 1.
template <class T>
Tensor<T> scaled_dot_product_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads) {
    const auto L = detail::attention_layout(q, k, v, heads);
    auto weights = detail::attention_softmax(q.data().data(), k.data().data(), L);
    Buffer<T> out(L.batch * L.width, T{});
    for (std::size_t n = 0; n < L.batch; ++n) {
        for (std::size_t h = 0; h < L.heads; ++h) {
            const T* wrow = weights.data() + (n * L.heads + h) * L.rows;
            T* oh = out.data() + n * L.width + h * L.head_dim;
            for (std::size_t r = 0; r < L.rows; ++r) {
                const T* vh = v.data().data() + (n * L.rows + r) * L.width + h * L.head_dim;
                for (std::size_t j = 0; j < L.head_dim; ++j) oh[j] += wrow[r] * vh[j];
            }
        }
    }
    return detail::make_result<T>(
        "attention", q.shape(), std::move(out), {&q, &k, &v},
        [qn = q.node(), kn = k.node(), vn = v.node(), weights = std::move(weights), L](detail::Node<T>& self) {
            auto* gq = detail::grad_target(qn);
            auto* gk = detail::grad_target(kn);
            auto* gv = detail::grad_target(vn);
            const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(L.head_dim));
            Buffer<T> dw(L.rows);
            for (std::size_t n = 0; n < L.batch; ++n) {
                for (std::size_t h = 0; h < L.heads; ++h) {
                    const T* wrow = weights.data() + (n * L.heads + h) * L.rows;
                    const T* go = self.grad.data() + n * L.width + h * L.head_dim;
                    const T* qh = qn->data.data() + n * L.width + h * L.head_dim;
                    T dot = 0;
                    for (std::size_t r = 0; r < L.rows; ++r) {
                        const std::size_t off = (n * L.rows + r) * L.width + h * L.head_dim;
                        const T* vh = vn->data.data() + off;
                        T s = 0;
                        for (std::size_t j = 0; j < L.head_dim; ++j) s += go[j] * vh[j];
                        dw[r] = s;
                        dot += wrow[r] * s;
                        if (gv) {
                            for (std::size_t j = 0; j < L.head_dim; ++j) (*gv)[off + j] += wrow[r] * go[j];
                        }
                    }
                    for (std::size_t r = 0; r < L.rows; ++r) {
                        const T dscore = wrow[r] * (dw[r] - dot) * inv_sqrt;
                        const std::size_t off = (n * L.rows + r) * L.width + h * L.head_dim;
                        const T* kh = kn->data.data() + off;
                        if (gq) {
                            T* gqh = gq->data() + n * L.width + h * L.head_dim;
                            for (std::size_t j = 0; j < L.head_dim; ++j) gqh[j] += dscore * kh[j];
                        }
                        if (gk) {
                            for (std::size_t j = 0; j < L.head_dim; ++j) (*gk)[off + j] += dscore * qh[j];
                        }
                    }
                }
            }
        });
}

/// Multi-head attention with optional learned projections; `proj == nullptr`
/// selects identity projections.
template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                               const AttentionProjections<T>* proj) {
    if (!proj) return scaled_dot_product_attention(q, k, v, heads);
    const auto qp = linear(q, proj->wq, proj->bq);
    const auto kp = linear(k, proj->wk, proj->bk);
    const auto vp = linear(v, proj->wv, proj->bv);
    return linear(scaled_dot_product_attention(qp, kp, vp, heads), proj->wo, proj->bo);
}

/// Softmax weights [N, heads, R] for inspection; records no graph.
template <class T>
std::vector<T> attention_weights(const Tensor<T>& q, const Tensor<T>& k, std::size_t heads,
                                 const AttentionProjections<T>* proj) {
    NoGradGuard guard;
    Tensor<T> qp = q, kp = k;
    if (proj) {
        qp = linear(q, proj->wq, proj->bq);
        kp = linear(k, proj->wk, proj->bk);
    }
    const auto L = detail::attention_layout(qp, kp, kp, heads);
    const auto w = detail::attention_softmax(qp.data().data(), kp.data().data(), L);
    return {w.begin(), w.end()};
}

}  // namespace capiqa
