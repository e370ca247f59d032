#pragma once

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include "capiqa/core/parallel.hpp"
#include "capiqa/numerics/ops.hpp"

namespace capiqa {

namespace detail {

struct ConvGeometry {
    std::size_t cin, h, w, cout, kh, kw, stride, pad, ho, wo;

    std::size_t patch() const { return cin * kh * kw; }
    std::size_t positions() const { return ho * wo; }
};

// Output extent along one axis. Strided windows must reach the last real input
// row/column; a configuration that silently drops input is rejected.
inline std::size_t conv_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad, const char* axis) {
    if (in + 2 * pad < k) {
        throw ConfigError(std::string("conv2d: kernel larger than padded input along ") + axis);
    }
    const std::size_t out = (in + 2 * pad - k) / stride + 1;
    const std::size_t last_covered = (out - 1) * stride + k - 1;  // in padded coordinates
    if (last_covered + 1 < in + pad) {
        throw ConfigError(std::string("conv2d: output size along ") + axis + " is not integral (input " +
                          std::to_string(in) + ", kernel " + std::to_string(k) + ", stride " +
                          std::to_string(stride) + ", pad " + std::to_string(pad) + ")");
    }
    return out;
}

// Output columns [lo, hi) whose input column ox*stride + kx - pad lies inside [0, w).
inline std::pair<std::size_t, std::size_t> valid_columns(const ConvGeometry& g, std::size_t kx) {
    const long off = static_cast<long>(kx) - static_cast<long>(g.pad);
    const long s = static_cast<long>(g.stride);
    const long lo = off >= 0 ? 0 : (-off + s - 1) / s;
    const long last = static_cast<long>(g.w) - 1 - off;  // largest ox*s allowed
    const long hi = last < 0 ? 0 : std::min(static_cast<long>(g.wo), last / s + 1);
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(std::max(lo, hi))};
}

template <class T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
    const std::size_t P = g.positions();
    for (std::size_t ci = 0; ci < g.cin; ++ci) {
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                T* row = cols + ((ci * g.kh + ky) * g.kw + kx) * P;
                const auto [lo, hi] = valid_columns(g, kx);
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    T* dst = row + oy * g.wo;
                    if (iy < 0 || iy >= static_cast<long>(g.h)) {
                        std::fill_n(dst, g.wo, T{});
                        continue;
                    }
                    const T* src = x + (ci * g.h + static_cast<std::size_t>(iy)) * g.w + lo * g.stride + kx - g.pad;
                    std::fill_n(dst, lo, T{});
                    if (g.stride == 1) {
                        std::copy_n(src, hi - lo, dst + lo);
                    } else {
                        for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[(ox - lo) * g.stride];
                    }
                    std::fill(dst + hi, dst + g.wo, T{});
                }
            }
        }
    }
}

template <class T>
void col2im_add(const T* cols, const ConvGeometry& g, T* dx) {
    const std::size_t P = g.positions();
    for (std::size_t ci = 0; ci < g.cin; ++ci) {
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const T* row = cols + ((ci * g.kh + ky) * g.kw + kx) * P;
                const auto [lo, hi] = valid_columns(g, kx);
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                    T* dst = dx + (ci * g.h + static_cast<std::size_t>(iy)) * g.w + lo * g.stride + kx - g.pad;
                    const T* src = row + oy * g.wo;
                    if (g.stride == 1) {
                        for (std::size_t ox = lo; ox < hi; ++ox) dst[ox - lo] += src[ox];
                    } else {
                        for (std::size_t ox = lo; ox < hi; ++ox) dst[(ox - lo) * g.stride] += src[ox];
                    }
                }
            }
        }
    }
}

// Fixed GEMM partitioning keeps results identical for every thread count.
inline constexpr std::size_t kRowChunk = 32;
inline constexpr std::size_t kColChunk = 512;

}  // namespace detail

/// Cross-correlation of x [C_in,H,W] with kernel [C_out,C_in,kh,kw], plus an
/// optional per-output-channel bias.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias, std::size_t stride,
                 std::size_t pad) {
    if (x.rank() != 3 || kernel.rank() != 4 || kernel.dim(1) != x.dim(0)) {
        throw DimensionError(detail::shapes_message("conv2d", x.shape(), kernel.shape()));
    }
    if (stride == 0) throw ConfigError("conv2d: stride must be positive");
    detail::ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), kernel.dim(0), kernel.dim(2), kernel.dim(3), stride, pad, 0, 0};
    g.ho = detail::conv_extent(g.h, g.kh, stride, pad, "height");
    g.wo = detail::conv_extent(g.w, g.kw, stride, pad, "width");
    if (bias.defined() && bias.numel() != g.cout) {
        throw DimensionError(detail::shapes_message("conv2d bias", kernel.shape(), bias.shape()));
    }
    const std::size_t K = g.patch();
    const std::size_t P = g.positions();

    auto cols = std::make_shared<Buffer<T>>(K * P);
    detail::im2col(x.data().data(), g, cols->data());
    Buffer<T> y(g.cout * P);
    {
        detail::ConstMatrixMap<T> W(kernel.data().data(), g.cout, K);
        detail::ConstMatrixMap<T> C(cols->data(), K, P);
        detail::MatrixMap<T> Y(y.data(), g.cout, P);
        parallel_chunks(g.cout, detail::kRowChunk, [&](std::size_t r0, std::size_t r1) {
            Y.middleRows(r0, r1 - r0).noalias() = W.middleRows(r0, r1 - r0) * C;
        });
        if (bias.defined()) {
            for (std::size_t c = 0; c < g.cout; ++c) Y.row(c).array() += bias[c];
        }
    }
    return detail::make_result<T>(
        "conv2d", {g.cout, g.ho, g.wo}, std::move(y), {&x, &kernel, &bias},
        [xn = x.node(), kn = kernel.node(), bn = bias.node(), cols, g, K, P](detail::Node<T>& self) {
            detail::ConstMatrixMap<T> dY(self.grad.data(), g.cout, P);
            if (auto* gk = detail::grad_target(kn)) {
                detail::ConstMatrixMap<T> C(cols->data(), K, P);
                detail::MatrixMap<T> dW(gk->data(), g.cout, K);
                parallel_chunks(g.cout, detail::kRowChunk, [&](std::size_t r0, std::size_t r1) {
                    dW.middleRows(r0, r1 - r0).noalias() += dY.middleRows(r0, r1 - r0) * C.transpose();
                });
            }
            if (auto* gb = detail::grad_target(bn)) {
                detail::VectorMap<T>(gb->data(), g.cout) += dY.rowwise().sum();
            }
            if (auto* gx = detail::grad_target(xn)) {
                detail::ConstMatrixMap<T> W(kn->data.data(), g.cout, K);
                Buffer<T> dcols(K * P);
                detail::MatrixMap<T> dC(dcols.data(), K, P);
                parallel_chunks(P, detail::kColChunk, [&](std::size_t c0, std::size_t c1) {
                    dC.middleCols(c0, c1 - c0).noalias() = W.transpose() * dY.middleCols(c0, c1 - c0);
                });
                detail::col2im_add(dcols.data(), g, gx->data());
            }
        });
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride, std::size_t pad) {
    return conv2d(x, kernel, Tensor<T>{}, stride, pad);
}

/// Transposed convolution with kernel [C_in,C_out,k,k] and stride k, so
/// windows never overlap: [C_in,H,W] -> [C_out,kH,kW].
template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias) {
    if (x.rank() != 3 || kernel.rank() != 4 || kernel.dim(0) != x.dim(0) || kernel.dim(2) != kernel.dim(3)) {
        throw DimensionError(detail::shapes_message("conv_transpose2d", x.shape(), kernel.shape()));
    }
    const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::size_t cout = kernel.dim(1), k = kernel.dim(2);
    if (bias.defined() && bias.numel() != cout) {
        throw DimensionError(detail::shapes_message("conv_transpose2d bias", kernel.shape(), bias.shape()));
    }
    const std::size_t P = h * w;
    const std::size_t R = cout * k * k;
    const std::size_t ho = h * k, wo = w * k;

    Buffer<T> z(R * P);
    detail::ConstMatrixMap<T> Km(kernel.data().data(), cin, R);
    detail::ConstMatrixMap<T> X(x.data().data(), cin, P);
    detail::MatrixMap<T>(z.data(), R, P).noalias() = Km.transpose() * X;

    Buffer<T> y(cout * ho * wo);
    for (std::size_t co = 0; co < cout; ++co) {
        const T b = bias.defined() ? bias[co] : T{};
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                const T* src = z.data() + ((co * k + ky) * k + kx) * P;
                for (std::size_t iy = 0; iy < h; ++iy) {
                    T* dst = y.data() + (co * ho + iy * k + ky) * wo + kx;
                    for (std::size_t ix = 0; ix < w; ++ix) dst[ix * k] = src[iy * w + ix] + b;
                }
            }
        }
    }
    return detail::make_result<T>(
        "conv_transpose2d", {cout, ho, wo}, std::move(y), {&x, &kernel, &bias},
        [xn = x.node(), kn = kernel.node(), bn = bias.node(), cin, cout, k, h, w, P, R, ho, wo](detail::Node<T>& self) {
            Buffer<T> dz(R * P);
            for (std::size_t co = 0; co < cout; ++co) {
                for (std::size_t ky = 0; ky < k; ++ky) {
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        T* dst = dz.data() + ((co * k + ky) * k + kx) * P;
                        for (std::size_t iy = 0; iy < h; ++iy) {
                            const T* src = self.grad.data() + (co * ho + iy * k + ky) * wo + kx;
                            for (std::size_t ix = 0; ix < w; ++ix) dst[iy * w + ix] = src[ix * k];
                        }
                    }
                }
            }
            detail::ConstMatrixMap<T> dZ(dz.data(), R, P);
            if (auto* gx = detail::grad_target(xn)) {
                detail::ConstMatrixMap<T> Km(kn->data.data(), cin, R);
                detail::MatrixMap<T>(gx->data(), cin, P).noalias() += Km * dZ;
            }
            if (auto* gk = detail::grad_target(kn)) {
                detail::ConstMatrixMap<T> X(xn->data.data(), cin, P);
                detail::MatrixMap<T>(gk->data(), cin, R).noalias() += X * dZ.transpose();
            }
            if (auto* gb = detail::grad_target(bn)) {
                for (std::size_t co = 0; co < cout; ++co) {
                    T s = 0;
                    const T* src = self.grad.data() + co * ho * wo;
                    for (std::size_t i = 0; i < ho * wo; ++i) s += src[i];
                    (*gb)[co] += s;
                }
            }
        });
}

}  // namespace capiqa
