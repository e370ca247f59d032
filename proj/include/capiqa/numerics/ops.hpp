#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "capiqa/numerics/tensor.hpp"

namespace capiqa {

namespace detail {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;
template <class T>
using VectorMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <class T>
using ConstVectorMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

inline std::string shapes_message(const char* op, const Shape& a, const Shape& b) {
    return std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b);
}

}  // namespace detail

/// y = x W^T + b over the last axis of x. x may carry any leading dimensions.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
    if (weight.rank() != 2 || x.shape().back() != weight.dim(1)) {
        throw DimensionError(detail::shapes_message("linear", x.shape(), weight.shape()));
    }
    const std::size_t in = weight.dim(1);
    const std::size_t out = weight.dim(0);
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out)) {
        throw DimensionError(detail::shapes_message("linear bias", weight.shape(), bias.shape()));
    }
    const std::size_t rows = x.numel() / in;

    Buffer<T> y(rows * out);
    {
        detail::ConstMatrixMap<T> X(x.data().data(), rows, in);
        detail::ConstMatrixMap<T> W(weight.data().data(), out, in);
        detail::MatrixMap<T> Y(y.data(), rows, out);
        Y.noalias() = X * W.transpose();
        if (bias.defined()) {
            detail::ConstVectorMap<T> b(bias.data().data(), out);
            Y.rowwise() += b.transpose();
        }
    }
    Shape shape = x.shape();
    shape.back() = out;
    return detail::make_result<T>(
        "linear", std::move(shape), std::move(y), {&x, &weight, &bias},
        [xn = x.node(), wn = weight.node(), bn = bias.node(), rows, in, out](detail::Node<T>& self) {
            detail::ConstMatrixMap<T> dY(self.grad.data(), rows, out);
            if (auto* gx = detail::grad_target(xn)) {
                detail::ConstMatrixMap<T> W(wn->data.data(), out, in);
                detail::MatrixMap<T>(gx->data(), rows, in).noalias() += dY * W;
            }
            if (auto* gw = detail::grad_target(wn)) {
                detail::ConstMatrixMap<T> X(xn->data.data(), rows, in);
                detail::MatrixMap<T>(gw->data(), out, in).noalias() += dY.transpose() * X;
            }
            if (auto* gb = detail::grad_target(bn)) {
                detail::VectorMap<T>(gb->data(), out) += dY.colwise().sum().transpose();
            }
        });
}

enum class Activation { identity, relu, tanh, sigmoid };

template <class T>
Tensor<T> activation(Activation kind, const Tensor<T>& x) {
    const auto in = x.data();
    Buffer<T> y(in.size());
    switch (kind) {
        case Activation::identity:
            y.assign(in.begin(), in.end());
            break;
        case Activation::relu:
            for (std::size_t i = 0; i < in.size(); ++i) y[i] = in[i] > T{0} ? in[i] : T{0};
            break;
        case Activation::tanh:
            for (std::size_t i = 0; i < in.size(); ++i) y[i] = std::tanh(in[i]);
            break;
        case Activation::sigmoid:
            for (std::size_t i = 0; i < in.size(); ++i) y[i] = T{1} / (T{1} + std::exp(-in[i]));
            break;
    }
    return detail::make_result<T>("activation", x.shape(), std::move(y), {&x}, [kind, xn = x.node()](detail::Node<T>& self) {
        auto* gx = detail::grad_target(xn);
        if (!gx) return;
        const auto& g = self.grad;
        const auto& yv = self.data;
        for (std::size_t i = 0; i < g.size(); ++i) {
            T d = T{1};
            switch (kind) {
                case Activation::identity: break;
                case Activation::relu: d = xn->data[i] > T{0} ? T{1} : T{0}; break;
                case Activation::tanh: d = T{1} - yv[i] * yv[i]; break;
                case Activation::sigmoid: d = yv[i] * (T{1} - yv[i]); break;
            }
            (*gx)[i] += g[i] * d;
        }
    });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) { return activation(Activation::relu, x); }
template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) { return activation(Activation::sigmoid, x); }
template <class T>
Tensor<T> tanh(const Tensor<T>& x) { return activation(Activation::tanh, x); }

/// Per-row standardization over the last axis, then gain * x_hat + bias.
/// Uses the population variance.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
    const std::size_t m = x.shape().back();
    if (gain.numel() != m || bias.numel() != m) {
        throw DimensionError(detail::shapes_message("layer_norm", x.shape(), gain.shape()));
    }
    const std::size_t rows = x.numel() / m;
    const auto in = x.data();
    Buffer<T> y(in.size());
    Buffer<T> xhat(in.size());
    Buffer<T> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = in.data() + r * m;
        T mean = 0;
        for (std::size_t j = 0; j < m; ++j) mean += row[j];
        mean /= static_cast<T>(m);
        T var = 0;
        for (std::size_t j = 0; j < m; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<T>(m);
        const T is = T{1} / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < m; ++j) {
            const T h = (row[j] - mean) * is;
            xhat[r * m + j] = h;
            y[r * m + j] = h * gain[j] + bias[j];
        }
    }
    return detail::make_result<T>(
        "layer_norm", x.shape(), std::move(y), {&x, &gain, &bias},
        [xn = x.node(), gn = gain.node(), bn = bias.node(), xhat = std::move(xhat), inv_std = std::move(inv_std),
         rows, m](detail::Node<T>& self) {
            const auto& g = self.grad;
            auto* gx = detail::grad_target(xn);
            auto* gg = detail::grad_target(gn);
            auto* gb = detail::grad_target(bn);
            Buffer<T> dxhat(m);
            for (std::size_t r = 0; r < rows; ++r) {
                const T* gr = g.data() + r * m;
                const T* hr = xhat.data() + r * m;
                if (gg) for (std::size_t j = 0; j < m; ++j) (*gg)[j] += gr[j] * hr[j];
                if (gb) for (std::size_t j = 0; j < m; ++j) (*gb)[j] += gr[j];
                if (!gx) continue;
                T sum_d = 0;
                T sum_dh = 0;
                for (std::size_t j = 0; j < m; ++j) {
                    dxhat[j] = gr[j] * gn->data[j];
                    sum_d += dxhat[j];
                    sum_dh += dxhat[j] * hr[j];
                }
                const T inv_m = T{1} / static_cast<T>(m);
                for (std::size_t j = 0; j < m; ++j) {
                    (*gx)[r * m + j] += inv_std[r] * (dxhat[j] - inv_m * sum_d - hr[j] * inv_m * sum_dh);
                }
            }
        });
}

/// Dynamic Tanh: tanh(alpha * x) * w + b, per channel of the last axis.
template <class T>
Tensor<T> dyt(const Tensor<T>& x, const Tensor<T>& alpha, const Tensor<T>& w, const Tensor<T>& b) {
    const std::size_t m = x.shape().back();
    if (alpha.numel() != m || w.numel() != m || b.numel() != m) {
        throw DimensionError(detail::shapes_message("dyt", x.shape(), alpha.shape()));
    }
    const auto in = x.data();
    Buffer<T> th(in.size());
    Buffer<T> y(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) {
        const std::size_t j = i % m;
        th[i] = std::tanh(alpha[j] * in[i]);
        y[i] = th[i] * w[j] + b[j];
    }
    return detail::make_result<T>(
        "dyt", x.shape(), std::move(y), {&x, &alpha, &w, &b},
        [xn = x.node(), an = alpha.node(), wn = w.node(), bn = b.node(), th = std::move(th), m](detail::Node<T>& self) {
            auto* gx = detail::grad_target(xn);
            auto* ga = detail::grad_target(an);
            auto* gw = detail::grad_target(wn);
            auto* gb = detail::grad_target(bn);
            const auto& g = self.grad;
            for (std::size_t i = 0; i < g.size(); ++i) {
                const std::size_t j = i % m;
                const T dth = g[i] * wn->data[j] * (T{1} - th[i] * th[i]);
                if (gx) (*gx)[i] += dth * an->data[j];
                if (ga) (*ga)[j] += dth * xn->data[i];
                if (gw) (*gw)[j] += g[i] * th[i];
                if (gb) (*gb)[j] += g[i];
            }
        });
}

/// [C,H,W] -> [C], mean over spatial positions.
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& z) {
    if (z.rank() != 3) throw DimensionError("global_avg_pool expects [C,H,W], got " + to_string(z.shape()));
    const std::size_t c = z.dim(0);
    const std::size_t hw = z.dim(1) * z.dim(2);
    Buffer<T> f(c);
    for (std::size_t k = 0; k < c; ++k) {
        T s = 0;
        for (std::size_t i = 0; i < hw; ++i) s += z[k * hw + i];
        f[k] = s / static_cast<T>(hw);
    }
    return detail::make_result<T>("global_avg_pool", {c}, std::move(f), {&z},
                                  [zn = z.node(), c, hw](detail::Node<T>& self) {
                                      auto* gz = detail::grad_target(zn);
                                      if (!gz) return;
                                      const T inv = T{1} / static_cast<T>(hw);
                                      for (std::size_t k = 0; k < c; ++k) {
                                          const T g = self.grad[k] * inv;
                                          for (std::size_t i = 0; i < hw; ++i) (*gz)[k * hw + i] += g;
                                      }
                                  });
}

/// Elementwise sum with broadcasting over axes of extent 1. Both operands must
/// have equal rank.
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() == b.shape()) {
        Buffer<T> y(a.numel());
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
        return detail::make_result<T>("add", a.shape(), std::move(y), {&a, &b},
                                      [an = a.node(), bn = b.node()](detail::Node<T>& self) {
                                          for (auto& n : {an, bn}) {
                                              if (auto* g = detail::grad_target(n)) {
                                                  for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
                                              }
                                          }
                                      });
    }
    if (a.rank() != b.rank()) throw DimensionError(detail::shapes_message("add", a.shape(), b.shape()));
    const std::size_t rank = a.rank();
    Shape out_shape(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        const auto da = a.dim(i), db = b.dim(i);
        if (da != db && da != 1 && db != 1) throw DimensionError(detail::shapes_message("add", a.shape(), b.shape()));
        out_shape[i] = std::max(da, db);
    }
    // Strides of each operand into the output index space (0 on broadcast axes).
    auto strides_for = [&](const Shape& s) {
        std::vector<std::size_t> st(rank);
        std::size_t acc = 1;
        for (std::size_t i = rank; i-- > 0;) {
            st[i] = s[i] == 1 ? 0 : acc;
            acc *= s[i];
        }
        return st;
    };
    const auto sa = strides_for(a.shape());
    const auto sb = strides_for(b.shape());
    const std::size_t total = numel(out_shape);
    std::vector<std::size_t> ia(total), ib(total);
    std::vector<std::size_t> idx(rank, 0);
    for (std::size_t flat = 0; flat < total; ++flat) {
        std::size_t oa = 0, ob = 0;
        for (std::size_t i = 0; i < rank; ++i) {
            oa += idx[i] * sa[i];
            ob += idx[i] * sb[i];
        }
        ia[flat] = oa;
        ib[flat] = ob;
        for (std::size_t i = rank; i-- > 0;) {
            if (++idx[i] < out_shape[i]) break;
            idx[i] = 0;
        }
    }
    Buffer<T> y(total);
    for (std::size_t i = 0; i < total; ++i) y[i] = a[ia[i]] + b[ib[i]];
    return detail::make_result<T>("add_broadcast", std::move(out_shape), std::move(y), {&a, &b},
                                  [an = a.node(), bn = b.node(), ia = std::move(ia), ib = std::move(ib)](detail::Node<T>& self) {
                                      if (auto* g = detail::grad_target(an)) {
                                          for (std::size_t i = 0; i < ia.size(); ++i) (*g)[ia[i]] += self.grad[i];
                                      }
                                      if (auto* g = detail::grad_target(bn)) {
                                          for (std::size_t i = 0; i < ib.size(); ++i) (*g)[ib[i]] += self.grad[i];
                                      }
                                  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
    Buffer<T> y(x.numel());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * factor;
    return detail::make_result<T>("scale", x.shape(), std::move(y), {&x}, [xn = x.node(), factor](detail::Node<T>& self) {
        if (auto* g = detail::grad_target(xn)) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * factor;
        }
    });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (numel(shape) != x.numel()) throw DimensionError(detail::shapes_message("reshape", x.shape(), shape));
    return detail::make_result<T>("reshape", std::move(shape), x.node()->data, {&x}, [xn = x.node()](detail::Node<T>& self) {
        if (auto* g = detail::grad_target(xn)) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
        }
    });
}

/// Concatenation along `axis`; all other extents must agree.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw DimensionError("concat of zero tensors");
    const Shape& ref = parts.front().shape();
    if (axis >= ref.size()) throw DimensionError("concat axis out of range for " + to_string(ref));
    Shape out_shape = ref;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        if (p.rank() != ref.size()) throw DimensionError(detail::shapes_message("concat", ref, p.shape()));
        for (std::size_t i = 0; i < ref.size(); ++i) {
            if (i != axis && p.dim(i) != ref[i]) throw DimensionError(detail::shapes_message("concat", ref, p.shape()));
        }
        out_shape[axis] += p.dim(axis);
    }
    std::size_t outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
    const std::size_t out_block = out_shape[axis] * inner;

    Buffer<T> y(numel(out_shape));
    std::vector<std::size_t> offsets;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        offsets.push_back(offset);
        const std::size_t block = p.dim(axis) * inner;
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(p.data().data() + o * block, block, y.data() + o * out_block + offset);
        }
        offset += block;
    }
    std::vector<std::shared_ptr<detail::Node<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    return detail::make_result<T>("concat", std::move(out_shape), std::move(y), parts,
                                  [nodes, offsets, outer, out_block, axis, inner](detail::Node<T>& self) {
                                      for (std::size_t k = 0; k < nodes.size(); ++k) {
                                          auto* g = detail::grad_target(nodes[k]);
                                          if (!g) continue;
                                          const std::size_t block = nodes[k]->shape[axis] * inner;
                                          for (std::size_t o = 0; o < outer; ++o) {
                                              const T* src = self.grad.data() + o * out_block + offsets[k];
                                              T* dst = g->data() + o * block;
                                              for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
                                          }
                                      }
                                  });
}

/// Stacks equally shaped tensors along a new leading axis.
template <class T>
Tensor<T> stack(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw DimensionError("stack of zero tensors");
    std::vector<Tensor<T>> lifted;
    lifted.reserve(parts.size());
    for (const auto& p : parts) {
        Shape s = p.shape();
        s.insert(s.begin(), 1);
        lifted.push_back(reshape(p, std::move(s)));
    }
    return concat(lifted, 0);
}

/// Rows [start, start+length) of the leading axis.
template <class T>
Tensor<T> narrow(const Tensor<T>& x, std::size_t start, std::size_t length) {
    if (length == 0 || start + length > x.dim(0)) {
        throw DimensionError("narrow [" + std::to_string(start) + "," + std::to_string(start + length) +
                             ") out of range for " + to_string(x.shape()));
    }
    const std::size_t inner = x.numel() / x.dim(0);
    Shape shape = x.shape();
    shape[0] = length;
    Buffer<T> y(x.data().begin() + start * inner, x.data().begin() + (start + length) * inner);
    return detail::make_result<T>("narrow", std::move(shape), std::move(y), {&x},
                                  [xn = x.node(), offset = start * inner](detail::Node<T>& self) {
                                      if (auto* g = detail::grad_target(xn)) {
                                          for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[offset + i] += self.grad[i];
                                      }
                                  });
}

/// Sum of all elements, as a [1] tensor.
template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    T s = 0;
    for (const T v : x.data()) s += v;
    return detail::make_result<T>("sum", {1}, {s}, {&x}, [xn = x.node()](detail::Node<T>& self) {
        if (auto* g = detail::grad_target(xn)) {
            for (auto& v : *g) v += self.grad[0];
        }
    });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw DimensionError(detail::shapes_message("mul", a.shape(), b.shape()));
    Buffer<T> y(a.numel());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
    return detail::make_result<T>("mul", a.shape(), std::move(y), {&a, &b},
                                  [an = a.node(), bn = b.node()](detail::Node<T>& self) {
                                      if (auto* g = detail::grad_target(an)) {
                                          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bn->data[i];
                                      }
                                      if (auto* g = detail::grad_target(bn)) {
                                          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * an->data[i];
                                      }
                                  });
}

}  // namespace capiqa
