#pragma once

#include "duin/graph.hpp"
#include "duin/rng.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace duin {

namespace detail {

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.dims()) +
                                    " vs " + shape_str(b.dims()));
    }
}

}  // namespace detail

template <typename T>
Var<T> constant(Tensor<T> value) {
    return Var<T>(std::move(value), false);
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape("add", a.value(), b.value());
    Tensor<T> out = a.value();
    out.vec() += b.value().vec();
    return make_op<T>("add", std::move(out), {a, b}, [a, b](Node<T>& n) {
        if (a.requires_grad()) a.node()->accumulate(n.grad);
        if (b.requires_grad()) b.node()->accumulate(n.grad);
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape("sub", a.value(), b.value());
    Tensor<T> out = a.value();
    out.vec() -= b.value().vec();
    return make_op<T>("sub", std::move(out), {a, b}, [a, b](Node<T>& n) {
        if (a.requires_grad()) a.node()->accumulate(n.grad);
        if (b.requires_grad()) b.node()->grad_buffer().vec() -= n.grad.vec();
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape("mul", a.value(), b.value());
    Tensor<T> out = a.value();
    out.vec().array() *= b.value().vec().array();
    return make_op<T>("mul", std::move(out), {a, b}, [a, b](Node<T>& n) {
        if (a.requires_grad())
            a.node()->grad_buffer().vec().array() += n.grad.vec().array() * b.value().vec().array();
        if (b.requires_grad())
            b.node()->grad_buffer().vec().array() += n.grad.vec().array() * a.value().vec().array();
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
    Tensor<T> out = a.value();
    out.vec() *= s;
    return make_op<T>("scale", std::move(out), {a}, [a, s](Node<T>& n) {
        if (a.requires_grad()) a.node()->grad_buffer().vec() += s * n.grad.vec();
    });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T c) {
    Tensor<T> out = a.value();
    out.vec().array() += c;
    return make_op<T>("add_scalar", std::move(out), {a}, [a](Node<T>& n) {
        if (a.requires_grad()) a.node()->accumulate(n.grad);
    });
}

/// a + t for a fixed tensor t (no gradient into t). Forward of the
/// straight-through estimator is add_constant(z_c, z_q - z_c).
template <typename T>
Var<T> add_constant(const Var<T>& a, const Tensor<T>& t) {
    detail::require_same_shape("add_constant", a.value(), t);
    Tensor<T> out = a.value();
    out.vec() += t.vec();
    return make_op<T>("add_constant", std::move(out), {a}, [a](Node<T>& n) {
        if (a.requires_grad()) a.node()->accumulate(n.grad);
    });
}

template <typename T>
Var<T> sub_constant(const Var<T>& a, const Tensor<T>& t) {
    detail::require_same_shape("sub_constant", a.value(), t);
    Tensor<T> out = a.value();
    out.vec() -= t.vec();
    return make_op<T>("sub_constant", std::move(out), {a}, [a](Node<T>& n) {
        if (a.requires_grad()) a.node()->accumulate(n.grad);
    });
}

template <typename T>
Var<T> reshape(const Var<T>& a, std::vector<Index> dims) {
    Tensor<T> out = a.value().reshaped(std::move(dims));
    return make_op<T>("reshape", std::move(out), {a}, [a](Node<T>& n) {
        if (a.requires_grad()) a.node()->grad_buffer().vec() += n.grad.vec();
    });
}

/// Value copy with no graph edge; gradients stop here.
template <typename T>
Var<T> detach(const Var<T>& a) {
    return Var<T>(a.value(), false);
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
    const Tensor<T>& x = a.value();
    Tensor<T> out({x.dim(1), x.dim(0)});
    out.mat() = x.mat().transpose();
    return make_op<T>("transpose", std::move(out), {a}, [a](Node<T>& n) {
        if (a.requires_grad())
            a.node()->grad_buffer().mat() += n.grad.mat(n.value.dim(0), n.value.dim(1)).transpose();
    });
}

template <typename T>
Var<T> slice_rows(const Var<T>& a, Index begin, Index count) {
    const Tensor<T>& x = a.value();
    if (begin < 0 || begin + count > x.dim(0)) {
        throw std::invalid_argument("slice_rows: range out of bounds");
    }
    const Index cols = x.size() / x.dim(0);
    std::vector<Index> odims = x.dims();
    odims[0] = count;
    Tensor<T> out(odims);
    out.mat(count, cols) = x.mat(x.dim(0), cols).middleRows(begin, count);
    return make_op<T>("slice_rows", std::move(out), {a}, [a, begin, count, cols](Node<T>& n) {
        if (a.requires_grad()) {
            a.node()->grad_buffer().mat(a.value().dim(0), cols).middleRows(begin, count) +=
                n.grad.mat(count, cols);
        }
    });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    const Index cols = parts[0].value().size() / parts[0].value().dim(0);
    Index rows = 0;
    for (const Var<T>& p : parts) {
        if (p.value().size() / p.value().dim(0) != cols)
            throw std::invalid_argument("concat_rows: column mismatch");
        rows += p.value().dim(0);
    }
    std::vector<Index> odims = parts[0].value().dims();
    odims[0] = rows;
    Tensor<T> out(odims);
    Index r = 0;
    for (const Var<T>& p : parts) {
        out.mat(rows, cols).middleRows(r, p.value().dim(0)) =
            p.value().mat(p.value().dim(0), cols);
        r += p.value().dim(0);
    }
    return make_op<T>("concat_rows", std::move(out), parts, [parts, rows, cols](Node<T>& n) {
        Index r = 0;
        for (const Var<T>& p : parts) {
            const Index pr = p.value().dim(0);
            if (p.requires_grad()) {
                p.node()->grad_buffer().mat(pr, cols) += n.grad.mat(rows, cols).middleRows(r, pr);
            }
            r += pr;
        }
    });
}

template <typename T>
Var<T> slice_cols(const Var<T>& a, Index begin, Index count) {
    const Tensor<T>& x = a.value();
    const Index rows = x.dim(0), cols = x.size() / rows;
    if (begin < 0 || begin + count > cols) {
        throw std::invalid_argument("slice_cols: range out of bounds");
    }
    Tensor<T> out({rows, count});
    out.mat() = x.mat(rows, cols).middleCols(begin, count);
    return make_op<T>("slice_cols", std::move(out), {a}, [a, begin, count, rows, cols](Node<T>& n) {
        if (a.requires_grad()) {
            a.node()->grad_buffer().mat(rows, cols).middleCols(begin, count) += n.grad.mat();
        }
    });
}

template <typename T>
Var<T> gather_rows(const Var<T>& a, std::vector<Index> rows) {
    const Tensor<T>& x = a.value();
    const Index cols = x.size() / x.dim(0);
    for (Index r : rows) {
        if (r < 0 || r >= x.dim(0)) throw std::invalid_argument("gather_rows: index out of range");
    }
    Tensor<T> out({static_cast<Index>(rows.size()), cols});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.mat().row(static_cast<Index>(i)) = x.mat(x.dim(0), cols).row(rows[i]);
    }
    return make_op<T>("gather_rows", std::move(out), {a},
                      [a, rows = std::move(rows), cols](Node<T>& n) {
                          if (!a.requires_grad()) return;
                          auto g = a.node()->grad_buffer().mat(a.value().dim(0), cols);
                          for (std::size_t i = 0; i < rows.size(); ++i) {
                              g.row(rows[i]) += n.grad.mat().row(static_cast<Index>(i));
                          }
                      });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
    Tensor<T> out = Tensor<T>::scalar(a.value().vec().sum());
    return make_op<T>("sum", std::move(out), {a}, [a](Node<T>& n) {
        if (a.requires_grad()) a.node()->grad_buffer().vec().array() += n.grad[0];
    });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
    const T inv = T(1) / static_cast<T>(a.value().size());
    Tensor<T> out = Tensor<T>::scalar(a.value().vec().sum() * inv);
    return make_op<T>("mean", std::move(out), {a}, [a, inv](Node<T>& n) {
        if (a.requires_grad()) a.node()->grad_buffer().vec().array() += n.grad[0] * inv;
    });
}

template <typename T>
Var<T> sum_squares(const Var<T>& a) {
    Tensor<T> out = Tensor<T>::scalar(a.value().vec().squaredNorm());
    return make_op<T>("sum_squares", std::move(out), {a}, [a](Node<T>& n) {
        if (a.requires_grad())
            a.node()->grad_buffer().vec() += (T(2) * n.grad[0]) * a.value().vec();
    });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    const Tensor<T>& A = a.value();
    const Tensor<T>& B = b.value();
    if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) {
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(A.dims()) + " x " +
                                    shape_str(B.dims()));
    }
    Tensor<T> out({A.dim(0), B.dim(1)});
    out.mat().noalias() = A.mat() * B.mat();
    return make_op<T>("matmul", std::move(out), {a, b}, [a, b](Node<T>& n) {
        const Index m = a.value().dim(0), k = a.value().dim(1), p = b.value().dim(1);
        auto g = n.grad.mat(m, p);
        if (a.requires_grad())
            a.node()->grad_buffer().mat(m, k).noalias() += g * b.value().mat().transpose();
        if (b.requires_grad())
            b.node()->grad_buffer().mat(k, p).noalias() += a.value().mat().transpose() * g;
    });
}

template <typename T>
Var<T> add_rowwise(const Var<T>& x, const Var<T>& bias) {
    const Tensor<T>& X = x.value();
    const Index rows = X.dim(0), cols = X.size() / rows;
    if (bias.value().size() != cols) {
        throw std::invalid_argument("add_rowwise: bias length " +
                                    std::to_string(bias.value().size()) + " vs row width " +
                                    std::to_string(cols));
    }
    Tensor<T> out = X;
    out.mat(rows, cols).rowwise() += bias.value().vec().transpose();
    return make_op<T>("add_rowwise", std::move(out), {x, bias}, [x, bias, rows, cols](Node<T>& n) {
        if (x.requires_grad()) x.node()->accumulate(n.grad);
        if (bias.requires_grad())
            bias.node()->grad_buffer().vec() += n.grad.mat(rows, cols).colwise().sum().transpose();
    });
}

/// x [R x in] . w [in x out] (+ bias [out]).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w) {
    return matmul(x, w);
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
    return add_rowwise(matmul(x, w), bias);
}

/// Per-time-step channel map: x [P, C, L], w [C, D], b [D] -> [P, D, L].
/// This is the spatial encoder's input projection; w is the matrix whose
/// row magnitudes drive the channel contribution scores.
template <typename T>
Var<T> channel_project(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
    const Tensor<T>& X = x.value();
    if (X.rank() != 3) throw std::invalid_argument("channel_project: want [P, C, L] input");
    const Index P = X.dim(0), C = X.dim(1), L = X.dim(2);
    const Tensor<T>& W = w.value();
    if (W.rank() != 2 || W.dim(0) != C) {
        throw std::invalid_argument("channel_project: weight " + shape_str(W.dims()) +
                                    " vs channels " + std::to_string(C));
    }
    const Index D = W.dim(1);
    if (bias.value().size() != D) throw std::invalid_argument("channel_project: bias size");
    Tensor<T> out({P, D, L});
    for (Index p = 0; p < P; ++p) {
        out.item_mat(p, D, L).noalias() = W.mat().transpose() * X.item_mat(p, C, L);
        out.item_mat(p, D, L).colwise() += bias.value().vec();
    }
    return make_op<T>(
        "channel_project", std::move(out), {x, w, bias}, [x, w, bias, P, C, D, L](Node<T>& n) {
            for (Index p = 0; p < P; ++p) {
                auto g = n.grad.item_mat(p, D, L);
                if (x.requires_grad())
                    x.node()->grad_buffer().item_mat(p, C, L).noalias() += w.value().mat() * g;
                if (w.requires_grad())
                    w.node()->grad_buffer().mat().noalias() +=
                        x.value().item_mat(p, C, L) * g.transpose();
                if (bias.requires_grad()) bias.node()->grad_buffer().vec() += g.rowwise().sum();
            }
        });
}

// ---------------------------------------------------------------------------
// Convolutions (im2col + GEMM)
// ---------------------------------------------------------------------------

namespace detail {

// cols[(ci*k + j), b*Lo + t] = x[b, ci, t*s + j - p]  (zero outside).
template <typename T>
Tensor<T> im2col(const Tensor<T>& x, Index B, Index Ci, Index L, Index k, Index s, Index p,
                 Index Lo) {
    Tensor<T> cols({Ci * k, B * Lo});
    auto cm = cols.mat();
    cm.setZero();
    for (Index b = 0; b < B; ++b) {
        auto xm = x.item_mat(b, Ci, L);
        for (Index t = 0; t < Lo; ++t) {
            const Index base = t * s - p;
            for (Index j = 0; j < k; ++j) {
                const Index src = base + j;
                if (src < 0 || src >= L) continue;
                for (Index ci = 0; ci < Ci; ++ci) {
                    cm(ci * k + j, b * Lo + t) = xm(ci, src);
                }
            }
        }
    }
    return cols;
}

// Adjoint of im2col: scatter-add columns back into [B, Ci, L].
template <typename T>
void col2im_add(const Tensor<T>& cols, Index B, Index Ci, Index L, Index k, Index s, Index p,
                Index Lo, Tensor<T>& x_out) {
    auto cm = cols.mat(Ci * k, B * Lo);
    for (Index b = 0; b < B; ++b) {
        auto xm = x_out.item_mat(b, Ci, L);
        for (Index t = 0; t < Lo; ++t) {
            const Index base = t * s - p;
            for (Index j = 0; j < k; ++j) {
                const Index dst = base + j;
                if (dst < 0 || dst >= L) continue;
                for (Index ci = 0; ci < Ci; ++ci) {
                    xm(ci, dst) += cm(ci * k + j, b * Lo + t);
                }
            }
        }
    }
}

template <typename T>
Tensor<T> stack_items(const Tensor<T>& x, Index B, Index rows, Index cols) {
    Tensor<T> out({rows, B * cols});
    for (Index b = 0; b < B; ++b) out.mat().middleCols(b * cols, cols) = x.item_mat(b, rows, cols);
    return out;
}

}  // namespace detail

/// 1-D correlation: x [B, Cin, L] (or [Cin, L]), w [Cout, Cin, k], b [Cout].
/// Output [B, Cout, L'] with L' = floor((L + 2p - k)/s) + 1.
template <typename T>
Var<T> conv1d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, Index stride, Index padding) {
    Var<T> xin = x;
    if (x.value().rank() == 2) {
        xin = reshape(x, {Index(1), x.value().dim(0), x.value().dim(1)});
    }
    const Tensor<T>& X = xin.value();
    const Tensor<T>& W = w.value();
    if (X.rank() != 3 || W.rank() != 3) throw std::invalid_argument("conv1d: want rank-3 x and w");
    const Index B = X.dim(0), Ci = X.dim(1), L = X.dim(2);
    const Index Co = W.dim(0), k = W.dim(2);
    if (W.dim(1) != Ci) {
        throw std::invalid_argument("conv1d: weight expects " + std::to_string(W.dim(1)) +
                                    " input channels, input has " + std::to_string(Ci));
    }
    if (bias.value().size() != Co) throw std::invalid_argument("conv1d: bias size");
    const Index Lo = conv_out_len(L, k, stride, padding);

    Tensor<T> cols = detail::im2col(X, B, Ci, L, k, stride, padding, Lo);
    Tensor<T> big({Co, B * Lo});
    big.mat().noalias() = W.mat(Co, Ci * k) * cols.mat();
    big.mat().colwise() += bias.value().vec();
    Tensor<T> out({B, Co, Lo});
    for (Index b = 0; b < B; ++b) out.item_mat(b, Co, Lo) = big.mat().middleCols(b * Lo, Lo);

    auto bwd = [xin, w, bias, cols = std::move(cols), B, Ci, L, Co, k, stride, padding,
                Lo](Node<T>& n) {
        Tensor<T> gbig = detail::stack_items(n.grad, B, Co, Lo);
        if (bias.requires_grad()) bias.node()->grad_buffer().vec() += gbig.mat().rowwise().sum();
        if (w.requires_grad())
            w.node()->grad_buffer().mat(Co, Ci * k).noalias() +=
                gbig.mat() * cols.mat().transpose();
        if (xin.requires_grad()) {
            Tensor<T> dcols({Ci * k, B * Lo});
            dcols.mat().noalias() = w.value().mat(Co, Ci * k).transpose() * gbig.mat();
            detail::col2im_add(dcols, B, Ci, L, k, stride, padding, Lo,
                               xin.node()->grad_buffer());
        }
    };
    return make_op<T>("conv1d", std::move(out), {xin, w, bias}, std::move(bwd));
}

/// Adjoint of conv1d: x [B, Cin, L] (or [Cin, L]), w [Cin, Cout, k], b [Cout].
/// Output [B, Cout, L'] with L' = (L-1)s - 2p + k + op. Passing a conv1d
/// weight [A, B, k] here maps its output channels back to its input channels,
/// so the pair is an exact adjoint on shared weights.
template <typename T>
Var<T> conv1d_transpose(const Var<T>& x, const Var<T>& w, const Var<T>& bias, Index stride,
                        Index padding, Index output_padding) {
    Var<T> xin = x;
    if (x.value().rank() == 2) {
        xin = reshape(x, {Index(1), x.value().dim(0), x.value().dim(1)});
    }
    const Tensor<T>& X = xin.value();
    const Tensor<T>& W = w.value();
    if (X.rank() != 3 || W.rank() != 3)
        throw std::invalid_argument("conv1d_transpose: want rank-3 x and w");
    const Index B = X.dim(0), Ci = X.dim(1), L = X.dim(2);
    const Index Co = W.dim(1), k = W.dim(2);
    if (W.dim(0) != Ci) {
        throw std::invalid_argument("conv1d_transpose: weight expects " + std::to_string(W.dim(0)) +
                                    " input channels, input has " + std::to_string(Ci));
    }
    if (bias.value().size() != Co) throw std::invalid_argument("conv1d_transpose: bias size");
    const Index Lo = conv_transpose_out_len(L, k, stride, padding, output_padding);

    Tensor<T> xbig = detail::stack_items(X, B, Ci, L);
    Tensor<T> cols({Co * k, B * L});
    cols.mat().noalias() = W.mat(Ci, Co * k).transpose() * xbig.mat();
    Tensor<T> out({B, Co, Lo});
    detail::col2im_add(cols, B, Co, Lo, k, stride, padding, L, out);
    for (Index b = 0; b < B; ++b) out.item_mat(b, Co, Lo).colwise() += bias.value().vec();

    auto bwd = [xin, w, bias, xbig = std::move(xbig), B, Ci, L, Co, k, stride, padding,
                Lo](Node<T>& n) {
        Tensor<T> dcols = detail::im2col(n.grad, B, Co, Lo, k, stride, padding, L);
        if (bias.requires_grad()) {
            for (Index b = 0; b < B; ++b)
                bias.node()->grad_buffer().vec() += n.grad.item_mat(b, Co, Lo).rowwise().sum();
        }
        if (w.requires_grad())
            w.node()->grad_buffer().mat(Ci, Co * k).noalias() +=
                xbig.mat() * dcols.mat().transpose();
        if (xin.requires_grad()) {
            Tensor<T> dxbig({Ci, B * L});
            dxbig.mat().noalias() = w.value().mat(Ci, Co * k) * dcols.mat();
            for (Index b = 0; b < B; ++b)
                xin.node()->grad_buffer().item_mat(b, Ci, L) += dxbig.mat().middleCols(b * L, L);
        }
    };
    return make_op<T>("conv1d_transpose", std::move(out), {xin, w, bias}, std::move(bwd));
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Layer norm over contiguous groups of size `gs` within each row; gain/bias
/// of size gs are shared across groups. gs == row width gives plain layer
/// norm over the last axis; gs == head_dim normalizes per attention head.
template <typename T>
Var<T> layer_norm_groups(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, Index gs,
                         T eps) {
    const Tensor<T>& X = x.value();
    const Index width = X.dims().back();
    if (width % gs != 0) throw std::invalid_argument("layer_norm_groups: width not divisible");
    if (gain.value().size() != gs || bias.value().size() != gs)
        throw std::invalid_argument("layer_norm_groups: gain/bias size");
    const Index groups = X.size() / gs;

    Tensor<T> xhat({groups, gs});
    Tensor<T> inv_std({groups});
    Tensor<T> out(X.dims());
    auto xm = X.mat(groups, gs);
    auto hm = xhat.mat();
    auto om = out.mat(groups, gs);
    for (Index g = 0; g < groups; ++g) {
        const T mu = xm.row(g).mean();
        const T var = (xm.row(g).array() - mu).square().mean();
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[g] = is;
        hm.row(g) = (xm.row(g).array() - mu) * is;
        om.row(g) = hm.row(g).array() * gain.value().vec().transpose().array() +
                    bias.value().vec().transpose().array();
    }

    auto bwd = [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), groups,
                gs](Node<T>& n) {
        auto gm = n.grad.mat(groups, gs);
        auto hm = xhat.mat(groups, gs);
        if (gain.requires_grad())
            gain.node()->grad_buffer().vec() += (gm.array() * hm.array()).colwise().sum().matrix().transpose();
        if (bias.requires_grad())
            bias.node()->grad_buffer().vec() += gm.colwise().sum().transpose();
        if (x.requires_grad()) {
            auto xg = x.node()->grad_buffer().mat(groups, gs);
            Eigen::Array<T, 1, Eigen::Dynamic> dyg(gs);
            for (Index g = 0; g < groups; ++g) {
                dyg = gm.row(g).array() * gain.value().vec().transpose().array();
                const T m1 = dyg.mean();
                const T m2 = (dyg * hm.row(g).array()).mean();
                xg.row(g).array() += inv_std[g] * (dyg - m1 - hm.row(g).array() * m2);
            }
        }
    };
    return make_op<T>("layer_norm", std::move(out), {x, gain, bias}, std::move(bwd));
}

/// Layer norm over the last axis.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
    return layer_norm_groups(x, gain, bias, x.value().dims().back(), eps);
}

/// Batch statistics of x [B, C, L] per channel: mean and population variance
/// over B*L entries. Used by the batch-norm layer to update running stats.
template <typename T>
void batch_channel_stats(const Tensor<T>& x, Tensor<T>& mean_out, Tensor<T>& var_out) {
    const Index B = x.dim(0), C = x.dim(1), L = x.dim(2);
    mean_out = Tensor<T>({C});
    var_out = Tensor<T>({C});
    for (Index c = 0; c < C; ++c) {
        T s = 0, s2 = 0;
        for (Index b = 0; b < B; ++b) {
            auto row = x.item_mat(b, C, L).row(c);
            s += row.sum();
            s2 += row.array().square().sum();
        }
        const T m = static_cast<T>(B * L);
        const T mu = s / m;
        mean_out[c] = mu;
        var_out[c] = s2 / m - mu * mu;
    }
}

/// Train-mode batch norm over x [B, C, L], normalizing per channel with batch
/// statistics. Pure: running-stat updates live in the layer wrapper.
template <typename T>
Var<T> batch_norm_train(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps,
                        Tensor<T>* mean_out = nullptr, Tensor<T>* var_out = nullptr) {
    const Tensor<T>& X = x.value();
    if (X.rank() != 3) throw std::invalid_argument("batch_norm: want [B, C, L] input");
    const Index B = X.dim(0), C = X.dim(1), L = X.dim(2);
    if (B < 2) throw std::invalid_argument("batch_norm: train mode requires batch >= 2");
    if (gain.value().size() != C || bias.value().size() != C)
        throw std::invalid_argument("batch_norm: gain/bias size");

    Tensor<T> mu, var;
    batch_channel_stats(X, mu, var);
    if (mean_out) *mean_out = mu;
    if (var_out) *var_out = var;

    Tensor<T> inv_std({C});
    for (Index c = 0; c < C; ++c) inv_std[c] = T(1) / std::sqrt(var[c] + eps);

    Tensor<T> xhat(X.dims());
    Tensor<T> out(X.dims());
    for (Index b = 0; b < B; ++b) {
        for (Index c = 0; c < C; ++c) {
            xhat.item_mat(b, C, L).row(c) = (X.item_mat(b, C, L).row(c).array() - mu[c]) * inv_std[c];
            out.item_mat(b, C, L).row(c) =
                xhat.item_mat(b, C, L).row(c).array() * gain.value()[c] + bias.value()[c];
        }
    }

    auto bwd = [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), B, C,
                L](Node<T>& n) {
        const T m = static_cast<T>(B * L);
        for (Index c = 0; c < C; ++c) {
            T sum_dy = 0, sum_dy_xhat = 0;
            for (Index b = 0; b < B; ++b) {
                auto g = n.grad.item_mat(b, C, L).row(c);
                sum_dy += g.sum();
                sum_dy_xhat += (g.array() * xhat.item_mat(b, C, L).row(c).array()).sum();
            }
            if (gain.requires_grad()) gain.node()->grad_buffer()[c] += sum_dy_xhat;
            if (bias.requires_grad()) bias.node()->grad_buffer()[c] += sum_dy;
            if (x.requires_grad()) {
                const T k = gain.value()[c] * inv_std[c];
                for (Index b = 0; b < B; ++b) {
                    x.node()->grad_buffer().item_mat(b, C, L).row(c).array() +=
                        k * (n.grad.item_mat(b, C, L).row(c).array() - sum_dy / m -
                             xhat.item_mat(b, C, L).row(c).array() * (sum_dy_xhat / m));
                }
            }
        }
    };
    return make_op<T>("batch_norm_train", std::move(out), {x, gain, bias}, std::move(bwd));
}

/// Infer-mode batch norm: affine map through frozen running statistics.
template <typename T>
Var<T> batch_norm_infer(const Var<T>& x, const Var<T>& gain, const Var<T>& bias,
                        const Tensor<T>& running_mean, const Tensor<T>& running_var, T eps) {
    const Tensor<T>& X = x.value();
    if (X.rank() != 3) throw std::invalid_argument("batch_norm: want [B, C, L] input");
    const Index B = X.dim(0), C = X.dim(1), L = X.dim(2);
    Tensor<T> inv_std({C});
    for (Index c = 0; c < C; ++c) inv_std[c] = T(1) / std::sqrt(running_var[c] + eps);
    Tensor<T> out(X.dims());
    for (Index b = 0; b < B; ++b) {
        for (Index c = 0; c < C; ++c) {
            out.item_mat(b, C, L).row(c) =
                (X.item_mat(b, C, L).row(c).array() - running_mean[c]) * inv_std[c] *
                    gain.value()[c] +
                bias.value()[c];
        }
    }
    auto bwd = [x, gain, bias, running_mean, inv_std = std::move(inv_std), B, C, L](Node<T>& n) {
        for (Index c = 0; c < C; ++c) {
            for (Index b = 0; b < B; ++b) {
                auto g = n.grad.item_mat(b, C, L).row(c);
                if (gain.requires_grad()) {
                    gain.node()->grad_buffer()[c] +=
                        (g.array() * ((x.value().item_mat(b, C, L).row(c).array() -
                                       running_mean[c]) *
                                      inv_std[c]))
                            .sum();
                }
                if (bias.requires_grad()) bias.node()->grad_buffer()[c] += g.sum();
                if (x.requires_grad()) {
                    x.node()->grad_buffer().item_mat(b, C, L).row(c).array() +=
                        g.array() * gain.value()[c] * inv_std[c];
                }
            }
        }
    };
    return make_op<T>("batch_norm_infer", std::move(out), {x, gain, bias}, std::move(bwd));
}

// ---------------------------------------------------------------------------
// Activations, dropout
// ---------------------------------------------------------------------------

enum class Act { relu, gelu, tanh };

inline Act act_from_string(const std::string& s) {
    if (s == "relu") return Act::relu;
    if (s == "gelu") return Act::gelu;
    if (s == "tanh") return Act::tanh;
    throw std::invalid_argument("unknown activation kind: " + s);
}

template <typename T>
Var<T> relu(const Var<T>& x) {
    Tensor<T> out = x.value();
    out.vec() = out.vec().cwiseMax(T(0));
    return make_op<T>("relu", std::move(out), {x}, [x](Node<T>& n) {
        if (!x.requires_grad()) return;
        auto g = x.node()->grad_buffer().vec();
        const Tensor<T>& v = x.value();
        for (Index i = 0; i < v.size(); ++i) {
            if (v[i] > T(0)) g[i] += n.grad[i];
        }
    });
}

template <typename T>
Var<T> tanh_act(const Var<T>& x) {
    Tensor<T> out = x.value();
    out.vec() = out.vec().array().tanh();
    return make_op<T>("tanh", std::move(out), {x}, [x](Node<T>& n) {
        if (x.requires_grad()) {
            x.node()->grad_buffer().vec().array() +=
                n.grad.vec().array() * (T(1) - n.value.vec().array().square());
        }
    });
}

/// GELU, tanh approximation.
template <typename T>
Var<T> gelu(const Var<T>& x) {
    constexpr T c = T(0.7978845608028653558798921198687637);  // sqrt(2/pi)
    constexpr T a = T(0.044715);
    const Tensor<T>& X = x.value();
    Tensor<T> out(X.dims());
    for (Index i = 0; i < X.size(); ++i) {
        const T v = X[i];
        out[i] = T(0.5) * v * (T(1) + std::tanh(c * (v + a * v * v * v)));
    }
    return make_op<T>("gelu", std::move(out), {x}, [x, c, a](Node<T>& n) {
        if (!x.requires_grad()) return;
        auto g = x.node()->grad_buffer().vec();
        const Tensor<T>& X = x.value();
        for (Index i = 0; i < X.size(); ++i) {
            const T v = X[i];
            const T u = std::tanh(c * (v + a * v * v * v));
            const T du = (T(1) - u * u) * c * (T(1) + T(3) * a * v * v);
            g[i] += n.grad[i] * (T(0.5) * (T(1) + u) + T(0.5) * v * du);
        }
    });
}

template <typename T>
Var<T> activation(const Var<T>& x, Act kind) {
    switch (kind) {
        case Act::relu: return relu(x);
        case Act::gelu: return gelu(x);
        case Act::tanh: return tanh_act(x);
    }
    throw std::invalid_argument("unknown activation kind");
}

/// Inverted dropout; identity in infer mode or at rate 0.
template <typename T>
Var<T> dropout(const Var<T>& x, double rate, Rng& rng, Mode mode) {
    if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0, 1)");
    if (mode == Mode::infer || rate == 0.0) {
        Tensor<T> out = x.value();
        return make_op<T>("dropout", std::move(out), {x}, [x](Node<T>& n) {
            if (x.requires_grad()) x.node()->accumulate(n.grad);
        });
    }
    const T keep_scale = T(1.0 / (1.0 - rate));
    Tensor<T> mask(x.value().dims());
    for (Index i = 0; i < mask.size(); ++i) {
        mask[i] = rng.uniform() < rate ? T(0) : keep_scale;
    }
    Tensor<T> out = x.value();
    out.vec().array() *= mask.vec().array();
    return make_op<T>("dropout", std::move(out), {x}, [x, mask = std::move(mask)](Node<T>& n) {
        if (x.requires_grad())
            x.node()->grad_buffer().vec().array() += n.grad.vec().array() * mask.vec().array();
    });
}

// ---------------------------------------------------------------------------
// Softmax, losses
// ---------------------------------------------------------------------------

template <typename T>
Var<T> softmax_rows(const Var<T>& x) {
    const Tensor<T>& X = x.value();
    const Index rows = X.dim(0), cols = X.size() / rows;
    Tensor<T> out(X.dims());
    auto xm = X.mat(rows, cols);
    auto om = out.mat(rows, cols);
    for (Index r = 0; r < rows; ++r) {
        const T mx = xm.row(r).maxCoeff();
        om.row(r) = (xm.row(r).array() - mx).exp();
        om.row(r) /= om.row(r).sum();
    }
    return make_op<T>("softmax", std::move(out), {x}, [x, rows, cols](Node<T>& n) {
        if (!x.requires_grad()) return;
        auto pm = n.value.mat(rows, cols);
        auto gm = n.grad.mat(rows, cols);
        auto xg = x.node()->grad_buffer().mat(rows, cols);
        for (Index r = 0; r < rows; ++r) {
            const T dot = (gm.row(r).array() * pm.row(r).array()).sum();
            xg.row(r).array() += pm.row(r).array() * (gm.row(r).array() - dot);
        }
    });
}

/// Mean over the batch of -log softmax(logits)[target].
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<Index>& targets) {
    const Tensor<T>& X = logits.value();
    if (X.rank() != 2) throw std::invalid_argument("cross_entropy: want [B, K] logits");
    const Index B = X.dim(0), K = X.dim(1);
    if (static_cast<Index>(targets.size()) != B)
        throw std::invalid_argument("cross_entropy: batch size mismatch");
    for (Index t : targets) {
        if (t < 0 || t >= K)
            throw std::invalid_argument("cross_entropy: target " + std::to_string(t) +
                                        " out of range [0, " + std::to_string(K) + ")");
    }
    Tensor<T> probs({B, K});
    T loss = 0;
    auto xm = X.mat();
    auto pm = probs.mat();
    for (Index b = 0; b < B; ++b) {
        const T mx = xm.row(b).maxCoeff();
        pm.row(b) = (xm.row(b).array() - mx).exp();
        const T z = pm.row(b).sum();
        pm.row(b) /= z;
        loss -= xm(b, targets[b]) - mx - std::log(z);
    }
    loss /= static_cast<T>(B);
    auto bwd = [logits, probs = std::move(probs), targets, B, K](Node<T>& n) {
        if (!logits.requires_grad()) return;
        const T g = n.grad[0] / static_cast<T>(B);
        auto lg = logits.node()->grad_buffer().mat(B, K);
        auto pm = probs.mat(B, K);
        for (Index b = 0; b < B; ++b) {
            lg.row(b) += g * pm.row(b);
            lg(b, targets[b]) -= g;
        }
    };
    return make_op<T>("cross_entropy", Tensor<T>::scalar(loss), {logits}, std::move(bwd));
}

template <typename T>
Var<T> mse(const Var<T>& x, const Var<T>& y) {
    detail::require_same_shape("mse", x.value(), y.value());
    const Index n_el = x.value().size();
    const T inv = T(1) / static_cast<T>(n_el);
    const T loss = (x.value().vec() - y.value().vec()).squaredNorm() * inv;
    return make_op<T>("mse", Tensor<T>::scalar(loss), {x, y}, [x, y, inv](Node<T>& n) {
        const T g2 = T(2) * n.grad[0] * inv;
        if (x.requires_grad())
            x.node()->grad_buffer().vec() += g2 * (x.value().vec() - y.value().vec());
        if (y.requires_grad())
            y.node()->grad_buffer().vec() -= g2 * (x.value().vec() - y.value().vec());
    });
}

// ---------------------------------------------------------------------------
// Attention (fused per batch item and head)
// ---------------------------------------------------------------------------

/// softmax(Qn Kn^T / sqrt(head_dim)) V for Qn, Kn, V laid out [B*N, heads*head_dim];
/// heads are contiguous column groups. Qn/Kn arrive already layer-normalized.
/// probs_out, when given, receives the post-softmax weights [B*heads, N, N].
template <typename T>
Var<T> attention(const Var<T>& qn, const Var<T>& kn, const Var<T>& v, Index batch, Index heads,
                 Index head_dim, double attn_dropout, Rng& rng, Mode mode,
                 Tensor<T>* probs_out = nullptr) {
    const Tensor<T>& Q = qn.value();
    const Index rows = Q.dim(0), width = Q.dim(1);
    if (width != heads * head_dim) throw std::invalid_argument("attention: width mismatch");
    if (rows % batch != 0) throw std::invalid_argument("attention: rows not divisible by batch");
    const Index N = rows / batch;
    detail::require_same_shape("attention", Q, kn.value());
    detail::require_same_shape("attention", Q, v.value());

    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(head_dim));
    Tensor<T> probs({batch * heads, N, N});
    Tensor<T> drop_mask;
    const bool dropping = (mode == Mode::train && attn_dropout > 0.0);
    if (dropping) drop_mask = Tensor<T>({batch * heads, N, N});
    const T keep_scale = dropping ? T(1.0 / (1.0 - attn_dropout)) : T(1);

    Tensor<T> out({rows, width});
    using Mat = typename Tensor<T>::EigenMatrix;
    for (Index b = 0; b < batch; ++b) {
        for (Index h = 0; h < heads; ++h) {
            Mat q = Q.mat().block(b * N, h * head_dim, N, head_dim);
            Mat k = kn.value().mat().block(b * N, h * head_dim, N, head_dim);
            Mat vh = v.value().mat().block(b * N, h * head_dim, N, head_dim);
            auto pm = probs.item_mat(b * heads + h, N, N);
            pm.noalias() = q * k.transpose() * inv_sqrt;
            for (Index r = 0; r < N; ++r) {
                const T mx = pm.row(r).maxCoeff();
                pm.row(r) = (pm.row(r).array() - mx).exp();
                pm.row(r) /= pm.row(r).sum();
            }
            Mat pd = pm;
            if (dropping) {
                auto dm = drop_mask.item_mat(b * heads + h, N, N);
                for (Index r = 0; r < N; ++r) {
                    for (Index c2 = 0; c2 < N; ++c2) {
                        dm(r, c2) = rng.uniform() < attn_dropout ? T(0) : keep_scale;
                    }
                }
                pd.array() *= dm.array();
            }
            out.mat().block(b * N, h * head_dim, N, head_dim).noalias() = pd * vh;
        }
    }
    if (probs_out) *probs_out = probs;

    auto bwd = [qn, kn, v, probs = std::move(probs), drop_mask = std::move(drop_mask), dropping,
                batch, heads, head_dim, N, inv_sqrt](Node<T>& n) {
        using M = typename Tensor<T>::EigenMatrix;
        for (Index b = 0; b < batch; ++b) {
            for (Index h = 0; h < heads; ++h) {
                auto pm = probs.item_mat(b * heads + h, N, N);
                M go = n.grad.mat(batch * N, heads * head_dim)
                           .block(b * N, h * head_dim, N, head_dim);
                M vh = v.value().mat().block(b * N, h * head_dim, N, head_dim);
                M pd = pm;
                if (dropping) pd.array() *= drop_mask.item_mat(b * heads + h, N, N).array();
                if (v.requires_grad()) {
                    v.node()->grad_buffer().mat(batch * N, heads * head_dim)
                        .block(b * N, h * head_dim, N, head_dim)
                        .noalias() += pd.transpose() * go;
                }
                if (!qn.requires_grad() && !kn.requires_grad()) continue;
                M dpd = go * vh.transpose();
                if (dropping) dpd.array() *= drop_mask.item_mat(b * heads + h, N, N).array();
                M ds(N, N);
                for (Index r = 0; r < N; ++r) {
                    const T dot = (dpd.row(r).array() * pm.row(r).array()).sum();
                    ds.row(r) = pm.row(r).array() * (dpd.row(r).array() - dot);
                }
                ds *= inv_sqrt;
                M k = kn.value().mat().block(b * N, h * head_dim, N, head_dim);
                M q = qn.value().mat().block(b * N, h * head_dim, N, head_dim);
                if (qn.requires_grad()) {
                    qn.node()->grad_buffer().mat(batch * N, heads * head_dim)
                        .block(b * N, h * head_dim, N, head_dim)
                        .noalias() += ds * k;
                }
                if (kn.requires_grad()) {
                    kn.node()->grad_buffer().mat(batch * N, heads * head_dim)
                        .block(b * N, h * head_dim, N, head_dim)
                        .noalias() += ds.transpose() * q;
                }
            }
        }
    };
    return make_op<T>("attention", std::move(out), {qn, kn, v}, std::move(bwd));
}

/// [B*N, d] token rows -> [B, d, N] channel layout for the deconvolution head.
template <typename T>
Var<T> tokens_to_channels(const Var<T>& x, Index batch) {
    const Index rows = x.value().dim(0), d = x.value().dim(1);
    if (rows % batch != 0) throw std::invalid_argument("tokens_to_channels: rows/batch mismatch");
    const Index N = rows / batch;
    Tensor<T> out({batch, d, N});
    for (Index b = 0; b < batch; ++b) {
        out.item_mat(b, d, N) = x.value().mat().middleRows(b * N, N).transpose();
    }
    return make_op<T>("tokens_to_channels", std::move(out), {x}, [x, batch, d, N](Node<T>& n) {
        if (!x.requires_grad()) return;
        auto g = x.node()->grad_buffer().mat(batch * N, d);
        for (Index b = 0; b < batch; ++b) {
            g.middleRows(b * N, N) += n.grad.item_mat(b, d, N).transpose();
        }
    });
}

// ---------------------------------------------------------------------------
// Masked-token replacement
// ---------------------------------------------------------------------------

/// Rows flagged in `masked` are replaced by the shared token vector; all other
/// rows pass through untouched.
template <typename T>
Var<T> mask_replace(const Var<T>& x, const std::vector<bool>& masked, const Var<T>& token) {
    const Tensor<T>& X = x.value();
    const Index rows = X.dim(0), cols = X.size() / rows;
    if (static_cast<Index>(masked.size()) != rows)
        throw std::invalid_argument("mask_replace: mask length mismatch");
    if (token.value().size() != cols) throw std::invalid_argument("mask_replace: token size");
    Tensor<T> out = X;
    auto om = out.mat(rows, cols);
    for (Index r = 0; r < rows; ++r) {
        if (masked[static_cast<std::size_t>(r)]) om.row(r) = token.value().vec().transpose();
    }
    return make_op<T>("mask_replace", std::move(out), {x, token},
                      [x, token, masked, rows, cols](Node<T>& n) {
                          auto gm = n.grad.mat(rows, cols);
                          for (Index r = 0; r < rows; ++r) {
                              if (masked[static_cast<std::size_t>(r)]) {
                                  if (token.requires_grad())
                                      token.node()->grad_buffer().vec() += gm.row(r).transpose();
                              } else if (x.requires_grad()) {
                                  x.node()->grad_buffer().mat(rows, cols).row(r) += gm.row(r);
                              }
                          }
                      });
}

}  // namespace duin
