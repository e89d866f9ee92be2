#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "sonoseg/tensor.hpp"

namespace sonoseg {

using NodeId = int;

namespace detail {

// ---- conv2d (stride 1, zero padding) ------------------------------------

template <typename T>
void conv2d_forward(const TensorT<T>& in, const TensorT<T>& k, const TensorT<T>& b, int pad,
                    TensorT<T>& out) {
    const int N = in.dim(0), Cin = in.dim(1), H = in.dim(2), W = in.dim(3);
    const int Cout = k.dim(0), Kh = k.dim(2), Kw = k.dim(3);
    const int OH = out.dim(2), OW = out.dim(3);
    const T* ip = in.data();
    const T* kp = k.data();
    T* op = out.data();
    for (int n = 0; n < N; ++n) {
        for (int co = 0; co < Cout; ++co) {
            T* oplane = op + (static_cast<std::int64_t>(n) * Cout + co) * OH * OW;
            std::fill(oplane, oplane + static_cast<std::int64_t>(OH) * OW, b[co]);
            for (int ci = 0; ci < Cin; ++ci) {
                const T* iplane = ip + (static_cast<std::int64_t>(n) * Cin + ci) * H * W;
                const T* kplane = kp + (static_cast<std::int64_t>(co) * Cin + ci) * Kh * Kw;
                for (int kh = 0; kh < Kh; ++kh) {
                    for (int kw = 0; kw < Kw; ++kw) {
                        const T w = kplane[kh * Kw + kw];
                        if (w == T(0)) continue;
                        const int ow_lo = std::max(0, pad - kw);
                        const int ow_hi = std::min(OW - 1, W - 1 + pad - kw);
                        for (int oh = 0; oh < OH; ++oh) {
                            const int ih = oh + kh - pad;
                            if (ih < 0 || ih >= H) continue;
                            const T* irow = iplane + static_cast<std::int64_t>(ih) * W + (ow_lo + kw - pad);
                            T* orow = oplane + static_cast<std::int64_t>(oh) * OW + ow_lo;
                            for (int ow = ow_lo; ow <= ow_hi; ++ow) *orow++ += w * *irow++;
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void conv2d_backward(const TensorT<T>& gout, const TensorT<T>& in, const TensorT<T>& k, int pad,
                     TensorT<T>* gin, TensorT<T>* gk, TensorT<T>* gb) {
    const int N = in.dim(0), Cin = in.dim(1), H = in.dim(2), W = in.dim(3);
    const int Cout = k.dim(0), Kh = k.dim(2), Kw = k.dim(3);
    const int OH = gout.dim(2), OW = gout.dim(3);
    const T* gop = gout.data();
    const T* ip = in.data();
    const T* kp = k.data();
    for (int n = 0; n < N; ++n) {
        for (int co = 0; co < Cout; ++co) {
            const T* goplane = gop + (static_cast<std::int64_t>(n) * Cout + co) * OH * OW;
            if (gb) {
                T acc = T(0);
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(OH) * OW; ++i) acc += goplane[i];
                (*gb)[co] += acc;
            }
            for (int ci = 0; ci < Cin; ++ci) {
                const T* iplane = ip + (static_cast<std::int64_t>(n) * Cin + ci) * H * W;
                const T* kplane = kp + (static_cast<std::int64_t>(co) * Cin + ci) * Kh * Kw;
                T* giplane = gin ? gin->data() + (static_cast<std::int64_t>(n) * Cin + ci) * H * W : nullptr;
                T* gkplane = gk ? gk->data() + (static_cast<std::int64_t>(co) * Cin + ci) * Kh * Kw : nullptr;
                for (int kh = 0; kh < Kh; ++kh) {
                    for (int kw = 0; kw < Kw; ++kw) {
                        const T w = kplane[kh * Kw + kw];
                        const int ow_lo = std::max(0, pad - kw);
                        const int ow_hi = std::min(OW - 1, W - 1 + pad - kw);
                        T wacc = T(0);
                        for (int oh = 0; oh < OH; ++oh) {
                            const int ih = oh + kh - pad;
                            if (ih < 0 || ih >= H) continue;
                            const T* gorow = goplane + static_cast<std::int64_t>(oh) * OW + ow_lo;
                            const std::int64_t ibase = static_cast<std::int64_t>(ih) * W + (ow_lo + kw - pad);
                            if (giplane) {
                                T* girow = giplane + ibase;
                                for (int ow = ow_lo; ow <= ow_hi; ++ow) *girow++ += w * *gorow++;
                                gorow = goplane + static_cast<std::int64_t>(oh) * OW + ow_lo;
                            }
                            if (gkplane) {
                                const T* irow = iplane + ibase;
                                for (int ow = ow_lo; ow <= ow_hi; ++ow) wacc += *irow++ * *gorow++;
                            }
                        }
                        if (gkplane) gkplane[kh * Kw + kw] += wacc;
                    }
                }
            }
        }
    }
}

// ---- transposed conv2d (stride 2, 2x2 kernel) ----------------------------

template <typename T>
void tconv2d_forward(const TensorT<T>& in, const TensorT<T>& k, TensorT<T>& out) {
    const int N = in.dim(0), Cin = in.dim(1), H = in.dim(2), W = in.dim(3);
    const int Cout = k.dim(1);
    const int OW = out.dim(3);
    out.fill(T(0));
    for (int n = 0; n < N; ++n) {
        for (int ci = 0; ci < Cin; ++ci) {
            const T* iplane = in.data() + (static_cast<std::int64_t>(n) * Cin + ci) * H * W;
            for (int co = 0; co < Cout; ++co) {
                T* oplane = out.data() + (static_cast<std::int64_t>(n) * Cout + co) * (2 * H) * OW;
                const T* kq = k.data() + (static_cast<std::int64_t>(ci) * Cout + co) * 4;
                for (int kh = 0; kh < 2; ++kh) {
                    for (int kw = 0; kw < 2; ++kw) {
                        const T w = kq[kh * 2 + kw];
                        if (w == T(0)) continue;
                        for (int ih = 0; ih < H; ++ih) {
                            const T* irow = iplane + static_cast<std::int64_t>(ih) * W;
                            T* orow = oplane + static_cast<std::int64_t>(2 * ih + kh) * OW + kw;
                            for (int iw = 0; iw < W; ++iw) orow[2 * iw] += w * irow[iw];
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void tconv2d_backward(const TensorT<T>& gout, const TensorT<T>& in, const TensorT<T>& k,
                      TensorT<T>* gin, TensorT<T>* gk) {
    const int N = in.dim(0), Cin = in.dim(1), H = in.dim(2), W = in.dim(3);
    const int Cout = k.dim(1);
    const int OW = gout.dim(3);
    for (int n = 0; n < N; ++n) {
        for (int ci = 0; ci < Cin; ++ci) {
            const T* iplane = in.data() + (static_cast<std::int64_t>(n) * Cin + ci) * H * W;
            T* giplane = gin ? gin->data() + (static_cast<std::int64_t>(n) * Cin + ci) * H * W : nullptr;
            for (int co = 0; co < Cout; ++co) {
                const T* goplane = gout.data() + (static_cast<std::int64_t>(n) * Cout + co) * (2 * H) * OW;
                const T* kq = k.data() + (static_cast<std::int64_t>(ci) * Cout + co) * 4;
                T* gkq = gk ? gk->data() + (static_cast<std::int64_t>(ci) * Cout + co) * 4 : nullptr;
                for (int kh = 0; kh < 2; ++kh) {
                    for (int kw = 0; kw < 2; ++kw) {
                        const T w = kq[kh * 2 + kw];
                        T wacc = T(0);
                        for (int ih = 0; ih < H; ++ih) {
                            const T* gorow = goplane + static_cast<std::int64_t>(2 * ih + kh) * OW + kw;
                            const T* irow = iplane + static_cast<std::int64_t>(ih) * W;
                            if (giplane) {
                                T* girow = giplane + static_cast<std::int64_t>(ih) * W;
                                for (int iw = 0; iw < W; ++iw) girow[iw] += w * gorow[2 * iw];
                            }
                            if (gkq)
                                for (int iw = 0; iw < W; ++iw) wacc += irow[iw] * gorow[2 * iw];
                        }
                        if (gkq) gkq[kh * 2 + kw] += wacc;
                    }
                }
            }
        }
    }
}

} // namespace detail

/// Reverse-mode autodiff over TensorT<T> values. Each op appends a node
/// whose parents already exist, so creation order is a topological order;
/// backward() walks ids in reverse with a fixed accumulation order, making
/// repeated runs bit-identical. Construct one Graph per forward/backward
/// pass (define-by-run).
template <typename T>
class Graph {
public:
    struct ParamRef {
        std::string name;
        NodeId id;
    };

    explicit Graph(bool checked = true) : checked_(checked) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    NodeId constant(TensorT<T> v) { return add_leaf(std::move(v), "constant"); }

    NodeId param(std::string name, TensorT<T> v) {
        NodeId id = add_leaf(std::move(v), "param " + name);
        params_.push_back({std::move(name), id});
        return id;
    }

    const std::vector<ParamRef>& params() const { return params_; }

    const TensorT<T>& value(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].value; }

    /// Zeros until backward() has run and reached this node.
    const TensorT<T>& grad(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

    // ---- ops -------------------------------------------------------------

    NodeId conv2d(NodeId input, NodeId kernel, NodeId bias, int padding) {
        const auto& in = value(input);
        const auto& k = value(kernel);
        const auto& b = value(bias);
        require_ndim(in, 4, "conv2d input");
        require_ndim(k, 4, "conv2d kernel");
        if (padding < 0) throw ValidationError("conv2d: negative padding " + std::to_string(padding));
        if (k.dim(1) != in.dim(1))
            throw ShapeError("conv2d: kernel Cin=" + std::to_string(k.dim(1)) + " does not match input C=" +
                             std::to_string(in.dim(1)) + " (input " + shape_str(in.shape()) + ", kernel " +
                             shape_str(k.shape()) + ")");
        require_shape(b, {k.dim(0)}, "conv2d bias");
        const int OH = in.dim(2) + 2 * padding - k.dim(2) + 1;
        const int OW = in.dim(3) + 2 * padding - k.dim(3) + 1;
        if (OH < 1 || OW < 1)
            throw ShapeError("conv2d: kernel " + shape_str(k.shape()) + " exceeds padded input " +
                             shape_str(in.shape()) + " (padding " + std::to_string(padding) + ")");
        TensorT<T> out({in.dim(0), k.dim(0), OH, OW});
        detail::conv2d_forward(in, k, b, padding, out);
        return add_node(std::move(out), {input, kernel, bias}, "conv2d",
                        [input, kernel, bias, padding](Graph& g, NodeId self) {
                            detail::conv2d_backward(g.grad_of(self), g.value(input), g.value(kernel),
                                                    padding, &g.grad_of(input), &g.grad_of(kernel),
                                                    &g.grad_of(bias));
                        });
    }

    /// Stride fixed at 2 with a 2x2 kernel, so spatial dims exactly double.
    /// Kernel layout: Cin x Cout x 2 x 2.
    NodeId transposed_conv2d(NodeId input, NodeId kernel) {
        const auto& in = value(input);
        const auto& k = value(kernel);
        require_ndim(in, 4, "transposed_conv2d input");
        require_ndim(k, 4, "transposed_conv2d kernel");
        if (k.dim(2) != 2 || k.dim(3) != 2)
            throw ShapeError("transposed_conv2d: kernel spatial dims must be 2x2, got " + shape_str(k.shape()));
        if (k.dim(0) != in.dim(1))
            throw ShapeError("transposed_conv2d: kernel Cin=" + std::to_string(k.dim(0)) +
                             " does not match input C=" + std::to_string(in.dim(1)));
        TensorT<T> out({in.dim(0), k.dim(1), 2 * in.dim(2), 2 * in.dim(3)});
        detail::tconv2d_forward(in, k, out);
        return add_node(std::move(out), {input, kernel}, "transposed_conv2d",
                        [input, kernel](Graph& g, NodeId self) {
                            detail::tconv2d_backward(g.grad_of(self), g.value(input), g.value(kernel),
                                                     &g.grad_of(input), &g.grad_of(kernel));
                        });
    }

    /// 2x2 window, stride 2. Gradient routes to the argmax position only;
    /// ties go to the first element in row-major window order.
    NodeId maxpool2d(NodeId input) {
        const auto& in = value(input);
        require_ndim(in, 4, "maxpool2d input");
        const int N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
        if (H % 2 != 0 || W % 2 != 0)
            throw ShapeError("maxpool2d: spatial dims must be even, got " + shape_str(in.shape()));
        const int OH = H / 2, OW = W / 2;
        TensorT<T> out({N, C, OH, OW});
        auto argmax = std::make_shared<std::vector<std::int64_t>>(out.numel());
        const T* ip = in.data();
        T* op = out.data();
        std::int64_t oi = 0;
        for (int nc = 0; nc < N * C; ++nc) {
            const T* plane = ip + static_cast<std::int64_t>(nc) * H * W;
            for (int oh = 0; oh < OH; ++oh) {
                for (int ow = 0; ow < OW; ++ow, ++oi) {
                    std::int64_t base = static_cast<std::int64_t>(nc) * H * W + 2 * oh * W + 2 * ow;
                    std::int64_t best = base;
                    T bv = plane[2 * oh * W + 2 * ow];
                    const std::int64_t cand[3] = {base + 1, base + W, base + W + 1};
                    for (std::int64_t c : cand) {
                        if (ip[c] > bv) {
                            bv = ip[c];
                            best = c;
                        }
                    }
                    op[oi] = bv;
                    (*argmax)[static_cast<std::size_t>(oi)] = best;
                }
            }
        }
        return add_node(std::move(out), {input}, "maxpool2d", [input, argmax](Graph& g, NodeId self) {
            const auto& go = g.grad_of(self);
            auto& gi = g.grad_of(input);
            for (std::int64_t i = 0; i < go.numel(); ++i)
                gi[(*argmax)[static_cast<std::size_t>(i)]] += go[i];
        });
    }

    NodeId relu(NodeId input) {
        const auto& in = value(input);
        TensorT<T> out(in.shape());
        for (std::int64_t i = 0; i < in.numel(); ++i) out[i] = in[i] > T(0) ? in[i] : T(0);
        return add_node(std::move(out), {input}, "relu", [input](Graph& g, NodeId self) {
            const auto& go = g.grad_of(self);
            const auto& x = g.value(input);
            auto& gi = g.grad_of(input);
            for (std::int64_t i = 0; i < go.numel(); ++i)
                if (x[i] > T(0)) gi[i] += go[i];
        });
    }

    /// Per-pixel softmax across the channel dim, computed with
    /// max-subtraction. Identical inputs after subtraction give bit-identical
    /// outputs.
    NodeId softmax_channels(NodeId input) {
        const auto& in = value(input);
        require_ndim(in, 4, "softmax_channels input");
        const int N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
        if (C < 2) throw ShapeError("softmax_channels: needs C >= 2, got C=" + std::to_string(C));
        TensorT<T> out(in.shape());
        const std::int64_t plane = static_cast<std::int64_t>(H) * W;
        for (int n = 0; n < N; ++n) {
            const T* ib = in.data() + static_cast<std::int64_t>(n) * C * plane;
            T* ob = out.data() + static_cast<std::int64_t>(n) * C * plane;
            for (std::int64_t p = 0; p < plane; ++p) {
                T m = ib[p];
                for (int c = 1; c < C; ++c) m = std::max(m, ib[c * plane + p]);
                T s = T(0);
                for (int c = 0; c < C; ++c) {
                    const T e = std::exp(ib[c * plane + p] - m);
                    ob[c * plane + p] = e;
                    s += e;
                }
                const T inv = T(1) / s;
                for (int c = 0; c < C; ++c) ob[c * plane + p] *= inv;
            }
        }
        return add_node(std::move(out), {input}, "softmax_channels", [input, C, plane](Graph& g, NodeId self) {
            const auto& go = g.grad_of(self);
            const auto& y = g.value(self);
            auto& gi = g.grad_of(input);
            const int N = y.dim(0);
            for (int n = 0; n < N; ++n) {
                const std::int64_t base = static_cast<std::int64_t>(n) * C * plane;
                for (std::int64_t p = 0; p < plane; ++p) {
                    T dot = T(0);
                    for (int c = 0; c < C; ++c) dot += go[base + c * plane + p] * y[base + c * plane + p];
                    for (int c = 0; c < C; ++c) {
                        const std::int64_t i = base + c * plane + p;
                        gi[i] += y[i] * (go[i] - dot);
                    }
                }
            }
        });
    }

    /// Mean over all pixels of -log p(target class), p clamped at 1e-12.
    /// Targets are 0-based channel indices, one per pixel, row-major N,H,W.
    NodeId cross_entropy_pixelwise(NodeId probs, const std::vector<std::int32_t>& targets) {
        const auto& p = value(probs);
        require_ndim(p, 4, "cross_entropy_pixelwise probs");
        const int N = p.dim(0), C = p.dim(1), H = p.dim(2), W = p.dim(3);
        const std::int64_t plane = static_cast<std::int64_t>(H) * W;
        const std::int64_t rows = static_cast<std::int64_t>(N) * plane;
        if (static_cast<std::int64_t>(targets.size()) != rows)
            throw ShapeError("cross_entropy_pixelwise: " + std::to_string(targets.size()) +
                             " targets for " + std::to_string(rows) + " pixels");
        auto idx = [C, plane](std::int64_t r, int c) {
            const std::int64_t n = r / plane, pix = r % plane;
            return (n * C + c) * plane + pix;
        };
        return cross_entropy_impl(probs, targets, rows, C, idx, "cross_entropy_pixelwise");
    }

    /// Image-level variant over N x C probability rows.
    NodeId cross_entropy_rows(NodeId probs, const std::vector<std::int32_t>& targets) {
        const auto& p = value(probs);
        require_ndim(p, 2, "cross_entropy_rows probs");
        const std::int64_t rows = p.dim(0);
        const int C = p.dim(1);
        if (static_cast<std::int64_t>(targets.size()) != rows)
            throw ShapeError("cross_entropy_rows: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(rows) + " rows");
        auto idx = [C](std::int64_t r, int c) { return r * C + c; };
        return cross_entropy_impl(probs, targets, rows, C, idx, "cross_entropy_rows");
    }

    NodeId global_avg_pool_channels(NodeId input) {
        const auto& in = value(input);
        require_ndim(in, 4, "global_avg_pool_channels input");
        const int N = in.dim(0), C = in.dim(1);
        const std::int64_t plane = static_cast<std::int64_t>(in.dim(2)) * in.dim(3);
        TensorT<T> out({N, C});
        for (int n = 0; n < N; ++n) {
            for (int c = 0; c < C; ++c) {
                const T* pl = in.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
                T acc = T(0);
                for (std::int64_t i = 0; i < plane; ++i) acc += pl[i];
                out[static_cast<std::int64_t>(n) * C + c] = acc / static_cast<T>(plane);
            }
        }
        return add_node(std::move(out), {input}, "global_avg_pool_channels",
                        [input, plane](Graph& g, NodeId self) {
                            const auto& go = g.grad_of(self);
                            auto& gi = g.grad_of(input);
                            const T scale = T(1) / static_cast<T>(plane);
                            for (std::int64_t nc = 0; nc < go.numel(); ++nc) {
                                const T v = go[nc] * scale;
                                T* pl = gi.data() + nc * plane;
                                for (std::int64_t i = 0; i < plane; ++i) pl[i] += v;
                            }
                        });
    }

    NodeId fully_connected(NodeId input, NodeId weight, NodeId bias) {
        const auto& x = value(input);
        const auto& w = value(weight);
        const auto& b = value(bias);
        require_ndim(x, 2, "fully_connected input");
        require_ndim(w, 2, "fully_connected weight");
        if (w.dim(1) != x.dim(1))
            throw ShapeError("fully_connected: weight Cin=" + std::to_string(w.dim(1)) +
                             " does not match input Cin=" + std::to_string(x.dim(1)));
        require_shape(b, {w.dim(0)}, "fully_connected bias");
        const int N = x.dim(0), Cin = x.dim(1), Cout = w.dim(0);
        TensorT<T> out({N, Cout});
        for (int n = 0; n < N; ++n) {
            const T* xr = x.data() + static_cast<std::int64_t>(n) * Cin;
            for (int o = 0; o < Cout; ++o) {
                const T* wr = w.data() + static_cast<std::int64_t>(o) * Cin;
                T acc = b[o];
                for (int i = 0; i < Cin; ++i) acc += wr[i] * xr[i];
                out[static_cast<std::int64_t>(n) * Cout + o] = acc;
            }
        }
        return add_node(std::move(out), {input, weight, bias}, "fully_connected",
                        [input, weight, bias, N, Cin, Cout](Graph& g, NodeId self) {
                            const auto& go = g.grad_of(self);
                            const auto& x = g.value(input);
                            const auto& w = g.value(weight);
                            auto& gx = g.grad_of(input);
                            auto& gw = g.grad_of(weight);
                            auto& gb = g.grad_of(bias);
                            for (int n = 0; n < N; ++n) {
                                const T* xr = x.data() + static_cast<std::int64_t>(n) * Cin;
                                T* gxr = gx.data() + static_cast<std::int64_t>(n) * Cin;
                                for (int o = 0; o < Cout; ++o) {
                                    const T d = go[static_cast<std::int64_t>(n) * Cout + o];
                                    const T* wr = w.data() + static_cast<std::int64_t>(o) * Cin;
                                    T* gwr = gw.data() + static_cast<std::int64_t>(o) * Cin;
                                    for (int i = 0; i < Cin; ++i) {
                                        gxr[i] += d * wr[i];
                                        gwr[i] += d * xr[i];
                                    }
                                    gb[o] += d;
                                }
                            }
                        });
    }

    /// Concatenate along the channel dim, a's channels first.
    NodeId concat_channels(NodeId a, NodeId b) {
        const auto& ta = value(a);
        const auto& tb = value(b);
        require_ndim(ta, 4, "concat_channels lhs");
        require_ndim(tb, 4, "concat_channels rhs");
        if (ta.dim(0) != tb.dim(0) || ta.dim(2) != tb.dim(2) || ta.dim(3) != tb.dim(3))
            throw ShapeError("concat_channels: incompatible shapes " + shape_str(ta.shape()) + " and " +
                             shape_str(tb.shape()));
        const int N = ta.dim(0), Ca = ta.dim(1), Cb = tb.dim(1);
        const std::int64_t plane = static_cast<std::int64_t>(ta.dim(2)) * ta.dim(3);
        TensorT<T> out({N, Ca + Cb, ta.dim(2), ta.dim(3)});
        for (int n = 0; n < N; ++n) {
            std::copy_n(ta.data() + static_cast<std::int64_t>(n) * Ca * plane, Ca * plane,
                        out.data() + static_cast<std::int64_t>(n) * (Ca + Cb) * plane);
            std::copy_n(tb.data() + static_cast<std::int64_t>(n) * Cb * plane, Cb * plane,
                        out.data() + (static_cast<std::int64_t>(n) * (Ca + Cb) + Ca) * plane);
        }
        return add_node(std::move(out), {a, b}, "concat_channels",
                        [a, b, N, Ca, Cb, plane](Graph& g, NodeId self) {
                            const auto& go = g.grad_of(self);
                            auto& ga = g.grad_of(a);
                            auto& gb = g.grad_of(b);
                            for (int n = 0; n < N; ++n) {
                                const T* src = go.data() + static_cast<std::int64_t>(n) * (Ca + Cb) * plane;
                                T* pa = ga.data() + static_cast<std::int64_t>(n) * Ca * plane;
                                for (std::int64_t i = 0; i < Ca * plane; ++i) pa[i] += src[i];
                                T* pb = gb.data() + static_cast<std::int64_t>(n) * Cb * plane;
                                for (std::int64_t i = 0; i < Cb * plane; ++i) pb[i] += src[Ca * plane + i];
                            }
                        });
    }

    /// Same data under a new shape (numel must match).
    NodeId reshape_view(NodeId input, Shape shape) {
        const auto& in = value(input);
        if (shape_numel(shape) != in.numel())
            throw ShapeError("reshape_view: cannot view " + shape_str(in.shape()) + " as " + shape_str(shape));
        TensorT<T> out(std::move(shape), in.vec());
        return add_node(std::move(out), {input}, "reshape_view", [input](Graph& g, NodeId self) {
            const auto& go = g.grad_of(self);
            auto& gi = g.grad_of(input);
            for (std::int64_t i = 0; i < go.numel(); ++i) gi[i] += go[i];
        });
    }

    NodeId sum(NodeId input) {
        const auto& in = value(input);
        T acc = T(0);
        for (std::int64_t i = 0; i < in.numel(); ++i) acc += in[i];
        TensorT<T> out({1});
        out[0] = acc;
        return add_node(std::move(out), {input}, "sum", [input](Graph& g, NodeId self) {
            const T d = g.grad_of(self)[0];
            auto& gi = g.grad_of(input);
            for (std::int64_t i = 0; i < gi.numel(); ++i) gi[i] += d;
        });
    }

    NodeId square(NodeId input) {
        const auto& in = value(input);
        TensorT<T> out(in.shape());
        for (std::int64_t i = 0; i < in.numel(); ++i) out[i] = in[i] * in[i];
        return add_node(std::move(out), {input}, "square", [input](Graph& g, NodeId self) {
            const auto& go = g.grad_of(self);
            const auto& x = g.value(input);
            auto& gi = g.grad_of(input);
            for (std::int64_t i = 0; i < go.numel(); ++i) gi[i] += T(2) * x[i] * go[i];
        });
    }

    /// Scalar probe sum(x .* w) with constant weights; used by the gradient
    /// checker to get non-uniform upstream gradients.
    NodeId inner(NodeId input, TensorT<T> weights) {
        const auto& in = value(input);
        if (!in.same_shape(weights))
            throw ShapeError("inner: weights " + shape_str(weights.shape()) + " vs input " +
                             shape_str(in.shape()));
        T acc = T(0);
        for (std::int64_t i = 0; i < in.numel(); ++i) acc += in[i] * weights[i];
        TensorT<T> out({1});
        out[0] = acc;
        auto w = std::make_shared<TensorT<T>>(std::move(weights));
        return add_node(std::move(out), {input}, "inner", [input, w](Graph& g, NodeId self) {
            const T d = g.grad_of(self)[0];
            auto& gi = g.grad_of(input);
            for (std::int64_t i = 0; i < gi.numel(); ++i) gi[i] += d * (*w)[i];
        });
    }

    // ---- backward ----------------------------------------------------------

    /// Populates gradients on every node reachable from `loss`, visiting nodes
    /// in reverse creation order (a reverse topological order by construction).
    void backward(NodeId loss) {
        auto& ln = nodes_[static_cast<std::size_t>(loss)];
        if (ln.value.numel() != 1)
            throw UsageError("backward: loss must be scalar, got shape " + shape_str(ln.value.shape()));
        for (auto& n : nodes_) {
            n.grad = TensorT<T>(n.value.shape());
            n.reachable = false;
        }
        mark_reachable(loss);
        ln.grad[0] = T(1);
        for (NodeId id = loss; id >= 0; --id) {
            auto& n = nodes_[static_cast<std::size_t>(id)];
            if (n.reachable && n.backprop) n.backprop(*this, id);
        }
    }

private:
    struct Node {
        TensorT<T> value;
        TensorT<T> grad;
        std::vector<NodeId> parents;
        std::function<void(Graph&, NodeId)> backprop;
        bool reachable = false;
    };

    bool checked_;
    std::vector<Node> nodes_;
    std::vector<ParamRef> params_;

    TensorT<T>& grad_of(NodeId id) { return nodes_[static_cast<std::size_t>(id)].grad; }

    NodeId add_leaf(TensorT<T> v, const std::string& what) {
        check_finite(v, what);
        nodes_.push_back(Node{std::move(v), {}, {}, nullptr});
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    NodeId add_node(TensorT<T> v, std::vector<NodeId> parents, const char* op,
                    std::function<void(Graph&, NodeId)> backprop) {
        check_finite(v, op);
        nodes_.push_back(Node{std::move(v), {}, std::move(parents), std::move(backprop)});
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    void check_finite(const TensorT<T>& v, const std::string& what) const {
        if (checked_ && !v.all_finite())
            throw NumericError("non-finite values in " + what);
    }

    void mark_reachable(NodeId from) {
        std::vector<NodeId> stack{from};
        while (!stack.empty()) {
            NodeId id = stack.back();
            stack.pop_back();
            auto& n = nodes_[static_cast<std::size_t>(id)];
            if (n.reachable) continue;
            n.reachable = true;
            for (NodeId p : n.parents) stack.push_back(p);
        }
    }

    template <typename IndexFn>
    NodeId cross_entropy_impl(NodeId probs, const std::vector<std::int32_t>& targets, std::int64_t rows,
                              int C, IndexFn idx, const char* op) {
        static constexpr double kClamp = 1e-12;
        const auto& p = value(probs);
        for (std::int64_t r = 0; r < rows; ++r) {
            const std::int32_t t = targets[static_cast<std::size_t>(r)];
            if (t < 0 || t >= C)
                throw ValidationError(std::string(op) + ": target index " + std::to_string(t) +
                                      " out of range for " + std::to_string(C) + " classes at row " +
                                      std::to_string(r));
        }
        double acc = 0.0;
        for (std::int64_t r = 0; r < rows; ++r) {
            const double pv = static_cast<double>(p[idx(r, targets[static_cast<std::size_t>(r)])]);
            acc -= std::log(std::max(pv, kClamp));
        }
        TensorT<T> out({1});
        out[0] = static_cast<T>(acc / static_cast<double>(rows));
        auto tg = std::make_shared<std::vector<std::int32_t>>(targets);
        return add_node(std::move(out), {probs}, op, [probs, tg, rows, idx](Graph& g, NodeId self) {
            const T d = g.grad_of(self)[0];
            const auto& p = g.value(probs);
            auto& gp = g.grad_of(probs);
            const T scale = d / static_cast<T>(rows);
            for (std::int64_t r = 0; r < rows; ++r) {
                const std::int64_t i = idx(r, (*tg)[static_cast<std::size_t>(r)]);
                if (static_cast<double>(p[i]) >= kClamp) gp[i] -= scale / p[i];
            }
        });
    }
};

} // namespace sonoseg
