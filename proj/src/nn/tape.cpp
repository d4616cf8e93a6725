#include "pivm/nn/tape.hpp"

#include <Eigen/Core>
#include <cmath>

namespace pivm::nn {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

// Column matrix (Cin*9, Ho*Wo) for a padded 3x3 convolution.
template <class T>
void im2col(const Tensor<T>& x, int stride, int ho, int wo, std::vector<T>& col) {
    const std::size_t n = static_cast<std::size_t>(ho) * wo;
    col.assign(static_cast<std::size_t>(x.c) * 9 * n, T(0));
    for (int ci = 0; ci < x.c; ++ci) {
        const T* src = x.channel(ci);
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                T* dst = col.data() + (static_cast<std::size_t>(ci) * 9 + ky * 3 + kx) * n;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride + ky - 1;
                    if (iy < 0 || iy >= x.h) continue;
                    const T* row = src + static_cast<std::size_t>(iy) * x.w;
                    T* out = dst + static_cast<std::size_t>(oy) * wo;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride + kx - 1;
                        if (ix >= 0 && ix < x.w) out[ox] = row[ix];
                    }
                }
            }
    }
}

template <class T>
void col2im_add(const std::vector<T>& col, int stride, int ho, int wo, Tensor<T>& dx) {
    const std::size_t n = static_cast<std::size_t>(ho) * wo;
    for (int ci = 0; ci < dx.c; ++ci) {
        T* dst = dx.channel(ci);
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                const T* src = col.data() + (static_cast<std::size_t>(ci) * 9 + ky * 3 + kx) * n;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride + ky - 1;
                    if (iy < 0 || iy >= dx.h) continue;
                    T* row = dst + static_cast<std::size_t>(iy) * dx.w;
                    const T* in = src + static_cast<std::size_t>(oy) * wo;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride + kx - 1;
                        if (ix >= 0 && ix < dx.w) row[ix] += in[ox];
                    }
                }
            }
    }
}

// Stride-1 3x3 convolution as nine GEMMs over a zero-padded copy of the
// input. With padded row length wp = w + 2, tap (ky, kx) reads the padded
// buffer at offset ky * wp + kx; outputs are computed on an h x wp grid whose
// last two columns are discarded.
template <class T>
struct PaddedConv {
    int cin, cout, h, w, wp;
    std::size_t plane;  // (h + 2) * wp
    std::size_t next;   // h * wp

    PaddedConv(int cin_, int cout_, int h_, int w_)
        : cin(cin_), cout(cout_), h(h_), w(w_), wp(w_ + 2),
          plane(static_cast<std::size_t>(h_ + 2) * (w_ + 2)), next(static_cast<std::size_t>(h_) * (w_ + 2)) {}

    std::size_t offset(int tap) const { return static_cast<std::size_t>(tap / 3) * wp + tap % 3; }

    // Two trailing elements cover the overhang of the last channel's view.
    std::vector<T> pad(const Tensor<T>& x) const {
        std::vector<T> p(static_cast<std::size_t>(cin) * plane + 2, T(0));
        for (int c = 0; c < cin; ++c) {
            const T* src = x.channel(c);
            T* dst = p.data() + static_cast<std::size_t>(c) * plane + wp + 1;
            for (int y = 0; y < h; ++y)
                std::copy_n(src + static_cast<std::size_t>(y) * w, w, dst + static_cast<std::size_t>(y) * wp);
        }
        return p;
    }

    // Kernel (cout, cin, 9) split into nine contiguous (cout, cin) matrices.
    std::vector<T> split_taps(const Tensor<T>& wt) const {
        std::vector<T> taps(static_cast<std::size_t>(9) * cout * cin);
        for (int co = 0; co < cout; ++co)
            for (int ci = 0; ci < cin; ++ci)
                for (int k = 0; k < 9; ++k)
                    taps[(static_cast<std::size_t>(k) * cout + co) * cin + ci] =
                        wt.data[(static_cast<std::size_t>(co) * cin + ci) * 9 + k];
        return taps;
    }

    using Strided = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
    using StridedMut = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

    Tensor<T> forward(const std::vector<T>& xpad, const std::vector<T>& taps, const Tensor<T>& bias) const {
        RowMat<T> ext = RowMat<T>::Zero(cout, static_cast<Eigen::Index>(next));
        for (int k = 0; k < 9; ++k) {
            Strided xs(xpad.data() + offset(k), cin, static_cast<Eigen::Index>(next),
                       Eigen::OuterStride<>(static_cast<Eigen::Index>(plane)));
            ext.noalias() += CMapMat<T>(taps.data() + static_cast<std::size_t>(k) * cout * cin, cout, cin) * xs;
        }
        Tensor<T> out(cout, h, w);
        for (int co = 0; co < cout; ++co) {
            const T bv = bias.data[static_cast<std::size_t>(co)];
            T* dst = out.channel(co);
            const T* src = ext.data() + static_cast<std::size_t>(co) * next;
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    dst[static_cast<std::size_t>(y) * w + x] = src[static_cast<std::size_t>(y) * wp + x] + bv;
        }
        return out;
    }

    void backward(const Tensor<T>& gy, const std::vector<T>& xpad, const std::vector<T>& taps, Tensor<T>& gx,
                  Tensor<T>& gw, Tensor<T>& gb) const {
        RowMat<T> g = RowMat<T>::Zero(cout, static_cast<Eigen::Index>(next));
        for (int co = 0; co < cout; ++co) {
            const T* src = gy.channel(co);
            T* dst = g.data() + static_cast<std::size_t>(co) * next;
            T s = 0;
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const T v = src[static_cast<std::size_t>(y) * w + x];
                    dst[static_cast<std::size_t>(y) * wp + x] = v;
                    s += v;
                }
            gb.data[static_cast<std::size_t>(co)] += s;
        }
        std::vector<T> dxpad(static_cast<std::size_t>(cin) * plane + 2, T(0));
        RowMat<T> dwk(cout, cin);
        for (int k = 0; k < 9; ++k) {
            Strided xs(xpad.data() + offset(k), cin, static_cast<Eigen::Index>(next),
                       Eigen::OuterStride<>(static_cast<Eigen::Index>(plane)));
            dwk.noalias() = g * xs.transpose();
            for (int co = 0; co < cout; ++co)
                for (int ci = 0; ci < cin; ++ci)
                    gw.data[(static_cast<std::size_t>(co) * cin + ci) * 9 + k] += dwk(co, ci);
            StridedMut dxs(dxpad.data() + offset(k), cin, static_cast<Eigen::Index>(next),
                           Eigen::OuterStride<>(static_cast<Eigen::Index>(plane)));
            dxs.noalias() +=
                CMapMat<T>(taps.data() + static_cast<std::size_t>(k) * cout * cin, cout, cin).transpose() * g;
        }
        for (int c = 0; c < cin; ++c) {
            const T* src = dxpad.data() + static_cast<std::size_t>(c) * plane + wp + 1;
            T* dst = gx.channel(c);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    dst[static_cast<std::size_t>(y) * w + x] += src[static_cast<std::size_t>(y) * wp + x];
        }
    }
};

template <class T>
T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

}  // namespace

template <class T>
typename Tape<T>::Id Tape<T>::push(Tensor<T> value, std::function<void()> back) {
    require(!consumed_, ErrorKind::internal, "tape: cannot extend a tape after backward()");
    nodes_.push_back(Node{std::move(value), {}, record_ ? std::move(back) : std::function<void()>{}});
    return static_cast<Id>(nodes_.size() - 1);
}

template <class T>
Tensor<T>& Tape<T>::grad_ref(Id id) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.value.same_shape(n.grad) || n.grad.data.size() != n.value.data.size())
        n.grad = Tensor<T>(n.value.c, n.value.h, n.value.w);
    return n.grad;
}

template <class T>
const Tensor<T>& Tape<T>::grad(Id id) {
    require(id >= 0 && static_cast<std::size_t>(id) < nodes_.size(), ErrorKind::internal, "tape: node id out of range");
    return grad_ref(id);
}

template <class T>
typename Tape<T>::Id Tape<T>::leaf(Tensor<T> value) {
    return push(std::move(value), [] {});
}

template <class T>
typename Tape<T>::Id Tape<T>::conv3x3(Id xi, Id wi, Id bi, int stride) {
    const Tensor<T>& x = value(xi);
    const Tensor<T>& w = value(wi);
    const Tensor<T>& b = value(bi);
    require(stride == 1 || stride == 2, ErrorKind::shape, "conv3x3: stride must be 1 or 2");
    require(w.h == x.c && w.w == 9, ErrorKind::shape,
            "conv3x3: kernel " + w.shape_string() + " does not match input " + x.shape_string());
    require(b.c == w.c && b.h == 1 && b.w == 1, ErrorKind::shape, "conv3x3: bias shape mismatch");
    const Id self = static_cast<Id>(nodes_.size());

    if (stride == 1) {
        PaddedConv<T> pc(x.c, w.c, x.h, x.w);
        std::vector<T> xpad = pc.pad(x);
        const auto taps = pc.split_taps(w);
        Tensor<T> out = pc.forward(xpad, taps, b);
        return push(std::move(out), [this, xi, wi, bi, self, pc] {
            const Tensor<T>& gy = nodes_[static_cast<std::size_t>(self)].grad;
            const auto xp = pc.pad(value(xi));
            pc.backward(gy, xp, pc.split_taps(value(wi)), grad_ref(xi), grad_ref(wi), grad_ref(bi));
        });
    }

    const int ho = (x.h - 1) / stride + 1;
    const int wo = (x.w - 1) / stride + 1;
    const int k = x.c * 9;
    const int n = ho * wo;
    std::vector<T> col;
    im2col(x, stride, ho, wo, col);
    Tensor<T> out(w.c, ho, wo);
    MapMat<T> om(out.data.data(), w.c, n);
    om.noalias() = CMapMat<T>(w.data.data(), w.c, k) * CMapMat<T>(col.data(), k, n);
    for (int co = 0; co < w.c; ++co) om.row(co).array() += b.data[static_cast<std::size_t>(co)];

    return push(std::move(out), [this, xi, wi, bi, self, stride, ho, wo, k, n] {
        const Tensor<T>& gy = nodes_[static_cast<std::size_t>(self)].grad;
        const Tensor<T>& xv = value(xi);
        const Tensor<T>& wv = value(wi);
        CMapMat<T> g(gy.data.data(), wv.c, n);
        std::vector<T> c;
        im2col(xv, stride, ho, wo, c);
        CMapMat<T> cm(c.data(), k, n);
        MapMat<T>(grad_ref(wi).data.data(), wv.c, k).noalias() += g * cm.transpose();
        auto& gb = grad_ref(bi);
        // Plain loop: Eigen's vectorised sum depends on buffer alignment.
        for (int co = 0; co < wv.c; ++co) {
            T acc = 0;
            const T* row = gy.data.data() + static_cast<std::size_t>(co) * n;
            for (int j = 0; j < n; ++j) acc += row[j];
            gb.data[static_cast<std::size_t>(co)] += acc;
        }
        std::vector<T> dcol(static_cast<std::size_t>(k) * n);
        MapMat<T>(dcol.data(), k, n).noalias() = CMapMat<T>(wv.data.data(), wv.c, k).transpose() * g;
        col2im_add(dcol, stride, ho, wo, grad_ref(xi));
    });
}

template <class T>
typename Tape<T>::Id Tape<T>::group_norm(Id xi, Id gi, Id bi, int groups, T eps) {
    const Tensor<T>& x = value(xi);
    const Tensor<T>& gamma = value(gi);
    const Tensor<T>& beta = value(bi);
    require(groups > 0 && x.c % groups == 0, ErrorKind::shape, "group_norm: channels not divisible by groups");
    require(gamma.c == x.c && beta.c == x.c, ErrorKind::shape, "group_norm: affine shape mismatch");
    const int cpg = x.c / groups;
    const std::size_t plane = x.plane();
    const std::size_t m = plane * cpg;

    std::vector<T> mean(static_cast<std::size_t>(groups)), rstd(static_cast<std::size_t>(groups));
    Tensor<T> out(x.c, x.h, x.w);
    for (int g = 0; g < groups; ++g) {
        const T* src = x.channel(g * cpg);
        T s = 0;
        for (std::size_t i = 0; i < m; ++i) s += src[i];
        const T mu = s / static_cast<T>(m);
        T v = 0;
        for (std::size_t i = 0; i < m; ++i) v += (src[i] - mu) * (src[i] - mu);
        const T r = T(1) / std::sqrt(v / static_cast<T>(m) + eps);
        mean[static_cast<std::size_t>(g)] = mu;
        rstd[static_cast<std::size_t>(g)] = r;
        for (int cc = 0; cc < cpg; ++cc) {
            const int ch = g * cpg + cc;
            const T ga = gamma.data[static_cast<std::size_t>(ch)];
            const T be = beta.data[static_cast<std::size_t>(ch)];
            const T* xs = x.channel(ch);
            T* ys = out.channel(ch);
            for (std::size_t i = 0; i < plane; ++i) ys[i] = ga * (xs[i] - mu) * r + be;
        }
    }

    const Id self = static_cast<Id>(nodes_.size());
    return push(std::move(out), [this, xi, gi, bi, self, groups, cpg, plane, m, mean = std::move(mean),
                                 rstd = std::move(rstd)] {
        const Tensor<T>& gy = nodes_[static_cast<std::size_t>(self)].grad;
        const Tensor<T>& xv = value(xi);
        const Tensor<T>& gamma_v = value(gi);
        auto& gx = grad_ref(xi);
        auto& gg = grad_ref(gi);
        auto& gbeta = grad_ref(bi);
        std::vector<T> dxhat(m), xhat(m);
        for (int g = 0; g < groups; ++g) {
            const T mu = mean[static_cast<std::size_t>(g)];
            const T r = rstd[static_cast<std::size_t>(g)];
            T sum_d = 0, sum_dx = 0;
            for (int cc = 0; cc < cpg; ++cc) {
                const int ch = g * cpg + cc;
                const T ga = gamma_v.data[static_cast<std::size_t>(ch)];
                const T* xs = xv.channel(ch);
                const T* gys = gy.channel(ch);
                T dg = 0, db = 0;
                for (std::size_t i = 0; i < plane; ++i) {
                    const std::size_t j = static_cast<std::size_t>(cc) * plane + i;
                    xhat[j] = (xs[i] - mu) * r;
                    dxhat[j] = gys[i] * ga;
                    dg += gys[i] * xhat[j];
                    db += gys[i];
                    sum_d += dxhat[j];
                    sum_dx += dxhat[j] * xhat[j];
                }
                gg.data[static_cast<std::size_t>(ch)] += dg;
                gbeta.data[static_cast<std::size_t>(ch)] += db;
            }
            const T inv_m = T(1) / static_cast<T>(m);
            for (int cc = 0; cc < cpg; ++cc) {
                T* gxs = gx.channel(g * cpg + cc);
                for (std::size_t i = 0; i < plane; ++i) {
                    const std::size_t j = static_cast<std::size_t>(cc) * plane + i;
                    gxs[i] += r * (dxhat[j] - inv_m * sum_d - xhat[j] * inv_m * sum_dx);
                }
            }
        }
    });
}

template <class T>
typename Tape<T>::Id Tape<T>::silu(Id xi) {
    const Tensor<T>& x = value(xi);
    Tensor<T> out(x.c, x.h, x.w);
    for (std::size_t i = 0; i < x.numel(); ++i) out.data[i] = x.data[i] * sigmoid(x.data[i]);
    const Id self = static_cast<Id>(nodes_.size());
    return push(std::move(out), [this, xi, self] {
        const auto& gy = nodes_[static_cast<std::size_t>(self)].grad;
        const auto& xv = value(xi);
        auto& gx = grad_ref(xi);
        for (std::size_t i = 0; i < xv.numel(); ++i) {
            const T s = sigmoid(xv.data[i]);
            gx.data[i] += gy.data[i] * s * (T(1) + xv.data[i] * (T(1) - s));
        }
    });
}

template <class T>
typename Tape<T>::Id Tape<T>::relu(Id xi) {
    const Tensor<T>& x = value(xi);
    Tensor<T> out(x.c, x.h, x.w);
    for (std::size_t i = 0; i < x.numel(); ++i) out.data[i] = x.data[i] > T(0) ? x.data[i] : T(0);
    const Id self = static_cast<Id>(nodes_.size());
    return push(std::move(out), [this, xi, self] {
        const auto& gy = nodes_[static_cast<std::size_t>(self)].grad;
        const auto& xv = value(xi);
        auto& gx = grad_ref(xi);
        for (std::size_t i = 0; i < xv.numel(); ++i)
            if (xv.data[i] > T(0)) gx.data[i] += gy.data[i];
    });
}

template <class T>
typename Tape<T>::Id Tape<T>::add(Id ai, Id bi) {
    const Tensor<T>& a = value(ai);
    const Tensor<T>& b = value(bi);
    require(a.same_shape(b), ErrorKind::shape, "add: shape mismatch " + a.shape_string() + " vs " + b.shape_string());
    Tensor<T> out = a;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += b.data[i];
    const Id self = static_cast<Id>(nodes_.size());
    return push(std::move(out), [this, ai, bi, self] {
        const auto& gy = nodes_[static_cast<std::size_t>(self)].grad;
        auto& ga = grad_ref(ai);
        for (std::size_t i = 0; i < gy.numel(); ++i) ga.data[i] += gy.data[i];
        auto& gb = grad_ref(bi);
        for (std::size_t i = 0; i < gy.numel(); ++i) gb.data[i] += gy.data[i];
    });
}

template <class T>
typename Tape<T>::Id Tape<T>::add_channel_bias(Id xi, Id bi) {
    const Tensor<T>& x = value(xi);
    const Tensor<T>& b = value(bi);
    require(b.c == x.c && b.h == 1 && b.w == 1, ErrorKind::shape, "add_channel_bias: bias shape mismatch");
    Tensor<T> out = x;
    for (int ch = 0; ch < x.c; ++ch) {
        T* p = out.channel(ch);
        const T v = b.data[static_cast<std::size_t>(ch)];
        for (std::size_t i = 0; i < x.plane(); ++i) p[i] += v;
    }
    const Id self = static_cast<Id>(nodes_.size());
    return push(std::move(out), [this, xi, bi, self] {
        const auto& gy = nodes_[static_cast<std::size_t>(self)].grad;
        auto& gx = grad_ref(xi);
        for (std::size_t i = 0; i < gy.numel(); ++i) gx.data[i] += gy.data[i];
        auto& gb = grad_ref(bi);
        for (int ch = 0; ch < gy.c; ++ch) {
            const T* p = gy.channel(ch);
            T s = 0;
            for (std::size_t i = 0; i < gy.plane(); ++i) s += p[i];
            gb.data[static_cast<std::size_t>(ch)] += s;
        }
    });
}

template <class T>
typename Tape<T>::Id Tape<T>::concat(Id ai, Id bi) {
    const Tensor<T>& a = value(ai);
    const Tensor<T>& b = value(bi);
    require(a.h == b.h && a.w == b.w, ErrorKind::shape, "concat: spatial mismatch");
    Tensor<T> out(a.c + b.c, a.h, a.w);
    std::copy(a.data.begin(), a.data.end(), out.data.begin());
    std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.numel()));
    const Id self = static_cast<Id>(nodes_.size());
    const std::size_t split = a.numel();
    return push(std::move(out), [this, ai, bi, self, split] {
        const auto& gy = nodes_[static_cast<std::size_t>(self)].grad;
        auto& ga = grad_ref(ai);
        for (std::size_t i = 0; i < split; ++i) ga.data[i] += gy.data[i];
        auto& gb = grad_ref(bi);
        for (std::size_t i = 0; i < gb.numel(); ++i) gb.data[i] += gy.data[split + i];
    });
}

template <class T>
typename Tape<T>::Id Tape<T>::upsample2x(Id xi) {
    const Tensor<T>& x = value(xi);
    Tensor<T> out(x.c, x.h * 2, x.w * 2);
    for (int ch = 0; ch < x.c; ++ch) {
        const T* s = x.channel(ch);
        T* d = out.channel(ch);
        for (int y = 0; y < out.h; ++y)
            for (int xx = 0; xx < out.w; ++xx)
                d[static_cast<std::size_t>(y) * out.w + xx] = s[static_cast<std::size_t>(y / 2) * x.w + xx / 2];
    }
    const Id self = static_cast<Id>(nodes_.size());
    return push(std::move(out), [this, xi, self] {
        const auto& gy = nodes_[static_cast<std::size_t>(self)].grad;
        auto& gx = grad_ref(xi);
        for (int ch = 0; ch < gy.c; ++ch) {
            const T* s = gy.channel(ch);
            T* d = gx.channel(ch);
            for (int y = 0; y < gy.h; ++y)
                for (int xx = 0; xx < gy.w; ++xx)
                    d[static_cast<std::size_t>(y / 2) * gx.w + xx / 2] += s[static_cast<std::size_t>(y) * gy.w + xx];
        }
    });
}

template <class T>
typename Tape<T>::Id Tape<T>::avg_pool2x(Id xi) {
    const Tensor<T>& x = value(xi);
    require(x.h % 2 == 0 && x.w % 2 == 0, ErrorKind::shape, "avg_pool2x: odd spatial size");
    Tensor<T> out(x.c, x.h / 2, x.w / 2);
    for (int ch = 0; ch < x.c; ++ch) {
        const T* s = x.channel(ch);
        T* d = out.channel(ch);
        for (int y = 0; y < out.h; ++y)
            for (int xx = 0; xx < out.w; ++xx) {
                const std::size_t i = static_cast<std::size_t>(2 * y) * x.w + 2 * xx;
                d[static_cast<std::size_t>(y) * out.w + xx] =
                    T(0.25) * (s[i] + s[i + 1] + s[i + static_cast<std::size_t>(x.w)] + s[i + static_cast<std::size_t>(x.w) + 1]);
            }
    }
    const Id self = static_cast<Id>(nodes_.size());
    return push(std::move(out), [this, xi, self] {
        const auto& gy = nodes_[static_cast<std::size_t>(self)].grad;
        auto& gx = grad_ref(xi);
        for (int ch = 0; ch < gx.c; ++ch) {
            const T* s = gy.channel(ch);
            T* d = gx.channel(ch);
            for (int y = 0; y < gx.h; ++y)
                for (int xx = 0; xx < gx.w; ++xx)
                    d[static_cast<std::size_t>(y) * gx.w + xx] += T(0.25) * s[static_cast<std::size_t>(y / 2) * gy.w + xx / 2];
        }
    });
}

template <class T>
typename Tape<T>::Id Tape<T>::linear(Id xi, Id wi, Id bi) {
    const Tensor<T>& x = value(xi);
    const Tensor<T>& w = value(wi);
    const Tensor<T>& b = value(bi);
    require(w.h == static_cast<int>(x.numel()) && w.w == 1, ErrorKind::shape, "linear: weight shape mismatch");
    require(b.c == w.c && b.h == 1 && b.w == 1, ErrorKind::shape, "linear: bias shape mismatch");
    Tensor<T> out(w.c, 1, 1);
    for (int o = 0; o < w.c; ++o) {
        T s = b.data[static_cast<std::size_t>(o)];
        for (int i = 0; i < w.h; ++i) s += w.data[static_cast<std::size_t>(o) * w.h + i] * x.data[static_cast<std::size_t>(i)];
        out.data[static_cast<std::size_t>(o)] = s;
    }
    const Id self = static_cast<Id>(nodes_.size());
    return push(std::move(out), [this, xi, wi, bi, self] {
        const auto& gy = nodes_[static_cast<std::size_t>(self)].grad;
        const auto& xv = value(xi);
        const auto& wv = value(wi);
        auto& gx = grad_ref(xi);
        auto& gw = grad_ref(wi);
        auto& gb = grad_ref(bi);
        for (int o = 0; o < wv.c; ++o) {
            const T g = gy.data[static_cast<std::size_t>(o)];
            gb.data[static_cast<std::size_t>(o)] += g;
            for (int i = 0; i < wv.h; ++i) {
                const std::size_t j = static_cast<std::size_t>(o) * wv.h + i;
                gw.data[j] += g * xv.data[static_cast<std::size_t>(i)];
                gx.data[static_cast<std::size_t>(i)] += g * wv.data[j];
            }
        }
    });
}

template <class T>
void Tape<T>::backward(Id output, const Tensor<T>& output_grad) {
    require(record_, ErrorKind::internal, "tape: backward() on a non-recording tape");
    require(!consumed_, ErrorKind::internal, "tape: backward() on a stale or cleared tape");
    require(output >= 0 && static_cast<std::size_t>(output) < nodes_.size(), ErrorKind::internal,
            "tape: backward() output id out of range");
    require(value(output).same_shape(output_grad), ErrorKind::shape, "tape: output gradient shape mismatch");
    consumed_ = true;
    grad_ref(output) = output_grad;
    for (Id i = output; i >= 0; --i) {
        auto& n = nodes_[static_cast<std::size_t>(i)];
        if (n.grad.numel() == 0 || !n.back) continue;
        n.back();
    }
}

template <class T>
void Tape<T>::clear() {
    nodes_.clear();
    consumed_ = false;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace pivm::nn
