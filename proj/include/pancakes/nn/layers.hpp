// SPDX-License-Identifier: Apache-2.0
#pragma once

// Minimal 2D conv-net building blocks with explicit backward passes.
// Activations are (channels x pixels) column-major matrices, so every pixel
// owns a contiguous channel vector; pixel index = row * width + col.
// Parameters live in one flat buffer; layers hold offsets into it.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <vector>

#include "pancakes/core/errors.hpp"
#include "pancakes/core/rng.hpp"

namespace pancakes::nn {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <class S>
using MatMap = Eigen::Map<Mat<S>>;
template <class S>
using CMatMap = Eigen::Map<const Mat<S>>;
template <class S>
using VecMap = Eigen::Map<Vec<S>>;
template <class S>
using CVecMap = Eigen::Map<const Vec<S>>;

/// Feature map over an H x W grid.
template <class S>
struct Tensor {
    Mat<S> data;  // channels x (H * W)
    int height = 0;
    int width = 0;

    Tensor() = default;
    Tensor(int channels, int h, int w) : data(Mat<S>::Zero(channels, Eigen::Index(h) * w)), height(h), width(w) {}

    int channels() const { return static_cast<int>(data.rows()); }
    Eigen::Index pixels() const { return data.cols(); }
};

/// Accumulates parameter slots and hands out offsets.
class ParamLayout {
public:
    std::size_t add(std::size_t n) {
        const std::size_t off = total_;
        total_ += n;
        return off;
    }
    std::size_t total() const { return total_; }

private:
    std::size_t total_ = 0;
};

enum class InitKind { fan_in_uniform, zeros, constant };

struct ParamSlot {
    std::size_t offset = 0;
    std::size_t size = 0;
    InitKind init = InitKind::zeros;
    double scale = 0.0;  // bound for fan_in_uniform, value for constant
};

/// Convolution with a square odd kernel (1 or 3), stride 1, zero padding.
struct Conv2d {
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 3;
    ParamSlot weight;  // out x (kernel^2 * in), column-major
    ParamSlot bias;    // out

    Conv2d() = default;
    Conv2d(ParamLayout& layout, int cin, int cout, int k, double prelu_slope = 0.25)
        : in_channels(cin), out_channels(cout), kernel(k) {
        if (k != 1 && k != 3) throw DomainError("only 1x1 and 3x3 kernels are supported");
        const std::size_t fan_in = static_cast<std::size_t>(k) * k * cin;
        const double gain = std::sqrt(6.0 / ((1.0 + prelu_slope * prelu_slope) * static_cast<double>(fan_in)));
        weight = {layout.add(fan_in * cout), fan_in * cout, InitKind::fan_in_uniform, gain};
        bias = {layout.add(cout), static_cast<std::size_t>(cout), InitKind::zeros, 0.0};
    }

    int taps() const { return kernel * kernel; }

    template <class S>
    CMatMap<S> W(const S* params) const {
        return CMatMap<S>(params + weight.offset, out_channels, Eigen::Index(taps()) * in_channels);
    }
    template <class S>
    MatMap<S> W(S* params) const {
        return MatMap<S>(params + weight.offset, out_channels, Eigen::Index(taps()) * in_channels);
    }
    template <class S>
    CVecMap<S> b(const S* params) const {
        return CVecMap<S>(params + bias.offset, out_channels);
    }
    template <class S>
    VecMap<S> b(S* params) const {
        return VecMap<S>(params + bias.offset, out_channels);
    }

    /// Gathers the 3x3 neighbourhoods of every pixel into (9 * C) x P columns.
    template <class S>
    static void im2col(const Tensor<S>& in, Mat<S>& col) {
        const int c = in.channels(), h = in.height, w = in.width;
        col.resize(Eigen::Index(9) * c, in.pixels());
        for (int r = 0; r < h; ++r) {
            for (int x = 0; x < w; ++x) {
                const Eigen::Index p = Eigen::Index(r) * w + x;
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int tap = (dy + 1) * 3 + (dx + 1);
                        auto dst = col.col(p).segment(Eigen::Index(tap) * c, c);
                        const int rr = r + dy, xx = x + dx;
                        if (rr < 0 || rr >= h || xx < 0 || xx >= w) dst.setZero();
                        else dst = in.data.col(Eigen::Index(rr) * w + xx);
                    }
                }
            }
        }
    }

    template <class S>
    static void col2im_add(const Mat<S>& dcol, Tensor<S>& din) {
        const int c = din.channels(), h = din.height, w = din.width;
        for (int r = 0; r < h; ++r) {
            for (int x = 0; x < w; ++x) {
                const Eigen::Index p = Eigen::Index(r) * w + x;
                for (int dy = -1; dy <= 1; ++dy) {
                    const int rr = r + dy;
                    if (rr < 0 || rr >= h) continue;
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int xx = x + dx;
                        if (xx < 0 || xx >= w) continue;
                        const int tap = (dy + 1) * 3 + (dx + 1);
                        din.data.col(Eigen::Index(rr) * w + xx) += dcol.col(p).segment(Eigen::Index(tap) * c, c);
                    }
                }
            }
        }
    }

    template <class S>
    void forward(const S* params, const Tensor<S>& in, Tensor<S>& out, Mat<S>& scratch) const {
        if (in.channels() != in_channels) throw DomainError("conv input channel mismatch");
        out.height = in.height;
        out.width = in.width;
        if (kernel == 1) {
            out.data.noalias() = W(params) * in.data;
        } else {
            im2col(in, scratch);
            out.data.noalias() = W(params) * scratch;
        }
        out.data.colwise() += b(params);
    }

    /// Accumulates weight/bias gradients into `grads`; writes (not adds) din.
    template <class S>
    void backward(const S* params, S* grads, const Tensor<S>& in, const Mat<S>& dout, Tensor<S>* din,
                  Mat<S>& scratch) const {
        b(grads) += dout.rowwise().sum();
        if (kernel == 1) {
            W(grads).noalias() += dout * in.data.transpose();
            if (din) {
                din->height = in.height;
                din->width = in.width;
                din->data.noalias() = W(params).transpose() * dout;
            }
            return;
        }
        im2col(in, scratch);
        W(grads).noalias() += dout * scratch.transpose();
        if (din) {
            scratch.noalias() = W(params).transpose() * dout;
            *din = Tensor<S>(in_channels, in.height, in.width);
            col2im_add(scratch, *din);
        }
    }
};

/// Channel-wise PReLU: y = x for x > 0, a_c * x otherwise.
struct PReLU {
    int channels = 0;
    ParamSlot slope;

    PReLU() = default;
    PReLU(ParamLayout& layout, int c, double init = 0.25) : channels(c) {
        slope = {layout.add(c), static_cast<std::size_t>(c), InitKind::constant, init};
    }

    template <class S>
    CVecMap<S> a(const S* params) const {
        return CVecMap<S>(params + slope.offset, channels);
    }

    // Written so the compiler emits vector min/max and blends instead of
    // branches. Both keep the `!(v > 0)` convention: NaN and -0 take the slope branch.
    template <class S, class Derived>
    void forward_inplace(const S* params, Eigen::MatrixBase<Derived>& x) const {
        const S* a = params + slope.offset;
        auto& X = x.derived();
        eigen_assert(X.innerStride() == 1 && !Derived::IsRowMajor);
        for (Eigen::Index p = 0; p < X.cols(); ++p) {
            S* col = &X.coeffRef(0, p);
            for (Eigen::Index ch = 0; ch < X.rows(); ++ch)
                col[ch] = std::max(col[ch], S(0)) + std::min(col[ch], S(0)) * a[ch];
        }
    }

    /// Given pre-activation x and dy, returns dx in place of dy and accumulates slope grads.
    template <class S, class XD, class GD>
    void backward_inplace(const S* params, S* grads, const Eigen::MatrixBase<XD>& x,
                          Eigen::MatrixBase<GD>& dy) const {
        const S* a = params + slope.offset;
        S* ga = grads + slope.offset;
        const auto& X = x.derived();
        auto& D = dy.derived();
        eigen_assert(X.innerStride() == 1 && D.innerStride() == 1);
        for (Eigen::Index p = 0; p < X.cols(); ++p) {
            const S* xc = &X.coeff(0, p);
            S* dc = &D.coeffRef(0, p);
            for (Eigen::Index ch = 0; ch < X.rows(); ++ch) {
                const S v = xc[ch], d = dc[ch];
                ga[ch] += std::min(v, S(0)) * d;
                dc[ch] = v > S(0) ? d : d * a[ch];
            }
        }
    }
};

/// 2x2 max pooling, stride 2. Ties keep the first candidate in scan order.
template <class S>
void max_pool2(const Tensor<S>& in, Tensor<S>& out, std::vector<Eigen::Index>* argmax) {
    if (in.height % 2 || in.width % 2) throw DomainError("max_pool2 needs even spatial dims");
    const int h = in.height / 2, w = in.width / 2, c = in.channels();
    out = Tensor<S>(c, h, w);
    if (argmax) argmax->assign(static_cast<std::size_t>(c) * h * w, 0);
    for (int r = 0; r < h; ++r)
        for (int x = 0; x < w; ++x) {
            const Eigen::Index q = Eigen::Index(r) * w + x;
            const Eigen::Index cand[4] = {Eigen::Index(2 * r) * in.width + 2 * x,
                                          Eigen::Index(2 * r) * in.width + 2 * x + 1,
                                          Eigen::Index(2 * r + 1) * in.width + 2 * x,
                                          Eigen::Index(2 * r + 1) * in.width + 2 * x + 1};
            for (int ch = 0; ch < c; ++ch) {
                Eigen::Index best = cand[0];
                S bv = in.data(ch, cand[0]);
                for (int i = 1; i < 4; ++i) {
                    const S v = in.data(ch, cand[i]);
                    if (v > bv) {
                        bv = v;
                        best = cand[i];
                    }
                }
                out.data(ch, q) = bv;
                if (argmax) (*argmax)[static_cast<std::size_t>(q) * c + ch] = best;
            }
        }
}

template <class S>
void max_pool2_backward(const Mat<S>& dout, const std::vector<Eigen::Index>& argmax, Tensor<S>& din) {
    const Eigen::Index c = dout.rows();
    for (Eigen::Index q = 0; q < dout.cols(); ++q)
        for (Eigen::Index ch = 0; ch < c; ++ch) din.data(ch, argmax[static_cast<std::size_t>(q * c + ch)]) += dout(ch, q);
}

/// Nearest-neighbour 2x upsampling.
template <class S>
void upsample2(const Tensor<S>& in, Tensor<S>& out) {
    const int h = in.height * 2, w = in.width * 2;
    out.data.resize(in.channels(), Eigen::Index(h) * w);
    out.height = h;
    out.width = w;
    for (int r = 0; r < h; ++r)
        for (int x = 0; x < w; ++x)
            out.data.col(Eigen::Index(r) * w + x) = in.data.col(Eigen::Index(r / 2) * in.width + x / 2);
}

template <class S>
void upsample2_backward(const Mat<S>& dout, int out_width, Tensor<S>& din) {
    din.data.setZero();
    const Eigen::Index h = dout.cols() / out_width;
    for (Eigen::Index r = 0; r < h; ++r)
        for (Eigen::Index x = 0; x < out_width; ++x)
            din.data.col((r / 2) * din.width + x / 2) += dout.col(r * out_width + x);
}

/// Fills every slot of `layout` per its init rule.
template <class S>
void init_params(std::vector<S>& params, const std::vector<ParamSlot>& slots, Rng& rng) {
    for (const auto& s : slots) {
        for (std::size_t i = 0; i < s.size; ++i) {
            S& v = params[s.offset + i];
            switch (s.init) {
            case InitKind::fan_in_uniform: v = static_cast<S>(rng.uniform(-s.scale, s.scale)); break;
            case InitKind::zeros: v = S(0); break;
            case InitKind::constant: v = static_cast<S>(s.scale); break;
            }
        }
    }
}

}  // namespace pancakes::nn
