// SPDX-License-Identifier: Apache-2.0
#pragma once

// Encoder (UNet producing per-pixel distribution parameters phi) and the
// shared decoding head that maps (phi || v_{m,k}) to one logit plane per label.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pancakes/core/errors.hpp"
#include "pancakes/core/grid.hpp"
#include "pancakes/core/rng.hpp"
#include "pancakes/core/types.hpp"
#include "pancakes/embed.hpp"
#include "pancakes/nn/layers.hpp"

namespace pancakes {

struct ModelConfig {
    int unet_levels = 4;
    int features = 32;
    int phi_channels = 32;
    int head_layers = 3;
    int head_features = 32;
    int half_width = 8;  // J; embeddings have 2J entries, v_{m,k} has 4J
    std::uint64_t seed = 0;

    void validate() const {
        if (unet_levels < 1) throw DomainError("unet_levels must be >= 1");
        if (features < 1 || phi_channels < 1 || head_features < 1)
            throw DomainError("feature counts must be >= 1");
        if (head_layers < 1) throw DomainError("head_layers must be >= 1");
        if (half_width < 1) throw DomainError("half_width must be >= 1");
    }

    /// Spatial dims must be divisible by this.
    int spatial_multiple() const { return 1 << (unet_levels - 1); }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"unet_levels", c.unet_levels}, {"features", c.features},
                       {"phi_channels", c.phi_channels}, {"head_layers", c.head_layers},
                       {"head_features", c.head_features}, {"half_width", c.half_width},
                       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    c.unet_levels = j.value("unet_levels", d.unet_levels);
    c.features = j.value("features", d.features);
    c.phi_channels = j.value("phi_channels", d.phi_channels);
    c.head_layers = j.value("head_layers", d.head_layers);
    c.head_features = j.value("head_features", d.head_features);
    c.half_width = j.value("half_width", d.half_width);
    c.seed = j.value("seed", d.seed);
}

/// Per-pixel distribution parameters: phi_channels x (H * W).
template <class S>
using DistParams = nn::Tensor<S>;

template <class S>
class Model {
public:
    using Mat = nn::Mat<S>;
    using Vec = nn::Vec<S>;
    using Tensor = nn::Tensor<S>;
    /// K x P logit or probability planes; each label's plane is contiguous.
    using Planes = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

    struct Block {
        nn::Conv2d conv1;
        nn::PReLU act1;
        nn::Conv2d conv2;
        nn::PReLU act2;
    };

    struct BlockCache {
        Tensor in, pre1, mid, pre2, out;
    };

    struct EncoderCache {
        std::vector<BlockCache> down;
        std::vector<BlockCache> up;
        std::vector<std::vector<Eigen::Index>> pool_argmax;  // [l] for down level l >= 1
        Tensor phi_in;  // input of the output projection
    };

    struct HeadCache {
        std::vector<Mat> pre;   // pre-activations of every head layer
        std::vector<Mat> post;  // activations of every head layer
        Mat joined;             // last activation + skip
    };

    explicit Model(ModelConfig cfg = {}) : cfg_(cfg) {
        cfg_.validate();
        build();
        params_.assign(layout_.total(), S(0));
        Rng rng(derive_seed(cfg_.seed, {0x1A17}));
        nn::init_params(params_, slots_, rng);
    }

    const ModelConfig& config() const { return cfg_; }
    std::size_t param_count() const { return params_.size(); }
    std::span<S> params() { return params_; }
    std::span<const S> params() const { return params_; }
    int embedding_width() const { return 4 * cfg_.half_width; }

    /// Runs the UNet. Fills `cache` for a later backward pass when given.
    DistParams<S> encode(const Grid& image, EncoderCache* cache = nullptr) const {
        if (image.dtype() != DType::f32) throw DomainError("encode expects an f32 intensity grid");
        const int mult = cfg_.spatial_multiple();
        if (image.height() % mult || image.width() % mult)
            throw DomainError("image " + std::to_string(image.height()) + "x" + std::to_string(image.width()) +
                              " is not divisible by " + std::to_string(mult));
        Tensor x(1, image.height(), image.width());
        const auto v = image.values<float>();
        for (std::size_t i = 0; i < v.size(); ++i) x.data(0, Eigen::Index(i)) = static_cast<S>(v[i]);
        return encode_tensor(x, cache);
    }

    DistParams<S> encode_tensor(const Tensor& x, EncoderCache* cache = nullptr) const {
        const S* p = params_.data();
        const int levels = cfg_.unet_levels;
        EncoderCache local;
        EncoderCache& c = cache ? *cache : local;
        c.down.assign(levels, {});
        c.up.assign(levels - 1, {});
        c.pool_argmax.assign(levels, {});

        Mat scratch;
        std::vector<Tensor> skips(levels);
        Tensor cur = x;
        for (int l = 0; l < levels; ++l) {
            if (l > 0) {
                Tensor pooled;
                nn::max_pool2(cur, pooled, cache ? &c.pool_argmax[l] : nullptr);
                cur = std::move(pooled);
            }
            cur = block_forward(p, down_[l], cur, cache ? &c.down[l] : nullptr, scratch);
            skips[l] = cur;
        }
        for (int l = levels - 2; l >= 0; --l) {
            Tensor up;
            nn::upsample2(cur, up);
            Tensor cat(up.channels() + skips[l].channels(), up.height, up.width);
            cat.data.topRows(up.channels()) = up.data;
            cat.data.bottomRows(skips[l].channels()) = skips[l].data;
            cur = block_forward(p, up_[l], cat, cache ? &c.up[l] : nullptr, scratch);
        }
        Tensor phi;
        phi_out_.forward(p, cur, phi, scratch);
        if (cache) c.phi_in = cur;
        return phi;
    }

    /// Backpropagates dL/dphi through the encoder, accumulating into `grads`.
    void encode_backward(const EncoderCache& c, const Mat& dphi, S* grads) const {
        const S* p = params_.data();
        const int levels = cfg_.unet_levels;
        Mat scratch;
        Tensor dcur;
        phi_out_.backward(p, grads, c.phi_in, dphi, &dcur, scratch);

        std::vector<Tensor> dskip(levels);
        for (int l = 0; l < levels - 1; ++l) {
            Tensor dcat = block_backward(p, grads, up_[l], c.up[l], dcur.data, scratch);
            const int f_up = cfg_.features;
            dskip[l].data = dcat.data.bottomRows(dcat.channels() - f_up);
            Mat dup = dcat.data.topRows(f_up);
            Tensor dnext(f_up, dcat.height / 2, dcat.width / 2);
            nn::upsample2_backward(dup, dcat.width, dnext);
            dcur = std::move(dnext);
        }
        // dcur now holds the gradient of the bottleneck output.
        for (int l = levels - 1; l >= 0; --l) {
            if (l < levels - 1) dcur.data += dskip[l].data;
            Tensor din = block_backward(p, grads, down_[l], c.down[l], dcur.data, scratch);
            if (l == 0) break;
            Tensor dprev(din.channels(), din.height * 2, din.width * 2);
            nn::max_pool2_backward(din.data, c.pool_argmax[l], dprev);
            dcur = std::move(dprev);
        }
    }

    /// W_phi * phi, shared by every (m, k) candidate of one image.
    Mat project_phi(const DistParams<S>& phi) const {
        return head_proj_.W(params_.data()).leftCols(cfg_.phi_channels) * phi.data;
    }

    /// W_v * v_{m,k} + b: the spatially constant part of the head's first layer.
    Vec project_embedding(const Vec& embedding) const {
        const S* p = params_.data();
        return head_proj_.W(p).rightCols(embedding_width()) * embedding + head_proj_.b(p);
    }
    Vec project_embedding(int m, int num_protocols, int k, int num_labels) const {
        return project_embedding(embedding_vector(m, num_protocols, k, num_labels));
    }

    /// Logit plane for one candidate; `out` receives P values.
    void head_logits(const Mat& proj_phi, const Vec& proj_v, std::span<S> out) const {
        const S* p = params_.data();
        const Eigen::Index pixels = proj_phi.cols();
        constexpr Eigen::Index kTile = 256;
        Mat first, cur, next;
        for (Eigen::Index t0 = 0; t0 < pixels; t0 += kTile) {
            const Eigen::Index n = std::min(kTile, pixels - t0);
            first = proj_phi.middleCols(t0, n);
            first.colwise() += proj_v;
            head_act_[0].forward_inplace(p, first);
            const Mat* h = &first;
            for (std::size_t l = 0; l < head_hidden_.size(); ++l) {
                next.noalias() = head_hidden_[l].W(p) * (*h);
                next.colwise() += head_hidden_[l].b(p);
                head_act_[l + 1].forward_inplace(p, next);
                std::swap(cur, next);
                h = &cur;
            }
            Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>> dst(out.data() + t0, n);
            if (!head_hidden_.empty()) {
                cur += first;
                dst.noalias() = head_logit_.W(p) * cur;
            } else {
                dst.noalias() = head_logit_.W(p) * first;
            }
            dst.array() += head_logit_.b(p)[0];
        }
    }

    /// Same as head_logits over the full image, keeping activations for backward.
    void head_logits_cached(const Mat& proj_phi, const Vec& proj_v, std::span<S> out, HeadCache& c) const {
        const S* p = params_.data();
        const std::size_t layers = head_hidden_.size() + 1;
        c.pre.resize(layers);
        c.post.resize(layers);
        c.pre[0] = proj_phi;
        c.pre[0].colwise() += proj_v;
        c.post[0] = c.pre[0];
        head_act_[0].forward_inplace(p, c.post[0]);
        for (std::size_t l = 1; l < layers; ++l) {
            c.pre[l].noalias() = head_hidden_[l - 1].W(p) * c.post[l - 1];
            c.pre[l].colwise() += head_hidden_[l - 1].b(p);
            c.post[l] = c.pre[l];
            head_act_[l].forward_inplace(p, c.post[l]);
        }
        c.joined = c.post[layers - 1];
        if (layers > 1) c.joined += c.post[0];
        Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>> dst(out.data(), proj_phi.cols());
        dst.noalias() = head_logit_.W(p) * c.joined;
        dst.array() += head_logit_.b(p)[0];
    }

    /// Backward through the head for one candidate. Adds dL/d(W_phi phi) to
    /// `dproj_phi` and accumulates all head parameter gradients except the
    /// W_phi block, which the caller finalizes with `finish_head_backward`.
    void head_backward(const HeadCache& c, std::span<const S> dlogit, const Vec& embedding, Mat& dproj_phi,
                       S* grads) const {
        const S* p = params_.data();
        const std::size_t layers = head_hidden_.size() + 1;
        Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> dl(dlogit.data(), c.joined.cols());
        head_logit_.W(grads).noalias() += dl * c.joined.transpose();
        head_logit_.b(grads)[0] += dl.sum();

        Mat dh = head_logit_.W(p).transpose() * dl;  // d joined
        Mat dskip;
        if (layers > 1) dskip = dh;
        for (std::size_t l = layers - 1; l >= 1; --l) {
            head_act_[l].backward_inplace(p, grads, c.pre[l], dh);
            head_hidden_[l - 1].W(grads).noalias() += dh * c.post[l - 1].transpose();
            head_hidden_[l - 1].b(grads) += dh.rowwise().sum();
            Mat prev = head_hidden_[l - 1].W(p).transpose() * dh;
            dh = std::move(prev);
        }
        if (layers > 1) dh += dskip;
        head_act_[0].backward_inplace(p, grads, c.pre[0], dh);
        dproj_phi += dh;
        const Vec dc = dh.rowwise().sum();
        head_proj_.b(grads) += dc;
        head_proj_.W(grads).rightCols(embedding_width()).noalias() += dc * embedding.transpose();
    }

    /// Turns the accumulated dL/d(W_phi phi) into W_phi gradients and dL/dphi.
    Mat finish_head_backward(const DistParams<S>& phi, const Mat& dproj_phi, S* grads) const {
        head_proj_.W(grads).leftCols(cfg_.phi_channels).noalias() += dproj_phi * phi.data.transpose();
        return head_proj_.W(params_.data()).leftCols(cfg_.phi_channels).transpose() * dproj_phi;
    }

    Vec embedding_vector(int m, int num_protocols, int k, int num_labels) const {
        const auto v = pair_embedding(m, num_protocols, k, num_labels, cfg_.half_width);
        Vec vv(embedding_width());
        for (int i = 0; i < embedding_width(); ++i) vv[i] = static_cast<S>(v[i]);
        return vv;
    }

    /// K logit planes (row k-1 for label k) for protocol m.
    Planes protocol_logits(const Mat& proj_phi, int m, int num_protocols, int num_labels) const {
        Planes logits(num_labels, proj_phi.cols());
        for (int k = 1; k <= num_labels; ++k)
            head_logits(proj_phi, project_embedding(m, num_protocols, k, num_labels),
                        std::span<S>(logits.row(k - 1).data(), static_cast<std::size_t>(proj_phi.cols())));
        return logits;
    }

    /// Per-pixel softmax over the K planes, sums accumulated in double.
    static Planes softmax_columns(const Planes& logits) {
        Planes out(logits.rows(), logits.cols());
        for (Eigen::Index i = 0; i < logits.cols(); ++i) {
            const S mx = logits.col(i).maxCoeff();
            double total = 0.0;
            for (Eigen::Index k = 0; k < logits.rows(); ++k) {
                const S e = std::exp(logits(k, i) - mx);
                out(k, i) = e;
                total += static_cast<double>(e);
            }
            const double inv = 1.0 / total;
            for (Eigen::Index k = 0; k < logits.rows(); ++k)
                out(k, i) = static_cast<S>(static_cast<double>(out(k, i)) * inv);
        }
        return out;
    }

    SoftLabelMap<S> decode_protocol(const DistParams<S>& phi, int m, int num_protocols, int num_labels) const {
        if (num_labels < 2) throw DomainError("decode needs K >= 2");
        if (m < 1 || m > num_protocols) throw DomainError("protocol index out of range");
        if (phi.channels() != cfg_.phi_channels) throw DomainError("phi channel count mismatch");
        const Mat proj = project_phi(phi);
        return to_soft_map(softmax_columns(protocol_logits(proj, m, num_protocols, num_labels)), phi.height,
                           phi.width);
    }

    static SoftLabelMap<S> to_soft_map(const Planes& probs, int h, int w) {
        SoftLabelMap<S> map;
        map.num_labels = static_cast<int>(probs.rows());
        map.height = h;
        map.width = w;
        map.data.assign(probs.data(), probs.data() + probs.size());
        return map;
    }

    MultiProtocolOutput<S> segment(const Grid& image, int num_protocols, int num_labels) const {
        if (num_protocols < 1) throw DomainError("M must be >= 1");
        if (num_labels < 2) throw DomainError("K must be >= 2");
        const auto phi = encode(image);
        const Mat proj = project_phi(phi);
        MultiProtocolOutput<S> out;
        for (int m = 1; m <= num_protocols; ++m) {
            out.soft.push_back(to_soft_map(softmax_columns(protocol_logits(proj, m, num_protocols, num_labels)),
                                           phi.height, phi.width));
            out.hard.push_back(out.soft.back().hard_map());
        }
        return out;
    }

    /// Every image goes through the network independently.
    std::vector<MultiProtocolOutput<S>> segment_set(const ImageSet& set, const ProtocolRequest& req) const {
        if (set.size() == 0) throw DomainError("segment_set needs a non-empty set");
        req.validate();
        if (req.half_width != cfg_.half_width)
            throw DomainError("request J=" + std::to_string(req.half_width) + " differs from model J=" +
                              std::to_string(cfg_.half_width));
        std::vector<MultiProtocolOutput<S>> out;
        out.reserve(set.size());
        for (const auto& img : set.images()) out.push_back(segment(img, req.num_protocols, req.num_labels));
        return out;
    }

    /// Parameter slots in layout order (used by init and by size reports).
    const std::vector<nn::ParamSlot>& slots() const { return slots_; }

    /// Configures the head so every logit is zero: the softmax is uniform.
    void zero_head() {
        auto zero = [&](const nn::ParamSlot& s) { std::fill_n(params_.begin() + s.offset, s.size, S(0)); };
        zero(head_proj_.weight);
        zero(head_proj_.bias);
        for (const auto& l : head_hidden_) {
            zero(l.weight);
            zero(l.bias);
        }
        zero(head_logit_.weight);
        zero(head_logit_.bias);
    }

    template <class T>
    Model<T> cast() const {
        Model<T> m(cfg_);
        auto dst = m.params();
        for (std::size_t i = 0; i < params_.size(); ++i) dst[i] = static_cast<T>(params_[i]);
        return m;
    }

private:
    void add_conv(nn::Conv2d& c, int cin, int cout, int k) {
        c = nn::Conv2d(layout_, cin, cout, k);
        slots_.push_back(c.weight);
        slots_.push_back(c.bias);
    }
    void add_prelu(nn::PReLU& a, int c) {
        a = nn::PReLU(layout_, c);
        slots_.push_back(a.slope);
    }
    void add_block(Block& b, int cin, int cout) {
        add_conv(b.conv1, cin, cout, 3);
        add_prelu(b.act1, cout);
        add_conv(b.conv2, cout, cout, 3);
        add_prelu(b.act2, cout);
    }

    void build() {
        const int f = cfg_.features;
        down_.resize(cfg_.unet_levels);
        up_.resize(cfg_.unet_levels - 1);
        for (int l = 0; l < cfg_.unet_levels; ++l) add_block(down_[l], l == 0 ? 1 : f, f);
        for (int l = cfg_.unet_levels - 2; l >= 0; --l) add_block(up_[l], 2 * f, f);
        add_conv(phi_out_, f, cfg_.phi_channels, 1);

        const int hf = cfg_.head_features;
        add_conv(head_proj_, cfg_.phi_channels + embedding_width(), hf, 1);
        head_act_.resize(cfg_.head_layers);
        add_prelu(head_act_[0], hf);
        head_hidden_.resize(cfg_.head_layers - 1);
        for (int l = 0; l < cfg_.head_layers - 1; ++l) {
            add_conv(head_hidden_[l], hf, hf, 1);
            add_prelu(head_act_[l + 1], hf);
        }
        add_conv(head_logit_, hf, 1, 1);
    }

    Tensor block_forward(const S* p, const Block& b, const Tensor& in, BlockCache* c, Mat& scratch) const {
        Tensor pre1, pre2;
        b.conv1.forward(p, in, pre1, scratch);
        Tensor mid = pre1;
        b.act1.forward_inplace(p, mid.data);
        b.conv2.forward(p, mid, pre2, scratch);
        Tensor out = pre2;
        b.act2.forward_inplace(p, out.data);
        if (c) {
            c->in = in;
            c->pre1 = std::move(pre1);
            c->mid = std::move(mid);
            c->pre2 = std::move(pre2);
        }
        return out;
    }

    Tensor block_backward(const S* p, S* grads, const Block& b, const BlockCache& c, const Mat& dout,
                          Mat& scratch) const {
        Mat d2 = dout;
        b.act2.backward_inplace(p, grads, c.pre2.data, d2);
        Tensor dmid;
        b.conv2.backward(p, grads, c.mid, d2, &dmid, scratch);
        b.act1.backward_inplace(p, grads, c.pre1.data, dmid.data);
        Tensor din;
        b.conv1.backward(p, grads, c.in, dmid.data, &din, scratch);
        return din;
    }

    ModelConfig cfg_;
    nn::ParamLayout layout_;
    std::vector<nn::ParamSlot> slots_;
    std::vector<S> params_;

    std::vector<Block> down_, up_;
    nn::Conv2d phi_out_;
    nn::Conv2d head_proj_;
    std::vector<nn::Conv2d> head_hidden_;
    std::vector<nn::PReLU> head_act_;
    nn::Conv2d head_logit_;
};

}  // namespace pancakes
