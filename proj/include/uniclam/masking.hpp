#pragma once

#include <string>
#include <vector>

#include "uniclam/encoder.hpp"

namespace uniclam {

/// N soft masks over a spatial grid (vision, [N,H,W]) or token sequence
/// (text, [N,q]). Channel-wise softmax makes them a partition of unity at
/// every location.
struct MaskSetShape {
    Modality modality;
    int n = 0;
};

template <class S>
struct MaskSetT {
    Modality modality = Modality::Vision;
    TensorT<S> values;  // [N,H,W] or [N,q]

    int count() const { return values.shape[0]; }
};

using MaskSet = MaskSetT<double>;

/// Occlude or keep the masked region. The training default suppresses what
/// the mask selects: x * (1 - m).
enum class MaskSemantics { Occlude, Keep };

struct MaskingConfig {
    int n_vision = 4;
    int n_text = 2;
    int channels = 8;   // conv width of the vision encoder-decoder
    int hidden = 32;    // text transformer width (matches encoder hidden)
    int heads = 4;
    int text_layers = 3;
};

/// Mask generators for both modalities: a small strided-conv encoder-decoder
/// for vision and a shallow transformer for text, each feeding a 1x1
/// convolution head that emits N channels, softmaxed per location.
template <class S>
struct MaskingModelParamsT {
    MaskingConfig cfg;
    std::string name;

    TensorT<S> down1, down2, up1, up2;  // vision conv stack
    TensorT<S> head_v;                  // [N_v, C, 1, 1]
    std::vector<TransformerLayerT<S>> text_layers;
    TensorT<S> head_t;                  // [h, N_t]

    template <class F>
    void for_each_vision_param(F&& fn) {
        fn(name + ".v.down1", down1);
        fn(name + ".v.down2", down2);
        fn(name + ".v.up1", up1);
        fn(name + ".v.up2", up2);
        fn(name + ".v.head", head_v);
    }

    template <class F>
    void for_each_text_param(F&& fn) {
        for (std::size_t k = 0; k < text_layers.size(); ++k)
            text_layers[k].for_each_param(name + ".t.layer" + std::to_string(k), fn);
        fn(name + ".t.head", head_t);
    }

    template <class F>
    void for_each_param(F&& fn) {
        for_each_vision_param(fn);
        for_each_text_param(fn);
    }
};

template <class S>
MaskingModelParamsT<S> make_masking_model(const MaskingConfig& cfg, std::uint64_t seed,
                                          const std::string& name) {
    if (cfg.n_vision < 1 || cfg.n_text < 1) fail("masking config: mask counts must be >= 1");
    MaskingModelParamsT<S> m;
    m.cfg = cfg;
    m.name = name;
    int C = cfg.channels;
    auto conv = [&](Shape sh, const std::string& nm) {
        Rng r(mix_seed(seed, fnv1a(name + nm)));
        TensorT<S> t(sh);
        double fan_in = static_cast<double>(sh[1] * sh[2] * sh[3]);
        double s = std::sqrt(2.0 / fan_in);
        for (auto& x : t.v) x = static_cast<S>(r.uniform(-s, s));
        t.requires_grad = true;
        return t;
    };
    m.down1 = conv({C, 1, 3, 3}, ".v.down1");
    m.down2 = conv({C, C, 3, 3}, ".v.down2");
    m.up1 = conv({C, C, 3, 3}, ".v.up1");
    m.up2 = conv({C, C, 3, 3}, ".v.up2");
    m.head_v = conv({cfg.n_vision, C, 1, 1}, ".v.head");
    for (int k = 0; k < cfg.text_layers; ++k)
        m.text_layers.push_back(make_transformer_layer<S>(cfg.hidden, cfg.heads, seed,
                                                          name + ".t.layer" + std::to_string(k)));
    Rng rh(mix_seed(seed, fnv1a(name + ".t.head")));
    m.head_t = detail::xavier<S>({cfg.hidden, cfg.n_text}, rh);
    return m;
}

/// N_v masks at full image resolution, differentiable w.r.t. the model.
/// Output is [N_v, H, W] with channel sums equal to one everywhere.
template <class S>
VarT<S> mask_image_var(Ctx<S>& ctx, MaskingModelParamsT<S>& m, VarT<S> image) {
    const auto& sh = image.shape();
    if (sh.size() != 2) fail("mask_image: expected rank-2 image, got " + shape_str(sh));
    auto x = reshape(image, {1, sh[0], sh[1]});
    auto h1 = relu(conv2d(x, ctx.use(m.down1), 2, 1));
    auto h2 = relu(conv2d(h1, ctx.use(m.down2), 2, 1));
    auto u1 = relu(conv2d(upsample2x(h2), ctx.use(m.up1), 1, 1));
    auto u2 = relu(conv2d(upsample2x(u1), ctx.use(m.up2), 1, 1));
    auto logits = conv2d(u2, ctx.use(m.head_v), 1, 0);
    return softmax(logits, 0);
}

template <class S>
VarT<S> mask_image(Ctx<S>& ctx, MaskingModelParamsT<S>& m, const TensorT<S>& image) {
    return mask_image_var(ctx, m, ctx.input(image));
}

/// N_t per-token masks from embedded text, [N_t, q]. The 1x1 convolution over
/// the sequence is a per-token linear map.
template <class S>
VarT<S> mask_text(Ctx<S>& ctx, MaskingModelParamsT<S>& m, VarT<S> embedded) {
    const auto& sh = embedded.shape();
    if (sh.size() != 2 || sh[1] != m.cfg.hidden)
        fail("mask_text: embedded tokens " + shape_str(sh) + " do not match hidden " +
             std::to_string(m.cfg.hidden));
    EncoderConfig tc;
    tc.hidden = m.cfg.hidden;
    tc.heads = m.cfg.heads;
    tc.layers = m.cfg.text_layers;
    VarT<S> x = embedded;
    for (auto& layer : m.text_layers) x = transformer_block(ctx, layer, tc, x).tokens;
    auto logits = matmul(x, ctx.use(m.head_t));  // [q, N_t]
    return transpose(softmax(logits, 1));        // [N_t, q]
}

/// x with the region selected by mask_j suppressed: x * (1 - m_j) under
/// occlude semantics, x * m_j under keep.
template <class S>
VarT<S> apply_mask(VarT<S> x, VarT<S> mask_j, MaskSemantics sem = MaskSemantics::Occlude) {
    const auto& xs = x.shape();
    const auto& ms = mask_j.shape();
    bool image_like = xs == ms;
    bool text_like = xs.size() == 2 && ms.size() == 1 && ms[0] == xs[0];
    if (!image_like && !text_like)
        fail("apply_mask: mask " + shape_str(ms) + " does not match input " + shape_str(xs));
    VarT<S> factor = mask_j;
    if (sem == MaskSemantics::Occlude)
        factor = add(smul(mask_j, -1.0), mask_j.tape->constant_scalar(S(1)));
    return image_like ? mul(x, factor) : mul_prefix(x, factor);
}

/// Table 2 "RM" baseline: one-hot channel per location, drawn uniformly.
/// Partition of unity holds exactly.
template <class S>
MaskSetT<S> random_mask_baseline(std::uint64_t seed, Modality modality, int n, Shape location_shape) {
    if (n < 1) fail("random_mask_baseline: n must be >= 1");
    MaskSetT<S> out;
    out.modality = modality;
    Shape full = {n};
    for (int d : location_shape) full.push_back(d);
    out.values = TensorT<S>(full);
    std::size_t locs = shape_numel(location_shape);
    Rng rng(seed, "random-mask");
    for (std::size_t loc = 0; loc < locs; ++loc) {
        int c = rng.next_int(n);
        out.values.v[static_cast<std::size_t>(c) * locs + loc] = S(1);
    }
    return out;
}

/// Mean per-location entropy of the channel distribution; the collapse
/// monitor reported in training metrics.
template <class S>
double mask_entropy(const TensorT<S>& masks) {
    int n = masks.shape[0];
    std::size_t locs = masks.numel() / static_cast<std::size_t>(n);
    double total = 0.0;
    for (std::size_t loc = 0; loc < locs; ++loc) {
        double h = 0.0;
        for (int c = 0; c < n; ++c) {
            double p = static_cast<double>(masks.v[static_cast<std::size_t>(c) * locs + loc]);
            if (p > 0.0) h -= p * std::log(p);
        }
        total += h;
    }
    return total / static_cast<double>(locs);
}

}  // namespace uniclam
