#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "uniclam/gradcheck.hpp"
#include "uniclam/tape.hpp"

namespace uniclam {

enum class Modality { Vision, Text };

struct EncoderConfig {
    int layers = 4;       // K
    int hidden = 32;      // h
    int heads = 4;
    int patch_size = 4;
    int vocab_size = 64;
    int q_max = 12;
    int proj_dim = 16;
    int image_size = 32;
    bool positional = true;

    int head_dim() const { return hidden / heads; }
    int mlp_hidden() const { return 2 * hidden; }
    int image_tokens() const {
        int g = image_size / patch_size;
        return g * g;
    }

    void validate() const {
        if (layers < 2) fail("encoder config: layer count must be >= 2");
        if (hidden % heads != 0) fail("encoder config: hidden width not divisible by heads");
        if (proj_dim < 2) fail("encoder config: projection dim must be >= 2");
        if (image_size % patch_size != 0) fail("encoder config: image size not divisible by patch");
    }
};

/// One transformer block. Attention projections are stored per head so that
/// no slicing primitive is needed; the output projection is summed over
/// per-head dh x h blocks, which equals concat-then-project.
template <class S>
struct TransformerLayerT {
    std::vector<TensorT<S>> wq, wk, wv, wo;
    TensorT<S> ln1_g, ln1_b, ln2_g, ln2_b;
    TensorT<S> w1, b1, w2, b2;

    template <class F>
    void for_each_param(const std::string& prefix, F&& fn) {
        for (std::size_t h = 0; h < wq.size(); ++h) {
            fn(prefix + ".q" + std::to_string(h), wq[h]);
            fn(prefix + ".k" + std::to_string(h), wk[h]);
            fn(prefix + ".v" + std::to_string(h), wv[h]);
            fn(prefix + ".o" + std::to_string(h), wo[h]);
        }
        fn(prefix + ".ln1.g", ln1_g);
        fn(prefix + ".ln1.b", ln1_b);
        fn(prefix + ".ln2.g", ln2_g);
        fn(prefix + ".ln2.b", ln2_b);
        fn(prefix + ".mlp.w1", w1);
        fn(prefix + ".mlp.b1", b1);
        fn(prefix + ".mlp.w2", w2);
        fn(prefix + ".mlp.b2", b2);
    }
};

namespace detail {

template <class S>
TensorT<S> xavier(Shape sh, Rng& rng) {
    TensorT<S> t(sh);
    double fan_in = sh.size() >= 2 ? static_cast<double>(sh[sh.size() - 2]) : static_cast<double>(sh.back());
    double fan_out = static_cast<double>(sh.back());
    double s = std::sqrt(6.0 / (fan_in + fan_out));
    for (auto& x : t.v) x = static_cast<S>(rng.uniform(-s, s));
    t.requires_grad = true;
    return t;
}

template <class S>
TensorT<S> zeros_param(Shape sh) {
    TensorT<S> t(std::move(sh));
    t.requires_grad = true;
    return t;
}

template <class S>
TensorT<S> ones_param(Shape sh) {
    TensorT<S> t(std::move(sh), S(1));
    t.requires_grad = true;
    return t;
}

}  // namespace detail

template <class S>
TransformerLayerT<S> make_transformer_layer(int hidden, int heads, std::uint64_t seed,
                                            const std::string& name) {
    TransformerLayerT<S> l;
    int dh = hidden / heads;
    for (int h = 0; h < heads; ++h) {
        Rng rq(mix_seed(seed, fnv1a(name + ".q" + std::to_string(h))));
        Rng rk(mix_seed(seed, fnv1a(name + ".k" + std::to_string(h))));
        Rng rv(mix_seed(seed, fnv1a(name + ".v" + std::to_string(h))));
        Rng ro(mix_seed(seed, fnv1a(name + ".o" + std::to_string(h))));
        l.wq.push_back(detail::xavier<S>({hidden, dh}, rq));
        l.wk.push_back(detail::xavier<S>({hidden, dh}, rk));
        l.wv.push_back(detail::xavier<S>({hidden, dh}, rv));
        l.wo.push_back(detail::xavier<S>({dh, hidden}, ro));
    }
    l.ln1_g = detail::ones_param<S>({hidden});
    l.ln1_b = detail::zeros_param<S>({hidden});
    l.ln2_g = detail::ones_param<S>({hidden});
    l.ln2_b = detail::zeros_param<S>({hidden});
    Rng r1(mix_seed(seed, fnv1a(name + ".mlp.w1")));
    Rng r2(mix_seed(seed, fnv1a(name + ".mlp.w2")));
    l.w1 = detail::xavier<S>({hidden, 2 * hidden}, r1);
    l.b1 = detail::zeros_param<S>({2 * hidden});
    l.w2 = detail::xavier<S>({2 * hidden, hidden}, r2);
    l.b2 = detail::zeros_param<S>({hidden});
    return l;
}

/// Dual-purpose encoder stack: a patch projector (vision) or token embedding
/// table (text), K transformer layers, and a 2-layer projection head whose
/// output is L2-normalized.
template <class S>
struct EncoderStackT {
    EncoderConfig cfg;
    Modality modality = Modality::Vision;
    std::string name;

    TensorT<S> patch_w, patch_b;  // vision embedder
    TensorT<S> embed;             // text embedding table (f_emb)
    std::vector<TransformerLayerT<S>> layers;
    TensorT<S> pw1, pb1, pw2, pb2;  // projection head

    template <class F>
    void for_each_embedder_param(F&& fn) {
        if (modality == Modality::Vision) {
            fn(name + ".patch.w", patch_w);
            fn(name + ".patch.b", patch_b);
        } else {
            fn(name + ".embed", embed);
        }
    }

    template <class F>
    void for_each_head_param(F&& fn) {
        fn(name + ".proj.w1", pw1);
        fn(name + ".proj.b1", pb1);
        fn(name + ".proj.w2", pw2);
        fn(name + ".proj.b2", pb2);
    }

    /// All owned parameters: embedder, layers, projection head.
    template <class F>
    void for_each_param(F&& fn) {
        for_each_embedder_param(fn);
        for (std::size_t k = 0; k < layers.size(); ++k)
            layers[k].for_each_param(name + ".layer" + std::to_string(k), fn);
        for_each_head_param(fn);
    }

    std::size_t param_count() {
        std::size_t n = 0;
        for_each_param([&](const std::string&, TensorT<S>& t) { n += t.numel(); });
        return n;
    }
};

template <class S>
EncoderStackT<S> make_encoder_stack(const EncoderConfig& cfg, Modality modality,
                                    std::uint64_t seed, const std::string& name,
                                    bool with_layers = true) {
    cfg.validate();
    EncoderStackT<S> st;
    st.cfg = cfg;
    st.modality = modality;
    st.name = name;
    int p2 = cfg.patch_size * cfg.patch_size;
    if (modality == Modality::Vision) {
        Rng r(mix_seed(seed, fnv1a(name + ".patch.w")));
        st.patch_w = detail::xavier<S>({p2, cfg.hidden}, r);
        st.patch_b = detail::zeros_param<S>({cfg.hidden});
    } else {
        Rng r(mix_seed(seed, fnv1a(name + ".embed")));
        st.embed = TensorT<S>({cfg.vocab_size, cfg.hidden});
        for (auto& x : st.embed.v) x = static_cast<S>(r.uniform(-0.1, 0.1));
        st.embed.requires_grad = true;
    }
    if (with_layers)
        for (int k = 0; k < cfg.layers; ++k)
            st.layers.push_back(make_transformer_layer<S>(cfg.hidden, cfg.heads, seed,
                                                          name + ".layer" + std::to_string(k)));
    Rng r1(mix_seed(seed, fnv1a(name + ".proj.w1")));
    Rng r2(mix_seed(seed, fnv1a(name + ".proj.w2")));
    st.pw1 = detail::xavier<S>({cfg.hidden, cfg.hidden}, r1);
    st.pb1 = detail::zeros_param<S>({cfg.hidden});
    st.pw2 = detail::xavier<S>({cfg.hidden, cfg.proj_dim}, r2);
    st.pb2 = detail::zeros_param<S>({cfg.proj_dim});
    return st;
}

// ---------------------------------------------------------------------------
// forward builders
// ---------------------------------------------------------------------------

/// Fixed sinusoidal positional encodings, added after embedding.
template <class S>
TensorT<S> positional_encoding(int tokens, int hidden) {
    TensorT<S> pe({tokens, hidden});
    for (int t = 0; t < tokens; ++t)
        for (int i = 0; i < hidden; ++i) {
            double angle = t / std::pow(10000.0, 2.0 * (i / 2) / hidden);
            pe.v[static_cast<std::size_t>(t) * hidden + i] =
                static_cast<S>((i % 2 == 0) ? std::sin(angle) : std::cos(angle));
        }
    return pe;
}

template <class S>
VarT<S> embed_image_tokens(Ctx<S>& ctx, EncoderStackT<S>& st, VarT<S> image) {
    const auto& sh = image.shape();
    if (sh.size() != 2) fail("embed_image: expected a rank-2 image, got " + shape_str(sh));
    if (sh[0] % st.cfg.patch_size || sh[1] % st.cfg.patch_size)
        fail("embed_image: image " + shape_str(sh) + " not divisible by patch " +
             std::to_string(st.cfg.patch_size));
    auto patches = extract_patches(image, st.cfg.patch_size);
    auto tokens = add(matmul(patches, ctx.use(st.patch_w)), ctx.use(st.patch_b));
    if (st.cfg.positional) {
        auto pe = ctx.tape.constant(positional_encoding<S>(tokens.shape()[0], st.cfg.hidden));
        tokens = add(tokens, pe);
    }
    return tokens;
}

template <class S>
VarT<S> embed_image(Ctx<S>& ctx, EncoderStackT<S>& st, const TensorT<S>& image) {
    return embed_image_tokens(ctx, st, ctx.input(image));
}

template <class S>
VarT<S> embed_text(Ctx<S>& ctx, EncoderStackT<S>& st, const std::vector<int>& ids) {
    if (ids.empty()) fail("embed_text: empty token sequence");
    if (static_cast<int>(ids.size()) > st.cfg.q_max)
        fail("embed_text: sequence of " + std::to_string(ids.size()) + " exceeds q_max " +
             std::to_string(st.cfg.q_max));
    for (std::size_t i = 0; i < ids.size(); ++i)
        if (ids[i] < 0 || ids[i] >= st.cfg.vocab_size)
            fail("embed_text: token id " + std::to_string(ids[i]) + " out of range at index " +
                 std::to_string(i));
    auto tokens = gather_rows(ctx.use(st.embed), ids);
    if (st.cfg.positional) {
        auto pe = ctx.tape.constant(positional_encoding<S>(static_cast<int>(ids.size()), st.cfg.hidden));
        tokens = add(tokens, pe);
    }
    return tokens;
}

template <class S>
struct LayerOutT {
    VarT<S> tokens;
    std::vector<VarT<S>> attention;  // one row-stochastic [T,T] per head
};

/// Pre-norm transformer block.
template <class S>
LayerOutT<S> transformer_block(Ctx<S>& ctx, TransformerLayerT<S>& layer, const EncoderConfig& cfg,
                               VarT<S> x) {
    double scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));
    auto xn = add(mul(layernorm(x), ctx.use(layer.ln1_g)), ctx.use(layer.ln1_b));
    LayerOutT<S> out{x, {}};
    VarT<S> attn_sum;
    for (int h = 0; h < cfg.heads; ++h) {
        auto q = matmul(xn, ctx.use(layer.wq[h]));
        auto k = matmul(xn, ctx.use(layer.wk[h]));
        auto v = matmul(xn, ctx.use(layer.wv[h]));
        auto scores = smul(matmul(q, transpose(k)), scale);
        auto a = softmax(scores, 1);
        out.attention.push_back(a);
        auto head = matmul(matmul(a, v), ctx.use(layer.wo[h]));
        attn_sum = (h == 0) ? head : add(attn_sum, head);
    }
    auto y = add(x, attn_sum);
    auto yn = add(mul(layernorm(y), ctx.use(layer.ln2_g)), ctx.use(layer.ln2_b));
    auto hmid = relu(add(matmul(yn, ctx.use(layer.w1)), ctx.use(layer.b1)));
    auto mlp = add(matmul(hmid, ctx.use(layer.w2)), ctx.use(layer.b2));
    out.tokens = add(y, mlp);
    return out;
}

template <class S>
struct EncodeOutT {
    VarT<S> pooled;                                 // [h], pre-projection
    VarT<S> z;                                      // [proj_dim], unit norm
    std::vector<std::vector<VarT<S>>> attention;    // [layer][head]
};

/// Divide a vector by its own L2 norm on the tape (exp(-log ||x||) keeps the
/// norm inside the gradient).
template <class S>
VarT<S> l2_normalize(VarT<S> x) {
    auto inv_norm = exp(smul(log(l2norm(x)), -1.0));
    return mul(x, inv_norm);
}

template <class S>
EncodeOutT<S> encode_tokens(Ctx<S>& ctx, EncoderStackT<S>& st,
                            std::vector<TransformerLayerT<S>>& layers, VarT<S> tokens) {
    if (tokens.shape().size() != 2 || tokens.shape()[1] != st.cfg.hidden)
        fail("encode: token width " + shape_str(tokens.shape()) + " does not match hidden " +
             std::to_string(st.cfg.hidden));
    EncodeOutT<S> out;
    VarT<S> x = tokens;
    for (auto& layer : layers) {
        auto lo = transformer_block(ctx, layer, st.cfg, x);
        x = lo.tokens;
        out.attention.push_back(std::move(lo.attention));
    }
    out.pooled = mean_axis(x, 0);
    auto hmid = relu(add(matmul(reshape(out.pooled, {1, st.cfg.hidden}), ctx.use(st.pw1)),
                         ctx.use(st.pb1)));
    auto proj = add(matmul(hmid, ctx.use(st.pw2)), ctx.use(st.pb2));
    out.z = l2_normalize(reshape(proj, {st.cfg.proj_dim}));
    return out;
}

template <class S>
EncodeOutT<S> encode(Ctx<S>& ctx, EncoderStackT<S>& st, VarT<S> tokens) {
    return encode_tokens(ctx, st, st.layers, tokens);
}

/// Value-level attention extraction: one full forward, attention grids out.
template <class S>
std::vector<std::vector<TensorT<S>>> extract_attention(EncoderStackT<S>& st, const TensorT<S>& image) {
    TapeT<S> tape;
    Ctx<S> ctx(tape);
    auto tokens = embed_image(ctx, st, image);
    auto out = encode(ctx, st, tokens);
    std::vector<std::vector<TensorT<S>>> grids;
    for (auto& layer : out.attention) {
        grids.emplace_back();
        for (auto& a : layer) grids.back().push_back(a.val());
    }
    return grids;
}

template <class S>
std::vector<std::vector<TensorT<S>>> extract_attention_text(EncoderStackT<S>& st,
                                                            const std::vector<int>& ids) {
    TapeT<S> tape;
    Ctx<S> ctx(tape);
    auto tokens = embed_text(ctx, st, ids);
    auto out = encode(ctx, st, tokens);
    std::vector<std::vector<TensorT<S>>> grids;
    for (auto& layer : out.attention) {
        grids.emplace_back();
        for (auto& a : layer) grids.back().push_back(a.val());
    }
    return grids;
}

}  // namespace uniclam
