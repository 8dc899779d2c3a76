#pragma once

#include <vector>

#include "uniclam/masking.hpp"
#include "uniclam/sharing.hpp"

namespace uniclam {

/// Components of the combined pre-training objective:
/// total = beta * l_clam_v + (1 - beta) * l_clam_t + lambda * l_gs.
struct LossBreakdown {
    double l_clam_v = 0.0;
    double l_clam_t = 0.0;
    double l_gs = 0.0;
    double total = 0.0;
    double tau = 0.0;
    double beta = 0.0;
    double lambda = 0.0;
};

/// InfoNCE over a combined batch of 2n representations. For anchor i the
/// positive is its counterpart; the denominator runs over the 2n-1 non-self
/// entries. Mean over the n anchors.
template <class S>
VarT<S> info_nce(Ctx<S>& ctx, const std::vector<VarT<S>>& anchors,
                 const std::vector<VarT<S>>& positives, double tau) {
    std::size_t n = anchors.size();
    if (n < 2) fail("info_nce: batch size must be >= 2 (no negatives otherwise)");
    if (positives.size() != n) fail("info_nce: anchor/positive count mismatch");
    if (tau <= 0.0) fail("info_nce: temperature must be positive");

    std::vector<VarT<S>> all;
    all.insert(all.end(), anchors.begin(), anchors.end());
    all.insert(all.end(), positives.begin(), positives.end());

    VarT<S> total;
    for (std::size_t i = 0; i < n; ++i) {
        auto pos = smul(reshape(cosine(all[i], all[n + i]), {1}), 1.0 / tau);
        std::vector<VarT<S>> others;
        for (std::size_t k = 0; k < all.size(); ++k) {
            if (k == i) continue;
            others.push_back(smul(reshape(cosine(all[i], all[k]), {1}), 1.0 / tau));
        }
        auto denom = logsumexp(concat(others));
        auto term = sub(denom, pos);
        total = (i == 0) ? term : add(total, term);
    }
    return smul(total, 1.0 / static_cast<double>(n));
}

/// CLAM head over already-encoded representations: anchors[i][j] is the
/// encoding of sample i under mask j, unmasked[i] the plain encoding. The
/// positive pair sits in the numerator only; negatives are the unmasked
/// encodings of the other batch items, exactly k != i.
template <class S>
VarT<S> clam_head(Ctx<S>& ctx, const std::vector<std::vector<VarT<S>>>& anchors,
                  const std::vector<VarT<S>>& unmasked, double tau) {
    std::size_t n = unmasked.size();
    if (n < 2) fail("clam_loss: batch size must be >= 2");
    if (tau <= 0.0) fail("clam_loss: temperature must be positive");
    if (anchors.size() != n) fail("clam_loss: anchor/unmasked count mismatch");
    std::size_t n_masks = anchors[0].size();

    VarT<S> total;
    bool first = true;
    for (std::size_t j = 0; j < n_masks; ++j) {
        for (std::size_t i = 0; i < n; ++i) {
            auto pos = smul(reshape(cosine(anchors[i][j], unmasked[i]), {1}), 1.0 / tau);
            std::vector<VarT<S>> negs;
            for (std::size_t k = 0; k < n; ++k) {
                if (k == i) continue;
                negs.push_back(smul(reshape(cosine(anchors[i][j], unmasked[k]), {1}), 1.0 / tau));
            }
            auto term = sub(logsumexp(concat(negs)), pos);
            total = first ? term : add(total, term);
            first = false;
        }
    }
    (void)ctx;
    return smul(total, 1.0 / static_cast<double>(n_masks * n));
}

/// How masks are produced for the CLAM anchors.
enum class MaskSource { Adversarial, Random };

template <class S>
struct ClamBuildOut {
    VarT<S> loss;
    std::vector<TensorT<S>> mask_values;  // per sample, [N,...]
};

/// Monolithic single-tape CLAM loss over an image batch: generates masks,
/// encodes N occluded anchors plus the unmasked view per sample, applies the
/// head. Differentiable w.r.t. encoder and masking parameters alike.
template <class S>
ClamBuildOut<S> clam_loss_vision(Ctx<S>& ctx, EncoderStackT<S>& enc,
                                 std::vector<TransformerLayerT<S>>& layers,
                                 MaskingModelParamsT<S>& masker,
                                 const std::vector<TensorT<S>>& images, double tau,
                                 MaskSemantics sem = MaskSemantics::Occlude,
                                 MaskSource source = MaskSource::Adversarial,
                                 const std::vector<MaskSetT<S>>* random_masks = nullptr) {
    std::size_t n = images.size();
    ClamBuildOut<S> out;
    std::vector<std::vector<VarT<S>>> anchors(n);
    std::vector<VarT<S>> unmasked(n);
    for (std::size_t i = 0; i < n; ++i) {
        VarT<S> image = ctx.input(images[i]);
        VarT<S> masks;
        if (source == MaskSource::Adversarial) {
            masks = mask_image_var(ctx, masker, image);
        } else {
            if (!random_masks) fail("clam_loss: random mask source without masks");
            masks = ctx.input((*random_masks)[i].values);
        }
        out.mask_values.push_back(masks.val());
        int n_masks = masks.shape()[0];
        for (int j = 0; j < n_masks; ++j) {
            auto occluded = apply_mask(image, select0(masks, j), sem);
            auto tokens = embed_image_tokens(ctx, enc, occluded);
            anchors[i].push_back(encode_tokens(ctx, enc, layers, tokens).z);
        }
        auto tokens = embed_image_tokens(ctx, enc, image);
        unmasked[i] = encode_tokens(ctx, enc, layers, tokens).z;
    }
    out.loss = clam_head(ctx, anchors, unmasked, tau);
    return out;
}

/// Text counterpart: masks are generated from the embedded tokens (f_emb
/// output) and occlude whole token rows.
template <class S>
ClamBuildOut<S> clam_loss_text(Ctx<S>& ctx, EncoderStackT<S>& enc,
                               std::vector<TransformerLayerT<S>>& layers,
                               MaskingModelParamsT<S>& masker,
                               const std::vector<std::vector<int>>& token_batch, double tau,
                               MaskSemantics sem = MaskSemantics::Occlude,
                               MaskSource source = MaskSource::Adversarial,
                               const std::vector<MaskSetT<S>>* random_masks = nullptr) {
    std::size_t n = token_batch.size();
    ClamBuildOut<S> out;
    std::vector<std::vector<VarT<S>>> anchors(n);
    std::vector<VarT<S>> unmasked(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto embedded = embed_text(ctx, enc, token_batch[i]);
        VarT<S> masks;
        if (source == MaskSource::Adversarial) {
            masks = mask_text(ctx, masker, embedded);
        } else {
            if (!random_masks) fail("clam_loss: random mask source without masks");
            masks = ctx.input((*random_masks)[i].values);
        }
        out.mask_values.push_back(masks.val());
        int n_masks = masks.shape()[0];
        for (int j = 0; j < n_masks; ++j) {
            auto occluded = apply_mask(embedded, select0(masks, j), sem);
            anchors[i].push_back(encode_tokens(ctx, enc, layers, occluded).z);
        }
        unmasked[i] = encode_tokens(ctx, enc, layers, embedded).z;
    }
    out.loss = clam_head(ctx, anchors, unmasked, tau);
    return out;
}

enum class SharingMode { Gradual, Hard, None };

template <class S>
struct UniclamVars {
    VarT<S> l_clam_v, l_clam_t, l_gs, total;
    std::vector<TensorT<S>> masks_v, masks_t;

    LossBreakdown breakdown(double tau, double beta, double lambda) const {
        LossBreakdown b;
        b.l_clam_v = static_cast<double>(l_clam_v.scalar());
        b.l_clam_t = static_cast<double>(l_clam_t.scalar());
        b.l_gs = static_cast<double>(l_gs.scalar());
        b.total = static_cast<double>(total.scalar());
        b.tau = tau;
        b.beta = beta;
        b.lambda = lambda;
        return b;
    }
};

/// Full pre-training objective on one tape (Eq. 9 composition): CLAM per
/// modality plus the sharing penalty. `et_layers` lets hard sharing alias the
/// vision layers.
template <class S>
UniclamVars<S> uniclam_loss(Ctx<S>& ctx, EncoderStackT<S>& ev, EncoderStackT<S>& et,
                            std::vector<TransformerLayerT<S>>& ev_layers,
                            std::vector<TransformerLayerT<S>>& et_layers,
                            MaskingModelParamsT<S>& masking,
                            const std::vector<TensorT<S>>& images,
                            const std::vector<std::vector<int>>& captions, double tau, double beta,
                            double lambda, SharingMode sharing = SharingMode::Gradual,
                            MaskSemantics sem = MaskSemantics::Occlude,
                            MaskSource source = MaskSource::Adversarial,
                            const std::vector<MaskSetT<S>>* random_masks_v = nullptr,
                            const std::vector<MaskSetT<S>>* random_masks_t = nullptr) {
    if (beta < 0.0 || beta > 1.0) fail("uniclam_loss: beta must lie in [0,1]");
    if (lambda < 0.0) fail("uniclam_loss: lambda must be >= 0");
    UniclamVars<S> out;
    auto v = clam_loss_vision(ctx, ev, ev_layers, masking, images, tau, sem, source, random_masks_v);
    auto t = clam_loss_text(ctx, et, et_layers, masking, captions, tau, sem, source, random_masks_t);
    out.l_clam_v = v.loss;
    out.l_clam_t = t.loss;
    out.masks_v = std::move(v.mask_values);
    out.masks_t = std::move(t.mask_values);
    if (sharing == SharingMode::Gradual) out.l_gs = sharing_penalty(ctx, ev, et);
    else out.l_gs = ctx.tape.constant_scalar(S(0));
    out.total = add(add(smul(out.l_clam_v, beta), smul(out.l_clam_t, 1.0 - beta)),
                    smul(out.l_gs, lambda));
    return out;
}

}  // namespace uniclam
