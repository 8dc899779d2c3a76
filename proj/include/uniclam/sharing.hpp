#pragma once

#include <cmath>
#include <string>

#include "uniclam/encoder.hpp"

namespace uniclam {

/// Depth-decaying coupling coefficient e^((K-k)/K) - 1 for layers 1..K-1.
/// Layer K is uncoupled by construction and rejected.
inline double layer_weight(int k, int K) {
    if (k < 1 || k >= K)
        fail("layer_weight: k must satisfy 1 <= k <= K-1, got k=" + std::to_string(k) +
             ", K=" + std::to_string(K));
    return std::exp(static_cast<double>(K - k) / static_cast<double>(K)) - 1.0;
}

/// Gradually soft-parameter sharing penalty: sum over layers 1..K-1 of
/// c_k * ||layer_k(ev) - layer_k(et)||^2 over every learnable tensor in the
/// transformer block (attention projections, layer norms, MLP). Embedders
/// and projection heads are excluded.
template <class S>
VarT<S> sharing_penalty(Ctx<S>& ctx, EncoderStackT<S>& ev, EncoderStackT<S>& et) {
    if (ev.cfg.layers != et.cfg.layers || ev.cfg.hidden != et.cfg.hidden ||
        ev.cfg.heads != et.cfg.heads)
        fail("sharing_penalty: encoder stacks built from different configs");
    int K = ev.cfg.layers;
    VarT<S> total = ctx.tape.constant_scalar(S(0));
    for (int k = 1; k <= K - 1; ++k) {
        auto& lv = ev.layers[k - 1];
        auto& lt = et.layers[k - 1];
        std::vector<std::pair<TensorT<S>*, TensorT<S>*>> pairs;
        {
            std::vector<TensorT<S>*> a, b;
            lv.for_each_param("", [&](const std::string&, TensorT<S>& t) { a.push_back(&t); });
            lt.for_each_param("", [&](const std::string&, TensorT<S>& t) { b.push_back(&t); });
            for (std::size_t i = 0; i < a.size(); ++i) pairs.emplace_back(a[i], b[i]);
        }
        VarT<S> layer_sq = ctx.tape.constant_scalar(S(0));
        for (auto& [pa, pb] : pairs) {
            if (pa->shape != pb->shape)
                fail("sharing_penalty: layer " + std::to_string(k) + " parameter shapes differ: " +
                     shape_str(pa->shape) + " vs " + shape_str(pb->shape));
            auto d = sub(ctx.use(*pa), ctx.use(*pb));
            layer_sq = add(layer_sq, sum(mul(d, d)));
        }
        total = add(total, smul(layer_sq, layer_weight(k, K)));
    }
    return total;
}

}  // namespace uniclam
