#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "uniclam/tape.hpp"

namespace uniclam {

/// Builder context: memoizes one leaf per parameter tensor so shared
/// parameters accumulate gradients, and keeps the tensor -> node mapping
/// needed to read gradients back out.
template <class S>
struct Ctx {
    TapeT<S>& tape;
    std::unordered_map<const TensorT<S>*, VarT<S>> leaves;

    explicit Ctx(TapeT<S>& t) : tape(t) {}

    /// Register a parameter (or reuse its existing leaf).
    VarT<S> use(TensorT<S>& t) {
        auto it = leaves.find(&t);
        if (it != leaves.end()) return it->second;
        VarT<S> v = tape.leaf(t);
        leaves.emplace(&t, v);
        return v;
    }

    /// Register input data (never receives a gradient).
    VarT<S> input(const TensorT<S>& t) {
        TensorT<S> c = t;
        c.requires_grad = false;
        return tape.leaf(c);
    }

    /// Gradient lookup after backward; zeros if the leaf was never used.
    std::vector<S> grad_of(const GradMapT<S>& grads, const TensorT<S>& t) const {
        auto it = leaves.find(&t);
        if (it == leaves.end()) return std::vector<S>(t.numel(), S(0));
        auto git = grads.find(it->second.id);
        if (git == grads.end()) return std::vector<S>(t.numel(), S(0));
        return git->second;
    }
};

template <class S>
struct ParamRef {
    std::string name;
    TensorT<S>* tensor;
};

template <class S>
using ParamList = std::vector<ParamRef<S>>;

struct GradCheckEntry {
    std::string name;
    double max_rel_err;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double worst = 0.0;
};

/// Central finite differences against the analytic backward pass.
/// rel_err = |analytic - numeric| / max(1, |numeric|), maximized per tensor.
/// The builder must be pure: two evaluations at identical inputs that
/// disagree are rejected.
template <class S>
GradCheckReport grad_check(const std::function<VarT<S>(Ctx<S>&)>& builder, ParamList<S> params,
                           double eps) {
    for (auto& p : params) p.tensor->requires_grad = true;

    auto eval = [&]() -> double {
        TapeT<S> tape;
        Ctx<S> ctx(tape);
        VarT<S> root = builder(ctx);
        return static_cast<double>(root.scalar());
    };
    double v1 = eval(), v2 = eval();
    if (v1 != v2)
        fail("grad_check: non-deterministic loss builder (" + std::to_string(v1) +
             " != " + std::to_string(v2) + ")");

    // analytic pass
    TapeT<S> tape;
    Ctx<S> ctx(tape);
    VarT<S> root = builder(ctx);
    if (root.val().numel() != 1) fail("grad_check: builder did not produce a scalar");
    GradMapT<S> grads = tape.backward(root);

    GradCheckReport report;
    for (const auto& p : params) {
        std::vector<S> analytic = ctx.grad_of(grads, *p.tensor);
        double worst = 0.0;
        for (std::size_t i = 0; i < p.tensor->numel(); ++i) {
            S saved = p.tensor->v[i];
            p.tensor->v[i] = saved + static_cast<S>(eps);
            double fp = eval();
            p.tensor->v[i] = saved - static_cast<S>(eps);
            double fm = eval();
            p.tensor->v[i] = saved;
            double numeric = (fp - fm) / (2.0 * eps);
            double rel = std::abs(static_cast<double>(analytic[i]) - numeric) /
                         std::max(1.0, std::abs(numeric));
            worst = std::max(worst, rel);
        }
        report.entries.push_back({p.name, worst});
        report.worst = std::max(report.worst, worst);
    }
    return report;
}

}  // namespace uniclam
