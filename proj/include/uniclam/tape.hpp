#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_map>
#include <utility>
#include <vector>

#include "uniclam/tensor.hpp"

namespace uniclam {

/// Primitive catalog of the reverse-mode engine. Everything the losses and
/// models need is expressed through these ops; each has a hand-written
/// adjoint that is finite-difference checked in the test suite.
enum class Prim {
    Leaf,
    Matmul,
    Add,
    Mul,
    Smul,
    Exp,
    Log,
    Softmax,
    LayerNorm,
    Relu,
    MeanAxis,
    Sum,
    L2Norm,
    Cosine,
    Conv2d,
    Transpose,
    Reshape,
    ExtractPatches,
    Upsample2x,
    GatherRows,
    Concat,
    Select,
};

inline const char* prim_name(Prim p) {
    switch (p) {
        case Prim::Leaf: return "leaf";
        case Prim::Matmul: return "matmul";
        case Prim::Add: return "add";
        case Prim::Mul: return "multiply";
        case Prim::Smul: return "scalar-multiply";
        case Prim::Exp: return "exponent";
        case Prim::Log: return "logarithm";
        case Prim::Softmax: return "softmax-along-axis";
        case Prim::LayerNorm: return "layer-normalization";
        case Prim::Relu: return "relu";
        case Prim::MeanAxis: return "mean-along-axis";
        case Prim::Sum: return "sum";
        case Prim::L2Norm: return "l2-norm";
        case Prim::Cosine: return "cosine-similarity";
        case Prim::Conv2d: return "conv2d";
        case Prim::Transpose: return "transpose";
        case Prim::Reshape: return "reshape";
        case Prim::ExtractPatches: return "extract-patches";
        case Prim::Upsample2x: return "upsample2x-nearest";
        case Prim::GatherRows: return "gather-rows";
        case Prim::Concat: return "concat";
        case Prim::Select: return "select";
    }
    return "?";
}

/// Broadcast form for Add/Mul: None is elementwise; Suffix replicates the
/// small operand across leading axes (bias add); Prefix replicates it across
/// trailing axes (per-row scale).
enum class Bcast { None, Suffix, Prefix };

struct Attrs {
    int axis = -1;
    double scalar = 0.0;
    int stride = 1;
    int pad = 0;
    int patch = 0;
    int index = -1;
    Shape target;
    std::vector<int> ids;
    Bcast bcast = Bcast::None;
};

template <class S>
class TapeT;

template <class S>
struct VarT {
    TapeT<S>* tape = nullptr;
    int id = -1;

    const TensorT<S>& val() const;
    const Shape& shape() const { return val().shape; }
    S scalar() const {
        if (val().numel() != 1) fail("expected scalar tensor, got " + shape_str(val().shape));
        return val().v[0];
    }
};

template <class S>
using GradMapT = std::unordered_map<int, std::vector<S>>;

template <class S>
class TapeT {
public:
    struct Node {
        Prim op;
        std::vector<int> inputs;
        Attrs attrs;
        TensorT<S> value;
        bool needs_grad = false;
    };

    VarT<S> leaf(const TensorT<S>& t) {
        if (!t.all_finite()) fail("leaf: non-finite input tensor rejected");
        Node n;
        n.op = Prim::Leaf;
        n.value = t;
        n.needs_grad = t.requires_grad;
        return push(std::move(n));
    }

    VarT<S> constant(TensorT<S> t) {
        t.requires_grad = false;
        return leaf(t);
    }

    VarT<S> constant_scalar(S x) { return constant(TensorT<S>::scalar(x)); }

    /// Single entry point for all recorded primitives.
    VarT<S> apply(Prim op, const std::vector<VarT<S>>& inputs, Attrs attrs = {});

    const Node& node(int id) const { return nodes_[id]; }
    std::size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    /// Reverse sweep from a scalar root. Returns gradients for every
    /// requires_grad leaf; leaves unreachable from the root get zeros.
    GradMapT<S> backward(VarT<S> root) {
        if (root.val().numel() != 1) fail("backward: root is not scalar, shape " + shape_str(root.shape()));
        return backward_seeded({{root.id, {S(1)}}});
    }

    /// Reverse sweep seeded at several output nodes at once (used when a loss
    /// computed on another tape supplies d(loss)/d(output)).
    GradMapT<S> backward_seeded(const std::vector<std::pair<int, std::vector<S>>>& seeds);

private:
    VarT<S> push(Node n) {
        if (consumed_) fail("tape already consumed by backward; open a new tape");
        if (!n.value.all_finite())
            fail(std::string(prim_name(n.op)) + ": non-finite output rejected");
        nodes_.push_back(std::move(n));
        return VarT<S>{this, static_cast<int>(nodes_.size() - 1)};
    }

    const TensorT<S>& in_val(const Node& n, int k) const { return nodes_[n.inputs[k]].value; }

    void adjoint(int id, const std::vector<S>& gout, std::vector<std::vector<S>>& grads,
                 std::vector<char>& touched);

    std::vector<Node> nodes_;
    bool consumed_ = false;
};

template <class S>
inline const TensorT<S>& VarT<S>::val() const {
    return tape->node(id).value;
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

namespace detail {

/// outer/inner decomposition for single-axis reductions on rank <= 3
inline void axis_strides(const Shape& sh, int axis, int& outer, int& len, int& inner) {
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= sh[i];
    len = sh[axis];
    for (int i = axis + 1; i < static_cast<int>(sh.size()); ++i) inner *= sh[i];
}

inline bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() >= big.size()) return false;
    std::size_t off = big.size() - small.size();
    for (std::size_t i = 0; i < small.size(); ++i)
        if (small[i] != big[off + i]) return false;
    return true;
}

inline bool is_prefix(const Shape& small, const Shape& big) {
    if (small.size() >= big.size()) return false;
    for (std::size_t i = 0; i < small.size(); ++i)
        if (small[i] != big[i]) return false;
    return true;
}

}  // namespace detail

template <class S>
VarT<S> TapeT<S>::apply(Prim op, const std::vector<VarT<S>>& inputs, Attrs attrs) {
    for (const auto& in : inputs)
        if (in.tape != this) fail(std::string(prim_name(op)) + ": input from a different tape");

    typename TapeT<S>::Node n;
    n.op = op;
    n.attrs = attrs;
    for (const auto& in : inputs) {
        n.inputs.push_back(in.id);
        n.needs_grad = n.needs_grad || nodes_[in.id].needs_grad;
    }

    auto arity = [&](std::size_t k) {
        if (inputs.size() != k)
            fail(std::string(prim_name(op)) + ": expected " + std::to_string(k) + " inputs, got " +
                 std::to_string(inputs.size()));
    };
    auto shape_err = [&](const std::string& detail) {
        fail(std::string(prim_name(op)) + ": shape mismatch, " + detail);
    };

    switch (op) {
        case Prim::Leaf:
            fail("apply: leaf is not an applicable primitive");
        case Prim::Matmul: {
            arity(2);
            const auto &a = inputs[0].val(), &b = inputs[1].val();
            if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0])
                shape_err(shape_str(a.shape) + " x " + shape_str(b.shape));
            int m = a.shape[0], k = a.shape[1], p = b.shape[1];
            n.value = TensorT<S>({m, p});
            const S* A = a.v.data();
            const S* B = b.v.data();
            S* C = n.value.v.data();
            for (int i = 0; i < m; ++i)
                for (int l = 0; l < k; ++l) {
                    S aa = A[i * k + l];
                    const S* brow = B + l * p;
                    S* crow = C + i * p;
                    for (int j = 0; j < p; ++j) crow[j] += aa * brow[j];
                }
            break;
        }
        case Prim::Add:
        case Prim::Mul: {
            arity(2);
            const auto &a = inputs[0].val(), &b = inputs[1].val();
            Bcast bc = attrs.bcast;
            if (bc == Bcast::None && !a.same_shape(b)) {
                if (b.numel() == 1) bc = Bcast::Suffix;  // scalar broadcast
                else if (detail::is_suffix(b.shape, a.shape)) bc = Bcast::Suffix;
                else if (detail::is_prefix(b.shape, a.shape)) bc = Bcast::Prefix;
                else shape_err(shape_str(a.shape) + " vs " + shape_str(b.shape));
            }
            n.attrs.bcast = bc;
            n.value = TensorT<S>(a.shape);
            std::size_t na = a.numel(), nb = b.numel();
            if (bc == Bcast::None) {
                for (std::size_t i = 0; i < na; ++i)
                    n.value.v[i] = (op == Prim::Add) ? a.v[i] + b.v[i] : a.v[i] * b.v[i];
            } else if (bc == Bcast::Suffix) {
                if (nb != 1 && !detail::is_suffix(b.shape, a.shape))
                    shape_err(shape_str(b.shape) + " is not a suffix of " + shape_str(a.shape));
                for (std::size_t i = 0; i < na; ++i) {
                    S bv = b.v[i % nb];
                    n.value.v[i] = (op == Prim::Add) ? a.v[i] + bv : a.v[i] * bv;
                }
            } else {
                if (!detail::is_prefix(b.shape, a.shape))
                    shape_err(shape_str(b.shape) + " is not a prefix of " + shape_str(a.shape));
                std::size_t rep = na / nb;
                for (std::size_t i = 0; i < na; ++i) {
                    S bv = b.v[i / rep];
                    n.value.v[i] = (op == Prim::Add) ? a.v[i] + bv : a.v[i] * bv;
                }
            }
            break;
        }
        case Prim::Smul: {
            arity(1);
            const auto& a = inputs[0].val();
            n.value = a;
            S c = static_cast<S>(attrs.scalar);
            for (auto& x : n.value.v) x *= c;
            break;
        }
        case Prim::Exp: {
            arity(1);
            n.value = inputs[0].val();
            for (auto& x : n.value.v) x = std::exp(x);
            break;
        }
        case Prim::Log: {
            arity(1);
            n.value = inputs[0].val();
            for (auto& x : n.value.v) x = std::log(x);
            break;
        }
        case Prim::Relu: {
            arity(1);
            n.value = inputs[0].val();
            for (auto& x : n.value.v) x = x > S(0) ? x : S(0);
            break;
        }
        case Prim::Softmax: {
            arity(1);
            const auto& a = inputs[0].val();
            if (attrs.axis < 0 || attrs.axis >= a.rank())
                shape_err("axis " + std::to_string(attrs.axis) + " for " + shape_str(a.shape));
            n.value = TensorT<S>(a.shape);
            int outer, len, inner;
            detail::axis_strides(a.shape, attrs.axis, outer, len, inner);
            for (int o = 0; o < outer; ++o)
                for (int i = 0; i < inner; ++i) {
                    std::size_t base = static_cast<std::size_t>(o) * len * inner + i;
                    S mx = a.v[base];
                    for (int l = 1; l < len; ++l) mx = std::max(mx, a.v[base + static_cast<std::size_t>(l) * inner]);
                    S sum = 0;
                    for (int l = 0; l < len; ++l) {
                        S e = std::exp(a.v[base + static_cast<std::size_t>(l) * inner] - mx);
                        n.value.v[base + static_cast<std::size_t>(l) * inner] = e;
                        sum += e;
                    }
                    for (int l = 0; l < len; ++l) n.value.v[base + static_cast<std::size_t>(l) * inner] /= sum;
                }
            break;
        }
        case Prim::LayerNorm: {
            arity(1);
            const auto& a = inputs[0].val();
            if (a.rank() < 1) shape_err(shape_str(a.shape));
            int len = a.shape.back();
            std::size_t rows = a.numel() / static_cast<std::size_t>(len);
            S eps = static_cast<S>(attrs.scalar);
            n.value = TensorT<S>(a.shape);
            for (std::size_t r = 0; r < rows; ++r) {
                const S* x = a.v.data() + r * len;
                S* y = n.value.v.data() + r * len;
                S mu = 0;
                for (int i = 0; i < len; ++i) mu += x[i];
                mu /= static_cast<S>(len);
                S var = 0;
                for (int i = 0; i < len; ++i) var += (x[i] - mu) * (x[i] - mu);
                var /= static_cast<S>(len);
                S inv = S(1) / std::sqrt(var + eps);
                for (int i = 0; i < len; ++i) y[i] = (x[i] - mu) * inv;
            }
            break;
        }
        case Prim::MeanAxis: {
            arity(1);
            const auto& a = inputs[0].val();
            if (a.rank() != 2 || (attrs.axis != 0 && attrs.axis != 1))
                shape_err("rank-2 input required, got " + shape_str(a.shape));
            int rows = a.shape[0], cols = a.shape[1];
            if (attrs.axis == 0) {
                n.value = TensorT<S>({cols});
                for (int r = 0; r < rows; ++r)
                    for (int c = 0; c < cols; ++c) n.value.v[c] += a.v[static_cast<std::size_t>(r) * cols + c];
                for (auto& x : n.value.v) x /= static_cast<S>(rows);
            } else {
                n.value = TensorT<S>({rows});
                for (int r = 0; r < rows; ++r) {
                    S s = 0;
                    for (int c = 0; c < cols; ++c) s += a.v[static_cast<std::size_t>(r) * cols + c];
                    n.value.v[r] = s / static_cast<S>(cols);
                }
            }
            break;
        }
        case Prim::Sum: {
            arity(1);
            S s = 0;
            for (S x : inputs[0].val().v) s += x;
            n.value = TensorT<S>::scalar(s);
            break;
        }
        case Prim::L2Norm: {
            arity(1);
            S s = 0;
            for (S x : inputs[0].val().v) s += x * x;
            n.value = TensorT<S>::scalar(std::sqrt(s));
            break;
        }
        case Prim::Cosine: {
            arity(2);
            const auto &a = inputs[0].val(), &b = inputs[1].val();
            if (a.rank() != 1 || b.rank() != 1 || a.shape[0] != b.shape[0])
                shape_err(shape_str(a.shape) + " vs " + shape_str(b.shape));
            S dot = 0, na = 0, nb = 0;
            for (int i = 0; i < a.shape[0]; ++i) {
                dot += a.v[i] * b.v[i];
                na += a.v[i] * a.v[i];
                nb += b.v[i] * b.v[i];
            }
            if (na == S(0) || nb == S(0)) fail("cosine-similarity: zero-norm operand");
            n.value = TensorT<S>::scalar(dot / (std::sqrt(na) * std::sqrt(nb)));
            break;
        }
        case Prim::Conv2d: {
            arity(2);
            const auto &x = inputs[0].val(), &w = inputs[1].val();
            if (x.rank() != 3 || w.rank() != 4 || w.shape[1] != x.shape[0])
                shape_err("input " + shape_str(x.shape) + ", kernel " + shape_str(w.shape));
            int C = x.shape[0], H = x.shape[1], W = x.shape[2];
            int O = w.shape[0], kh = w.shape[2], kw = w.shape[3];
            int s = attrs.stride, p = attrs.pad;
            if (s < 1 || p < 0) fail("conv2d: invalid stride/pad");
            int Ho = (H + 2 * p - kh) / s + 1, Wo = (W + 2 * p - kw) / s + 1;
            if (Ho < 1 || Wo < 1) shape_err("kernel larger than padded input");
            n.value = TensorT<S>({O, Ho, Wo});
            for (int o = 0; o < O; ++o)
                for (int c = 0; c < C; ++c)
                    for (int u = 0; u < kh; ++u)
                        for (int v = 0; v < kw; ++v) {
                            S wv = w.v[((static_cast<std::size_t>(o) * C + c) * kh + u) * kw + v];
                            for (int i = 0; i < Ho; ++i) {
                                int xi = i * s - p + u;
                                if (xi < 0 || xi >= H) continue;
                                for (int j = 0; j < Wo; ++j) {
                                    int xj = j * s - p + v;
                                    if (xj < 0 || xj >= W) continue;
                                    n.value.v[(static_cast<std::size_t>(o) * Ho + i) * Wo + j] +=
                                        wv * x.v[(static_cast<std::size_t>(c) * H + xi) * W + xj];
                                }
                            }
                        }
            break;
        }
        case Prim::Transpose: {
            arity(1);
            const auto& a = inputs[0].val();
            if (a.rank() != 2) shape_err("rank-2 required, got " + shape_str(a.shape));
            int r = a.shape[0], c = a.shape[1];
            n.value = TensorT<S>({c, r});
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) n.value.v[static_cast<std::size_t>(j) * r + i] = a.v[static_cast<std::size_t>(i) * c + j];
            break;
        }
        case Prim::Reshape: {
            arity(1);
            const auto& a = inputs[0].val();
            if (shape_numel(attrs.target) != a.numel())
                shape_err(shape_str(a.shape) + " -> " + shape_str(attrs.target));
            n.value = a;
            n.value.shape = attrs.target;
            break;
        }
        case Prim::ExtractPatches: {
            arity(1);
            const auto& a = inputs[0].val();
            int p = attrs.patch;
            if (a.rank() != 2 || p <= 0 || a.shape[0] % p || a.shape[1] % p)
                shape_err(shape_str(a.shape) + " with patch " + std::to_string(p));
            int H = a.shape[0], W = a.shape[1], gh = H / p, gw = W / p;
            n.value = TensorT<S>({gh * gw, p * p});
            for (int gi = 0; gi < gh; ++gi)
                for (int gj = 0; gj < gw; ++gj)
                    for (int u = 0; u < p; ++u)
                        for (int v = 0; v < p; ++v)
                            n.value.v[static_cast<std::size_t>(gi * gw + gj) * p * p + u * p + v] =
                                a.v[static_cast<std::size_t>(gi * p + u) * W + gj * p + v];
            break;
        }
        case Prim::Upsample2x: {
            arity(1);
            const auto& a = inputs[0].val();
            if (a.rank() != 3) shape_err("rank-3 required, got " + shape_str(a.shape));
            int C = a.shape[0], H = a.shape[1], W = a.shape[2];
            n.value = TensorT<S>({C, 2 * H, 2 * W});
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < 2 * H; ++i)
                    for (int j = 0; j < 2 * W; ++j)
                        n.value.v[(static_cast<std::size_t>(c) * 2 * H + i) * 2 * W + j] =
                            a.v[(static_cast<std::size_t>(c) * H + i / 2) * W + j / 2];
            break;
        }
        case Prim::GatherRows: {
            arity(1);
            const auto& a = inputs[0].val();
            if (a.rank() != 2) shape_err("rank-2 table required, got " + shape_str(a.shape));
            if (attrs.ids.empty()) fail("gather-rows: empty id list");
            int cols = a.shape[1];
            n.value = TensorT<S>({static_cast<int>(attrs.ids.size()), cols});
            for (std::size_t r = 0; r < attrs.ids.size(); ++r) {
                int id = attrs.ids[r];
                if (id < 0 || id >= a.shape[0])
                    fail("gather-rows: id " + std::to_string(id) + " out of range at position " +
                         std::to_string(r));
                std::copy_n(a.v.data() + static_cast<std::size_t>(id) * cols, cols,
                            n.value.v.data() + r * cols);
            }
            break;
        }
        case Prim::Concat: {
            if (inputs.empty()) fail("concat: no inputs");
            int total = 0;
            for (const auto& in : inputs) {
                if (in.val().rank() != 1) shape_err("rank-1 inputs required");
                total += in.val().shape[0];
            }
            n.value = TensorT<S>({total});
            int off = 0;
            for (const auto& in : inputs) {
                std::copy(in.val().v.begin(), in.val().v.end(), n.value.v.begin() + off);
                off += in.val().shape[0];
            }
            break;
        }
        case Prim::Select: {
            arity(1);
            const auto& a = inputs[0].val();
            if (a.rank() < 2 || attrs.index < 0 || attrs.index >= a.shape[0])
                shape_err("index " + std::to_string(attrs.index) + " into " + shape_str(a.shape));
            Shape out(a.shape.begin() + 1, a.shape.end());
            std::size_t sz = shape_numel(out);
            n.value = TensorT<S>(out);
            std::copy_n(a.v.data() + static_cast<std::size_t>(attrs.index) * sz, sz, n.value.v.data());
            break;
        }
    }
    return push(std::move(n));
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <class S>
GradMapT<S> TapeT<S>::backward_seeded(const std::vector<std::pair<int, std::vector<S>>>& seeds) {
    if (consumed_) fail("backward: tape already consumed");
    consumed_ = true;

    std::vector<std::vector<S>> grads(nodes_.size());
    std::vector<char> touched(nodes_.size(), 0);
    auto buf = [&](int id) -> std::vector<S>& {
        if (grads[id].empty()) grads[id].assign(nodes_[id].value.numel(), S(0));
        return grads[id];
    };
    for (const auto& [id, seed] : seeds) {
        if (id < 0 || id >= static_cast<int>(nodes_.size())) fail("backward: bad seed node");
        if (seed.size() != nodes_[id].value.numel()) fail("backward: seed size mismatch");
        auto& g = buf(id);
        for (std::size_t i = 0; i < seed.size(); ++i) g[i] += seed[i];
        touched[id] = 1;
    }

    for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
        if (!touched[id] || !nodes_[id].needs_grad || nodes_[id].op == Prim::Leaf) continue;
        adjoint(id, grads[id], grads, touched);
        grads[id].clear();  // interior grads are not reported; free eagerly
        grads[id].shrink_to_fit();
    }

    GradMapT<S> out;
    for (int id = 0; id < static_cast<int>(nodes_.size()); ++id) {
        const auto& nd = nodes_[id];
        if (nd.op == Prim::Leaf && nd.value.requires_grad) {
            if (touched[id]) out.emplace(id, std::move(grads[id]));
            else out.emplace(id, std::vector<S>(nd.value.numel(), S(0)));
        }
    }
    return out;
}

template <class S>
void TapeT<S>::adjoint(int id, const std::vector<S>& gout, std::vector<std::vector<S>>& grads,
                       std::vector<char>& touched) {
    const Node& n = nodes_[id];
    auto acc = [&](int k) -> std::vector<S>* {
        int iid = n.inputs[k];
        if (!nodes_[iid].needs_grad) return nullptr;
        if (grads[iid].empty()) grads[iid].assign(nodes_[iid].value.numel(), S(0));
        touched[iid] = 1;
        return &grads[iid];
    };

    switch (n.op) {
        case Prim::Leaf:
            break;
        case Prim::Matmul: {
            const auto &a = in_val(n, 0), &b = in_val(n, 1);
            int m = a.shape[0], k = a.shape[1], p = b.shape[1];
            if (auto* ga = acc(0)) {
                // dA = G * B^T; dot products over contiguous rows
                for (int i = 0; i < m; ++i) {
                    const S* grow = gout.data() + static_cast<std::size_t>(i) * p;
                    for (int l = 0; l < k; ++l) {
                        const S* brow = b.v.data() + static_cast<std::size_t>(l) * p;
                        S acc0 = 0;
                        for (int j = 0; j < p; ++j) acc0 += grow[j] * brow[j];
                        (*ga)[static_cast<std::size_t>(i) * k + l] += acc0;
                    }
                }
            }
            if (auto* gb = acc(1)) {
                // dB = A^T * G; axpy over contiguous rows
                for (int i = 0; i < m; ++i) {
                    const S* grow = gout.data() + static_cast<std::size_t>(i) * p;
                    for (int l = 0; l < k; ++l) {
                        S av = a.v[static_cast<std::size_t>(i) * k + l];
                        S* brow = gb->data() + static_cast<std::size_t>(l) * p;
                        for (int j = 0; j < p; ++j) brow[j] += av * grow[j];
                    }
                }
            }
            break;
        }
        case Prim::Add: {
            const auto& a = in_val(n, 0);
            const auto& b = in_val(n, 1);
            if (auto* ga = acc(0))
                for (std::size_t i = 0; i < gout.size(); ++i) (*ga)[i] += gout[i];
            if (auto* gb = acc(1)) {
                if (n.attrs.bcast == Bcast::None) {
                    for (std::size_t i = 0; i < gout.size(); ++i) (*gb)[i] += gout[i];
                } else if (n.attrs.bcast == Bcast::Suffix) {
                    std::size_t nb = b.numel();
                    for (std::size_t i = 0; i < gout.size(); ++i) (*gb)[i % nb] += gout[i];
                } else {
                    std::size_t rep = a.numel() / b.numel();
                    for (std::size_t i = 0; i < gout.size(); ++i) (*gb)[i / rep] += gout[i];
                }
            }
            break;
        }
        case Prim::Mul: {
            const auto &a = in_val(n, 0), &b = in_val(n, 1);
            std::size_t nb = b.numel();
            std::size_t rep = a.numel() / nb;
            auto bval = [&](std::size_t i) -> S {
                switch (n.attrs.bcast) {
                    case Bcast::None: return b.v[i];
                    case Bcast::Suffix: return b.v[i % nb];
                    default: return b.v[i / rep];
                }
            };
            if (auto* ga = acc(0))
                for (std::size_t i = 0; i < gout.size(); ++i) (*ga)[i] += gout[i] * bval(i);
            if (auto* gb = acc(1)) {
                if (n.attrs.bcast == Bcast::None) {
                    for (std::size_t i = 0; i < gout.size(); ++i) (*gb)[i] += gout[i] * a.v[i];
                } else if (n.attrs.bcast == Bcast::Suffix) {
                    for (std::size_t i = 0; i < gout.size(); ++i) (*gb)[i % nb] += gout[i] * a.v[i];
                } else {
                    for (std::size_t i = 0; i < gout.size(); ++i) (*gb)[i / rep] += gout[i] * a.v[i];
                }
            }
            break;
        }
        case Prim::Smul: {
            if (auto* ga = acc(0)) {
                S c = static_cast<S>(n.attrs.scalar);
                for (std::size_t i = 0; i < gout.size(); ++i) (*ga)[i] += gout[i] * c;
            }
            break;
        }
        case Prim::Exp: {
            if (auto* ga = acc(0))
                for (std::size_t i = 0; i < gout.size(); ++i) (*ga)[i] += gout[i] * n.value.v[i];
            break;
        }
        case Prim::Log: {
            const auto& a = in_val(n, 0);
            if (auto* ga = acc(0))
                for (std::size_t i = 0; i < gout.size(); ++i) (*ga)[i] += gout[i] / a.v[i];
            break;
        }
        case Prim::Relu: {
            const auto& a = in_val(n, 0);
            if (auto* ga = acc(0))
                for (std::size_t i = 0; i < gout.size(); ++i)
                    if (a.v[i] > S(0)) (*ga)[i] += gout[i];
            break;
        }
        case Prim::Softmax: {
            if (auto* ga = acc(0)) {
                int outer, len, inner;
                detail::axis_strides(n.value.shape, n.attrs.axis, outer, len, inner);
                for (int o = 0; o < outer; ++o)
                    for (int i = 0; i < inner; ++i) {
                        std::size_t base = static_cast<std::size_t>(o) * len * inner + i;
                        S dot = 0;
                        for (int l = 0; l < len; ++l) {
                            std::size_t ix = base + static_cast<std::size_t>(l) * inner;
                            dot += gout[ix] * n.value.v[ix];
                        }
                        for (int l = 0; l < len; ++l) {
                            std::size_t ix = base + static_cast<std::size_t>(l) * inner;
                            (*ga)[ix] += n.value.v[ix] * (gout[ix] - dot);
                        }
                    }
            }
            break;
        }
        case Prim::LayerNorm: {
            const auto& a = in_val(n, 0);
            if (auto* ga = acc(0)) {
                int len = a.shape.back();
                std::size_t rows = a.numel() / static_cast<std::size_t>(len);
                S eps = static_cast<S>(n.attrs.scalar);
                for (std::size_t r = 0; r < rows; ++r) {
                    const S* x = a.v.data() + r * len;
                    const S* y = n.value.v.data() + r * len;
                    const S* g = gout.data() + r * len;
                    S mu = 0;
                    for (int i = 0; i < len; ++i) mu += x[i];
                    mu /= static_cast<S>(len);
                    S var = 0;
                    for (int i = 0; i < len; ++i) var += (x[i] - mu) * (x[i] - mu);
                    var /= static_cast<S>(len);
                    S inv = S(1) / std::sqrt(var + eps);
                    S gmean = 0, gymean = 0;
                    for (int i = 0; i < len; ++i) {
                        gmean += g[i];
                        gymean += g[i] * y[i];
                    }
                    gmean /= static_cast<S>(len);
                    gymean /= static_cast<S>(len);
                    S* dst = ga->data() + r * len;
                    for (int i = 0; i < len; ++i) dst[i] += inv * (g[i] - gmean - y[i] * gymean);
                }
            }
            break;
        }
        case Prim::MeanAxis: {
            const auto& a = in_val(n, 0);
            if (auto* ga = acc(0)) {
                int rows = a.shape[0], cols = a.shape[1];
                if (n.attrs.axis == 0) {
                    for (int r = 0; r < rows; ++r)
                        for (int c = 0; c < cols; ++c)
                            (*ga)[static_cast<std::size_t>(r) * cols + c] += gout[c] / static_cast<S>(rows);
                } else {
                    for (int r = 0; r < rows; ++r)
                        for (int c = 0; c < cols; ++c)
                            (*ga)[static_cast<std::size_t>(r) * cols + c] += gout[r] / static_cast<S>(cols);
                }
            }
            break;
        }
        case Prim::Sum: {
            if (auto* ga = acc(0))
                for (auto& g : *ga) g += gout[0];
            break;
        }
        case Prim::L2Norm: {
            const auto& a = in_val(n, 0);
            S norm = n.value.v[0];
            if (norm == S(0)) fail("l2-norm: gradient undefined at zero");
            if (auto* ga = acc(0))
                for (std::size_t i = 0; i < a.numel(); ++i) (*ga)[i] += gout[0] * a.v[i] / norm;
            break;
        }
        case Prim::Cosine: {
            const auto &a = in_val(n, 0), &b = in_val(n, 1);
            S na = 0, nb = 0;
            for (int i = 0; i < a.shape[0]; ++i) {
                na += a.v[i] * a.v[i];
                nb += b.v[i] * b.v[i];
            }
            na = std::sqrt(na);
            nb = std::sqrt(nb);
            S s = n.value.v[0], g = gout[0];
            if (auto* ga = acc(0))
                for (int i = 0; i < a.shape[0]; ++i)
                    (*ga)[i] += g * (b.v[i] / (na * nb) - s * a.v[i] / (na * na));
            if (auto* gb = acc(1))
                for (int i = 0; i < b.shape[0]; ++i)
                    (*gb)[i] += g * (a.v[i] / (na * nb) - s * b.v[i] / (nb * nb));
            break;
        }
        case Prim::Conv2d: {
            const auto &x = in_val(n, 0), &w = in_val(n, 1);
            int C = x.shape[0], H = x.shape[1], W = x.shape[2];
            int O = w.shape[0], kh = w.shape[2], kw = w.shape[3];
            int s = n.attrs.stride, p = n.attrs.pad;
            int Ho = n.value.shape[1], Wo = n.value.shape[2];
            auto* gx = acc(0);
            auto* gw = acc(1);
            for (int o = 0; o < O; ++o)
                for (int c = 0; c < C; ++c)
                    for (int u = 0; u < kh; ++u)
                        for (int v = 0; v < kw; ++v) {
                            std::size_t widx = ((static_cast<std::size_t>(o) * C + c) * kh + u) * kw + v;
                            S wv = w.v[widx];
                            S wacc = 0;
                            for (int i = 0; i < Ho; ++i) {
                                int xi = i * s - p + u;
                                if (xi < 0 || xi >= H) continue;
                                for (int j = 0; j < Wo; ++j) {
                                    int xj = j * s - p + v;
                                    if (xj < 0 || xj >= W) continue;
                                    S g = gout[(static_cast<std::size_t>(o) * Ho + i) * Wo + j];
                                    std::size_t xidx = (static_cast<std::size_t>(c) * H + xi) * W + xj;
                                    if (gx) (*gx)[xidx] += g * wv;
                                    wacc += g * x.v[xidx];
                                }
                            }
                            if (gw) (*gw)[widx] += wacc;
                        }
            break;
        }
        case Prim::Transpose: {
            const auto& a = in_val(n, 0);
            if (auto* ga = acc(0)) {
                int r = a.shape[0], c = a.shape[1];
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j)
                        (*ga)[static_cast<std::size_t>(i) * c + j] += gout[static_cast<std::size_t>(j) * r + i];
            }
            break;
        }
        case Prim::Reshape: {
            if (auto* ga = acc(0))
                for (std::size_t i = 0; i < gout.size(); ++i) (*ga)[i] += gout[i];
            break;
        }
        case Prim::ExtractPatches: {
            const auto& a = in_val(n, 0);
            if (auto* ga = acc(0)) {
                int p = n.attrs.patch, H = a.shape[0], W = a.shape[1], gw2 = W / p;
                for (int gi = 0; gi < H / p; ++gi)
                    for (int gj = 0; gj < gw2; ++gj)
                        for (int u = 0; u < p; ++u)
                            for (int v = 0; v < p; ++v)
                                (*ga)[static_cast<std::size_t>(gi * p + u) * W + gj * p + v] +=
                                    gout[static_cast<std::size_t>(gi * gw2 + gj) * p * p + u * p + v];
            }
            break;
        }
        case Prim::Upsample2x: {
            const auto& a = in_val(n, 0);
            if (auto* ga = acc(0)) {
                int C = a.shape[0], H = a.shape[1], W = a.shape[2];
                for (int c = 0; c < C; ++c)
                    for (int i = 0; i < 2 * H; ++i)
                        for (int j = 0; j < 2 * W; ++j)
                            (*ga)[(static_cast<std::size_t>(c) * H + i / 2) * W + j / 2] +=
                                gout[(static_cast<std::size_t>(c) * 2 * H + i) * 2 * W + j];
            }
            break;
        }
        case Prim::GatherRows: {
            const auto& a = in_val(n, 0);
            if (auto* ga = acc(0)) {
                int cols = a.shape[1];
                for (std::size_t r = 0; r < n.attrs.ids.size(); ++r) {
                    S* dst = ga->data() + static_cast<std::size_t>(n.attrs.ids[r]) * cols;
                    const S* src = gout.data() + r * cols;
                    for (int c = 0; c < cols; ++c) dst[c] += src[c];
                }
            }
            break;
        }
        case Prim::Concat: {
            int off = 0;
            for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                int len = in_val(n, static_cast<int>(k)).shape[0];
                if (auto* gk = acc(static_cast<int>(k)))
                    for (int i = 0; i < len; ++i) (*gk)[i] += gout[off + i];
                off += len;
            }
            break;
        }
        case Prim::Select: {
            const auto& a = in_val(n, 0);
            if (auto* ga = acc(0)) {
                std::size_t sz = gout.size();
                std::size_t base = static_cast<std::size_t>(n.attrs.index) * sz;
                for (std::size_t i = 0; i < sz; ++i) (*ga)[base + i] += gout[i];
            }
            (void)a;
            break;
        }
    }
}

// ---------------------------------------------------------------------------
// typed wrappers; all route through apply()
// ---------------------------------------------------------------------------

template <class S>
VarT<S> matmul(VarT<S> a, VarT<S> b) {
    return a.tape->apply(Prim::Matmul, {a, b});
}
template <class S>
VarT<S> add(VarT<S> a, VarT<S> b) {
    return a.tape->apply(Prim::Add, {a, b});
}
template <class S>
VarT<S> add_prefix(VarT<S> a, VarT<S> b) {
    Attrs at;
    at.bcast = Bcast::Prefix;
    return a.tape->apply(Prim::Add, {a, b}, at);
}
template <class S>
VarT<S> mul(VarT<S> a, VarT<S> b) {
    return a.tape->apply(Prim::Mul, {a, b});
}
template <class S>
VarT<S> mul_prefix(VarT<S> a, VarT<S> b) {
    Attrs at;
    at.bcast = Bcast::Prefix;
    return a.tape->apply(Prim::Mul, {a, b}, at);
}
template <class S>
VarT<S> smul(VarT<S> a, double c) {
    Attrs at;
    at.scalar = c;
    return a.tape->apply(Prim::Smul, {a}, at);
}
template <class S>
VarT<S> sub(VarT<S> a, VarT<S> b) {
    return add(a, smul(b, -1.0));
}
template <class S>
VarT<S> exp(VarT<S> a) {
    return a.tape->apply(Prim::Exp, {a});
}
template <class S>
VarT<S> log(VarT<S> a) {
    return a.tape->apply(Prim::Log, {a});
}
template <class S>
VarT<S> softmax(VarT<S> a, int axis) {
    Attrs at;
    at.axis = axis;
    return a.tape->apply(Prim::Softmax, {a}, at);
}
template <class S>
VarT<S> layernorm(VarT<S> a, double eps = 1e-5) {
    Attrs at;
    at.scalar = eps;
    return a.tape->apply(Prim::LayerNorm, {a}, at);
}
template <class S>
VarT<S> relu(VarT<S> a) {
    return a.tape->apply(Prim::Relu, {a});
}
template <class S>
VarT<S> mean_axis(VarT<S> a, int axis) {
    Attrs at;
    at.axis = axis;
    return a.tape->apply(Prim::MeanAxis, {a}, at);
}
template <class S>
VarT<S> sum(VarT<S> a) {
    return a.tape->apply(Prim::Sum, {a});
}
template <class S>
VarT<S> l2norm(VarT<S> a) {
    return a.tape->apply(Prim::L2Norm, {a});
}
template <class S>
VarT<S> cosine(VarT<S> a, VarT<S> b) {
    return a.tape->apply(Prim::Cosine, {a, b});
}
template <class S>
VarT<S> conv2d(VarT<S> x, VarT<S> w, int stride, int pad) {
    Attrs at;
    at.stride = stride;
    at.pad = pad;
    return x.tape->apply(Prim::Conv2d, {x, w}, at);
}
template <class S>
VarT<S> transpose(VarT<S> a) {
    return a.tape->apply(Prim::Transpose, {a});
}
template <class S>
VarT<S> reshape(VarT<S> a, Shape target) {
    Attrs at;
    at.target = std::move(target);
    return a.tape->apply(Prim::Reshape, {a}, at);
}
template <class S>
VarT<S> extract_patches(VarT<S> a, int patch) {
    Attrs at;
    at.patch = patch;
    return a.tape->apply(Prim::ExtractPatches, {a}, at);
}
template <class S>
VarT<S> upsample2x(VarT<S> a) {
    return a.tape->apply(Prim::Upsample2x, {a});
}
template <class S>
VarT<S> gather_rows(VarT<S> table, std::vector<int> ids) {
    Attrs at;
    at.ids = std::move(ids);
    return table.tape->apply(Prim::GatherRows, {table}, at);
}
template <class S>
VarT<S> concat(const std::vector<VarT<S>>& parts) {
    if (parts.empty()) fail("concat: no inputs");
    return parts[0].tape->apply(Prim::Concat, parts);
}
template <class S>
VarT<S> select0(VarT<S> a, int index) {
    Attrs at;
    at.index = index;
    return a.tape->apply(Prim::Select, {a}, at);
}

/// log(sum(exp(x))) over all elements, computed with a constant max shift.
/// The shift is read from the current value, so the result and its gradient
/// are exact while the exponentials stay bounded.
template <class S>
VarT<S> logsumexp(VarT<S> x) {
    const auto& v = x.val().v;
    S mx = v[0];
    for (S a : v) mx = std::max(mx, a);
    auto shifted = add(x, x.tape->constant_scalar(-mx));
    auto lse = log(sum(exp(shifted)));
    return add(lse, x.tape->constant_scalar(mx));
}

}  // namespace uniclam
