#pragma once

#include <cstddef>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "uniclam/common.hpp"

namespace uniclam {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) {
        if (d <= 0) fail("tensor shape has non-positive dimension " + std::to_string(d));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

/// Dense row-major tensor. S is the element type: double in test and oracle
/// paths, float in training paths.
template <class S>
struct TensorT {
    Shape shape;
    std::vector<S> v;
    bool requires_grad = false;
    std::optional<std::vector<S>> grad;

    TensorT() = default;
    explicit TensorT(Shape sh, S fill = S(0)) : shape(std::move(sh)), v(shape_numel(shape), fill) {}
    TensorT(Shape sh, std::vector<S> data) : shape(std::move(sh)), v(std::move(data)) {
        if (v.size() != shape_numel(shape))
            fail("tensor data length " + std::to_string(v.size()) + " does not match shape " +
                 shape_str(shape));
    }

    static TensorT scalar(S x) { return TensorT({1}, std::vector<S>{x}); }

    std::size_t numel() const { return v.size(); }
    int rank() const { return static_cast<int>(shape.size()); }

    S& at(std::size_t i) { return v[i]; }
    S at(std::size_t i) const { return v[i]; }

    bool all_finite() const {
        for (S x : v)
            if (!is_finite(x)) return false;
        return true;
    }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    template <class T>
    TensorT<T> cast() const {
        TensorT<T> out;
        out.shape = shape;
        out.v.resize(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<T>(v[i]);
        out.requires_grad = requires_grad;
        return out;
    }
};

using Tensor = TensorT<double>;
using TensorF = TensorT<float>;

}  // namespace uniclam
