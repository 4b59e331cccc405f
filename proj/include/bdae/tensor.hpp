#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "bdae/errors.hpp"

namespace bdae {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

// Dense row-major N-d array. Float for training, double for gradient checks.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;

    explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)) {
        for (int64_t d : shape)
            if (d <= 0) throw ValueError("tensor: non-positive extent in shape " + shape_str(shape));
        data.assign(static_cast<size_t>(shape_numel(shape)), fill);
    }

    Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
        if (static_cast<int64_t>(data.size()) != shape_numel(shape))
            throw ValueError("tensor: " + std::to_string(data.size()) + " values for shape " +
                             shape_str(shape));
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int64_t extent(int axis) const { return shape[static_cast<size_t>(axis)]; }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    template <typename... Ix>
    T& at(Ix... ix) {
        return data[static_cast<size_t>(offset_of({static_cast<int64_t>(ix)...}))];
    }
    template <typename... Ix>
    const T& at(Ix... ix) const {
        return data[static_cast<size_t>(offset_of({static_cast<int64_t>(ix)...}))];
    }

    int64_t offset_of(std::initializer_list<int64_t> ix) const {
        int64_t off = 0;
        size_t a = 0;
        for (int64_t i : ix) {
            off = off * shape[a] + i;
            ++a;
        }
        return off;
    }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != numel())
            throw ValueError("reshape: " + shape_str(shape) + " to " + shape_str(s));
        Tensor out = *this;
        out.shape = std::move(s);
        return out;
    }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    void zero() { fill(T(0)); }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

template <typename A, typename B>
bool same_shape(const Tensor<A>& a, const Tensor<B>& b) {
    return a.shape == b.shape;
}

}  // namespace bdae
