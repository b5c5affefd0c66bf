#pragma once

#include "musekit/common.hpp"
#include "musekit/rng.hpp"

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

namespace musekit {

// Dense row-major tensor. float for all stored models; double instantiation
// is used by the finite-difference test oracles.
template <class T>
struct TensorT {
    std::vector<int> shape;
    std::vector<T>   data;

    TensorT() = default;

    static int64_t count(const std::vector<int> & shape) {
        int64_t n = 1;
        for (int d : shape) {
            require(d >= 0, error_kind::shape, "negative dimension");
            n *= d;
        }
        return n;
    }

    static TensorT zeros(std::vector<int> shape) {
        TensorT t;
        t.data.assign((size_t)count(shape), T(0));
        t.shape = std::move(shape);
        return t;
    }

    static TensorT full(std::vector<int> shape, T v) {
        TensorT t = zeros(std::move(shape));
        for (auto & x : t.data) x = v;
        return t;
    }

    static TensorT from(std::vector<int> shape, std::vector<T> values) {
        require(count(shape) == (int64_t)values.size(), error_kind::shape,
                "value count does not match shape");
        TensorT t;
        t.shape = std::move(shape);
        t.data  = std::move(values);
        return t;
    }

    static TensorT randn(std::vector<int> shape, RngState & rng, T stddev) {
        TensorT t = zeros(std::move(shape));
        for (auto & x : t.data) x = (T)(rng.normal() * (double)stddev);
        return t;
    }

    int64_t size() const { return (int64_t)data.size(); }
    int rank() const { return (int)shape.size(); }
    int dim(int i) const { return shape[(size_t)i]; }

    // 2D accessors (rows x cols)
    int rows() const { require(rank() == 2, error_kind::shape, "rows() on non-2D tensor"); return shape[0]; }
    int cols() const { require(rank() == 2, error_kind::shape, "cols() on non-2D tensor"); return shape[1]; }

    T & operator[](int64_t i) { return data[(size_t)i]; }
    const T & operator[](int64_t i) const { return data[(size_t)i]; }

    T & at2(int r, int c) { return data[(size_t)r * shape[1] + c]; }
    const T & at2(int r, int c) const { return data[(size_t)r * shape[1] + c]; }

    // [C,H,W] accessor
    T & at3(int c, int y, int x) { return data[((size_t)c * shape[1] + y) * shape[2] + x]; }
    const T & at3(int c, int y, int x) const { return data[((size_t)c * shape[1] + y) * shape[2] + x]; }

    bool same_shape(const TensorT & o) const { return shape == o.shape; }

    bool all_finite() const {
        for (const T & x : data) {
            if (!std::isfinite((double)x)) return false;
        }
        return true;
    }

    template <class U>
    TensorT<U> cast() const {
        TensorT<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = (U)data[i];
        return out;
    }
};

using Tensor  = TensorT<float>;
using DTensor = TensorT<double>;

template <class T>
std::string shape_str(const TensorT<T> & t) {
    std::string s = "[";
    for (size_t i = 0; i < t.shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(t.shape[i]);
    }
    return s + "]";
}

// out-of-place numerically stable softmax along `axis`
template <class T>
TensorT<T> softmax(const TensorT<T> & logits, int axis) {
    require(axis >= 0 && axis < logits.rank(), error_kind::shape, "softmax: axis out of range");
    require(logits.all_finite(), error_kind::numeric, "softmax: non-finite input");
    const int n = logits.dim(axis);
    int64_t inner = 1;
    for (int i = axis + 1; i < logits.rank(); ++i) inner *= logits.dim(i);
    int64_t outer = logits.size() / ((int64_t)n * inner);

    TensorT<T> out = TensorT<T>::zeros(logits.shape);
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * n * inner + in;
            T mx = logits[base];
            for (int j = 1; j < n; ++j) mx = std::max(mx, logits[base + j * inner]);
            double denom = 0.0;
            for (int j = 0; j < n; ++j) denom += std::exp((double)(logits[base + j * inner] - mx));
            for (int j = 0; j < n; ++j) {
                out[base + j * inner] = (T)(std::exp((double)(logits[base + j * inner] - mx)) / denom);
            }
        }
    }
    return out;
}

} // namespace musekit
