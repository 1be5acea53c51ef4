#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "s4rec/common.hpp"
#include "s4rec/rng.hpp"

namespace s4rec {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

// Dense row-major n-d array. Scalar type S is float for training storage and
// double for the high-precision test path; reductions always accumulate in
// double regardless of S.
template <typename S>
struct TensorData {
    Shape shape;
    std::vector<S> data;

    TensorData() = default;
    explicit TensorData(Shape sh) : shape(std::move(sh)) {
        data.assign(static_cast<size_t>(shape_numel(shape)), S{0});
    }
    TensorData(Shape sh, std::vector<S> d) : shape(std::move(sh)), data(std::move(d)) {
        if (static_cast<int64_t>(data.size()) != shape_numel(shape))
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }
    // size of the last axis
    int64_t cols() const { return shape.empty() ? 1 : shape.back(); }
    // product of all leading axes
    int64_t rows() const { return shape.empty() ? 1 : numel() / cols(); }

    S* row(int64_t r) { return data.data() + r * cols(); }
    const S* row(int64_t r) const { return data.data() + r * cols(); }

    static TensorData zeros(Shape sh) { return TensorData(std::move(sh)); }

    static TensorData full(Shape sh, S v) {
        TensorData t(std::move(sh));
        for (auto& x : t.data) x = v;
        return t;
    }

    static TensorData scalar(S v) { return TensorData({}, {v}); }

    static TensorData randn(Shape sh, Rng& rng, double stddev) {
        TensorData t(std::move(sh));
        for (auto& x : t.data) x = static_cast<S>(rng.gaussian() * stddev);
        return t;
    }

    bool all_finite() const {
        for (S v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    template <typename T>
    TensorData<T> cast() const {
        TensorData<T> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<T>(data[i]);
        return out;
    }
};

}  // namespace s4rec
