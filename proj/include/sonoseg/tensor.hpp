#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "sonoseg/errors.hpp"
#include "sonoseg/rng.hpp"

namespace sonoseg {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) {
        if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

/// Dense row-major tensor. Images are channels-first: C x H x W, batches
/// N x C x H x W. The float specialization is the training currency; the
/// double one exists for the 64-bit gradient-check mode.
template <typename T>
class TensorT {
public:
    TensorT() = default;

    explicit TensorT(Shape shape, T fill = T(0))
        : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}

    TensorT(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_))
            throw ShapeError("data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
    }

    static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }

    static TensorT full(Shape shape, T v) { return TensorT(std::move(shape), v); }

    /// Uniform fill in [-bound, bound); draws doubles from the shared stream
    /// and narrows, so float and double builds consume identical streams.
    static TensorT uniform(Shape shape, SplitMix64& rng, double bound) {
        TensorT t(std::move(shape));
        for (auto& v : t.data_) v = static_cast<T>(rng.next_in(-bound, bound));
        return t;
    }

    const Shape& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (const T& v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> out(shape_);
        for (std::int64_t i = 0; i < numel(); ++i) out[i] = static_cast<U>(data_[static_cast<std::size_t>(i)]);
        return out;
    }

private:
    Shape shape_;
    std::vector<T> data_;
};

using Tensor = TensorT<float>;

template <typename T>
void require_shape(const TensorT<T>& t, const Shape& want, const std::string& what) {
    if (t.shape() != want)
        throw ShapeError(what + ": expected shape " + shape_str(want) + ", got " + shape_str(t.shape()));
}

template <typename T>
void require_ndim(const TensorT<T>& t, int n, const std::string& what) {
    if (t.ndim() != n)
        throw ShapeError(what + ": expected " + std::to_string(n) + "-d tensor, got " + shape_str(t.shape()));
}

} // namespace sonoseg
