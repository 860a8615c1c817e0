#pragma once

#include <algorithm>
#include <cassert>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "noise2map/common.hpp"

namespace n2m {

// Dense row-major n-d array. Deliberately minimal: the layers do their heavy
// lifting through Eigen maps over contiguous blocks of this storage.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::int64_t> shape, T fill = T(0))
        : shape_(std::move(shape)), data_(count(shape_), fill) {}

    Tensor(std::initializer_list<std::int64_t> shape, T fill = T(0))
        : Tensor(std::vector<std::int64_t>(shape), fill) {}

    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

    const std::vector<std::int64_t>& shape() const { return shape_; }
    std::int64_t dim(std::size_t i) const { return shape_[i]; }
    std::size_t rank() const { return shape_.size(); }
    std::int64_t size() const { return std::int64_t(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](std::int64_t i) { return data_[std::size_t(i)]; }
    const T& operator[](std::int64_t i) const { return data_[std::size_t(i)]; }

    T& operator()(std::int64_t i, std::int64_t j) {
        return data_[std::size_t(i * shape_[1] + j)];
    }
    const T& operator()(std::int64_t i, std::int64_t j) const {
        return data_[std::size_t(i * shape_[1] + j)];
    }
    T& operator()(std::int64_t i, std::int64_t j, std::int64_t k) {
        return data_[std::size_t((i * shape_[1] + j) * shape_[2] + k)];
    }
    const T& operator()(std::int64_t i, std::int64_t j, std::int64_t k) const {
        return data_[std::size_t((i * shape_[1] + j) * shape_[2] + k)];
    }
    T& operator()(std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t l) {
        return data_[std::size_t(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
    }
    const T& operator()(std::int64_t i, std::int64_t j, std::int64_t k,
                        std::int64_t l) const {
        return data_[std::size_t(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        for (std::int64_t i = 0; i < size(); ++i) out[i] = U(data_[std::size_t(i)]);
        return out;
    }

private:
    static std::size_t count(const std::vector<std::int64_t>& shape) {
        std::size_t n = 1;
        for (auto d : shape) {
            assert(d >= 0);
            n *= std::size_t(d);
        }
        return shape.empty() ? 0 : n;
    }

    std::vector<std::int64_t> shape_;
    std::vector<T> data_;
};

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

}  // namespace n2m
