#pragma once

#include <cstddef>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mapseg/error.hpp"

namespace mapseg {

using Shape = std::vector<int>;

/// 64-byte aligned storage. Vectorized kernels peel a data-dependent number
/// of leading elements on unaligned buffers, which changes summation order
/// from run to run; fixed alignment keeps results bit-reproducible.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), alignment));
    }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

std::string shape_str(const Shape& shape);

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
}

/// Dense row-major array. Owns its storage; copies are deep.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0))
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
        check_dims();
    }

    Tensor(Shape shape, const std::vector<T>& data)
        : Tensor(std::move(shape), AlignedVector<T>(data.begin(), data.end())) {}

    Tensor(Shape shape, AlignedVector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        check_dims();
        if (data_.size() != shape_numel(shape_)) {
            throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
        }
    }

    const Shape& shape() const noexcept { return shape_; }
    int ndim() const noexcept { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    AlignedVector<T>& storage() noexcept { return data_; }
    const AlignedVector<T>& storage() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    T& at(int i, int j) { return data_[static_cast<std::size_t>(i) * shape_[1] + j]; }
    const T& at(int i, int j) const {
        return data_[static_cast<std::size_t>(i) * shape_[1] + j];
    }
    T& at(int c, int i, int j) {
        return data_[(static_cast<std::size_t>(c) * shape_[1] + i) * shape_[2] + j];
    }
    const T& at(int c, int i, int j) const {
        return data_[(static_cast<std::size_t>(c) * shape_[1] + i) * shape_[2] + j];
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    /// Same data, new shape with equal element count.
    Tensor reshaped(Shape shape) const {
        return Tensor(std::move(shape), data_);
    }

    template <typename U>
    Tensor<U> cast() const {
        AlignedVector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    bool operator==(const Tensor& other) const = default;

private:
    void check_dims() const {
        for (int d : shape_) {
            if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape_));
        }
    }

    Shape shape_;
    AlignedVector<T> data_;
};

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

}  // namespace mapseg
