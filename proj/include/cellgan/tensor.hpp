#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace cellgan {

/// Thrown when an argument violates an operation's domain contract
/// (bad shapes, out-of-range labels, invalid quadrants, ...).
struct domain_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Thrown when a configuration document or spec is inconsistent.
struct config_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Thrown when a computation leaves the representable/valid regime
/// (divergence, failed matrix square root, ...).
struct numerical_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Thrown when an object is used before it is ready (missing weights, ...).
struct state_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::string shape_str(const std::vector<int>& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
    return r + "]";
}

/// Dense row-major tensor with shared storage. Copies are shallow; use
/// clone() for a deep copy. Rank is dynamic; networks use NCHW layout.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<T>>(count(shape_), T(0))) {}

    Tensor(std::vector<int> shape, std::vector<T> values)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<T>>(std::move(values))) {
        if (data_->size() != count(shape_))
            throw domain_error("tensor: value count does not match shape " + shape_str(shape_));
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, T v) {
        Tensor t(std::move(shape));
        std::fill(t.begin(), t.end(), v);
        return t;
    }

    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    bool defined() const { return data_ != nullptr; }
    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    int rank() const { return static_cast<int>(shape_.size()); }

    size_t size() const { return data_ ? data_->size() : 0; }

    T* data() { return data_->data(); }
    const T* data() const { return data_->data(); }
    T* begin() { return data(); }
    T* end() { return data() + size(); }
    const T* begin() const { return data(); }
    const T* end() const { return data() + size(); }

    T& operator[](size_t i) { return (*data_)[i]; }
    const T& operator[](size_t i) const { return (*data_)[i]; }

    /// Element access for 4-d NCHW tensors.
    T& at(int n, int c, int h, int w) {
        return (*data_)[((static_cast<size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    const T& at(int n, int c, int h, int w) const {
        return (*data_)[((static_cast<size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<T>>(*data_);
        return t;
    }

    /// Same storage, new shape (element count must match).
    Tensor reshaped(std::vector<int> shape) const {
        if (count(shape) != size())
            throw domain_error("reshape: element count mismatch " + shape_str(shape_) +
                               " -> " + shape_str(shape));
        Tensor t = *this;
        t.shape_ = std::move(shape);
        return t;
    }

    void fill(T v) { std::fill(begin(), end(), v); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (const T& v : *data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    static size_t count(const std::vector<int>& shape) {
        size_t n = 1;
        for (int d : shape) {
            if (d < 0) throw domain_error("tensor: negative dimension");
            n *= static_cast<size_t>(d);
        }
        return n;
    }

private:
    std::vector<int> shape_;
    std::shared_ptr<std::vector<T>> data_;
};

template <typename T>
inline void axpy(T a, const Tensor<T>& x, Tensor<T>& y) {
    if (!x.same_shape(y)) throw domain_error("axpy: shape mismatch");
    const T* xp = x.data();
    T* yp = y.data();
    for (size_t i = 0; i < x.size(); ++i) yp[i] += a * xp[i];
}

template <typename T>
inline T dot_all(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) throw domain_error("dot: shape mismatch");
    T s = 0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

template <typename T>
inline T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) throw domain_error("max_abs_diff: shape mismatch");
    T m = 0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

template <typename T>
inline T max_abs(const Tensor<T>& a) {
    T m = 0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i]));
    return m;
}

}  // namespace cellgan
