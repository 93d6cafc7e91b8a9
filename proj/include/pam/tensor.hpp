#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pam {

/// Dense row-major tensor with shared storage. Complex data uses a trailing
/// axis of extent 2 holding (re, im); see is_complex().
template <typename T>
struct Tensor {
    std::vector<int64_t> shape;
    std::shared_ptr<std::vector<T>> buf;

    Tensor() = default;

    static Tensor zeros(std::vector<int64_t> shape) {
        Tensor t;
        t.shape = std::move(shape);
        t.buf = std::make_shared<std::vector<T>>(static_cast<size_t>(numel_of(t.shape)), T(0));
        return t;
    }

    static Tensor full(std::vector<int64_t> shape, T v) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.buf->begin(), t.buf->end(), v);
        return t;
    }

    static Tensor from(std::vector<int64_t> shape, std::vector<T> values) {
        if (numel_of(shape) != static_cast<int64_t>(values.size())) {
            throw std::invalid_argument("tensor: value count does not match shape");
        }
        Tensor t;
        t.shape = std::move(shape);
        t.buf = std::make_shared<std::vector<T>>(std::move(values));
        return t;
    }

    static Tensor scalar(T v) { return from({1}, {v}); }

    static int64_t numel_of(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) n *= d;
        return n;
    }

    int64_t numel() const { return buf ? static_cast<int64_t>(buf->size()) : 0; }
    int64_t dim(int i) const {
        const int r = static_cast<int>(shape.size());
        if (i < 0) i += r;
        return shape[static_cast<size_t>(i)];
    }
    int rank() const { return static_cast<int>(shape.size()); }
    bool defined() const { return static_cast<bool>(buf); }
    bool is_complex() const { return !shape.empty() && shape.back() == 2; }

    T* data() { return buf->data(); }
    const T* data() const { return buf->data(); }
    T& operator[](int64_t i) { return (*buf)[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return (*buf)[static_cast<size_t>(i)]; }

    /// New shape over the same storage.
    Tensor reshaped(std::vector<int64_t> new_shape) const {
        if (numel_of(new_shape) != numel()) {
            throw std::invalid_argument("reshape: element count mismatch");
        }
        Tensor t;
        t.shape = std::move(new_shape);
        t.buf = buf;
        return t;
    }

    Tensor clone() const {
        Tensor t;
        t.shape = shape;
        t.buf = std::make_shared<std::vector<T>>(*buf);
        return t;
    }

    bool all_finite() const {
        for (const T& v : *buf) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }
};

inline std::string shape_string(const std::vector<int64_t>& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

template <typename T>
void check_complex(const Tensor<T>& t, const char* what) {
    check(t.is_complex(), std::string(what) + ": expected trailing axis of extent 2, got " +
                              shape_string(t.shape));
}

}  // namespace pam
