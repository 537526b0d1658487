#pragma once

#include <cassert>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace imanim {

// Dense row-major float tensor with value semantics. All model state and
// activations use this; kernels operate on the raw buffer.
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel_of(shape)), 0.0f);
    }
    Tensor(std::vector<int> s, float fill) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel_of(shape)), fill);
    }

    static int64_t numel_of(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    bool empty() const { return data.empty(); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i < 0 ? i + ndim() : i)]; }

    float* ptr() { return data.data(); }
    const float* ptr() const { return data.data(); }

    float& at(int i) { return data[static_cast<size_t>(i)]; }
    float at(int i) const { return data[static_cast<size_t>(i)]; }
    float& at(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
    float at(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }
    float& at(int i, int j, int k) {
        return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
    }
    float at(int i, int j, int k) const {
        return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
    }
    float& at(int i, int j, int k, int l) {
        return data[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
    }
    float at(int i, int j, int k, int l) const {
        return data[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
    }

    Tensor reshaped(std::vector<int> s) const {
        if (numel_of(s) != numel())
            throw std::invalid_argument("reshape: element count mismatch");
        Tensor t = *this;
        t.shape = std::move(s);
        return t;
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    std::string shape_str() const {
        std::string s = "(";
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + ")";
    }
};

inline void require_shape(const Tensor& t, const std::vector<int>& s, const char* what) {
    if (t.shape != s)
        throw std::invalid_argument(std::string(what) + ": expected shape mismatch, got " +
                                    t.shape_str());
}

}  // namespace imanim
