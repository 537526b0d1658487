#pragma once

#include "imanim/core/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace imanim {

// 8-bit interleaved RGB image, the on-disk unit of the corpus.
struct ImageU8 {
    int h = 0, w = 0, c = 3;
    std::vector<uint8_t> data;

    ImageU8() = default;
    ImageU8(int h_, int w_, int c_ = 3) : h(h_), w(w_), c(c_), data((size_t)h_ * w_ * c_, 0) {}
    uint8_t& at(int y, int x, int ch) { return data[((size_t)y * w + x) * c + ch]; }
    uint8_t at(int y, int x, int ch) const { return data[((size_t)y * w + x) * c + ch]; }
};

// PNG written atomically (temp file + rename). Throws std::runtime_error on IO failure.
void save_png(const std::string& path, const ImageU8& img);
ImageU8 load_png(const std::string& path);

// [0,1] float (h,w,c) <-> 8-bit, rounding to nearest.
ImageU8 to_u8(const Tensor& img);
Tensor to_float(const ImageU8& img);

// Whole-file helpers, atomic on write.
void write_file_atomic(const std::string& path, const std::string& bytes);
std::string read_file(const std::string& path);

}  // namespace imanim
