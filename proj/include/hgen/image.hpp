#pragma once

// Minimal 8-bit RGB PNG output (stored-deflate blocks, no external codec) for
// rendered frames and generated samples.

#include <cstdint>
#include <string>
#include <vector>

#include "hgen/tensor.hpp"

namespace hgen::img {

// image {3,H,W}, values clamped to [0,1] and quantized to 8 bits.
std::vector<uint8_t> encode_png_rgb(const Tensor& image);
void write_png_rgb(const std::string& path, const Tensor& image);

// Decodes PNGs produced by encode_png_rgb (stored-deflate only); used by the
// round-trip tests. Returns {3,H,W} with values k/255.
Tensor decode_png_rgb(const std::vector<uint8_t>& bytes);
Tensor read_png_rgb(const std::string& path);

}  // namespace hgen::img
