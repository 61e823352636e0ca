#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>

#include "eaconv/tensor.hpp"

namespace eaconv {

/// Writes a 2-D tensor as a binary 8-bit PGM image, affinely mapping the
/// value range to 0..255 (min→0, max→255; a constant image maps to 0).
inline void write_pgm(const std::string& path, const Tensor& image) {
    require_rank(image, 2, "write_pgm");
    const int64_t h = image.dim(0), w = image.dim(1);
    double lo = image[0], hi = image[0];
    for (int64_t i = 1; i < image.numel(); ++i) {
        lo = std::min(lo, image[i]);
        hi = std::max(hi, image[i]);
    }
    const double span = hi - lo;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_pgm: cannot open " + path);
    out << "P5\n" << w << " " << h << "\n255\n";
    for (int64_t i = 0; i < image.numel(); ++i) {
        const double v = span > 0.0 ? (image[i] - lo) / span : 0.0;
        const auto byte = static_cast<uint8_t>(std::lround(v * 255.0));
        out.put(static_cast<char>(byte));
    }
    if (!out) throw std::runtime_error("write_pgm: write failed for " + path);
}

}  // namespace eaconv
