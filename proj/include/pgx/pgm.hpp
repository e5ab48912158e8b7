#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "pgx/tensor.hpp"

namespace pgx {

struct PgmImage {
    int64_t height = 0, width = 0;
    std::vector<uint8_t> pixels;  // row-major
};

// Binary PGM (P5), 8-bit.
void write_pgm(const std::filesystem::path& path, const PgmImage& img);
PgmImage read_pgm(const std::filesystem::path& path);

// Pixel mapping between 8-bit gray and the internal [-1, 1] range:
// 0 -> -1.0, 255 -> 1.0.
inline float pixel_to_unit(uint8_t p) { return static_cast<float>(p) / 255.0f * 2.0f - 1.0f; }
inline uint8_t unit_to_pixel(float v) {
    float scaled = (v + 1.0f) / 2.0f * 255.0f;
    if (scaled <= 0.0f) return 0;
    if (scaled >= 255.0f) return 255;
    return static_cast<uint8_t>(scaled + 0.5f);
}

PgmImage tensor_to_pgm(const TensorF& t);          // expects [H,W] in [-1,1]
TensorF pgm_to_tensor(const PgmImage& img);        // [H,W] in [-1,1]

}  // namespace pgx
