#pragma once

#include <filesystem>
#include <string>

#include "hattn/tensor.hpp"

namespace hattn {

// HTSR tensor blob: magic "HTSR", u32 rank, rank x u64 extents, float64
// payload in row-major order. All fields little-endian.
void write_htsr(const std::filesystem::path& path, const Tensor& t);
Tensor read_htsr(const std::filesystem::path& path);

// 8-bit binary PGM (P5). Values are clamped to [0,1] and scaled to 0..255.
void write_pgm(const std::filesystem::path& path, const Tensor& map);

}  // namespace hattn
