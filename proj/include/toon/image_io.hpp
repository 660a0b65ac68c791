#pragma once

// Netpbm (binary PPM/PGM) reading and writing. Tensors use the [-1, 1] range:
// color frames are [3, H, W], grayscale images (sketches) are [1, H, W].

#include <torch/torch.h>

#include <filesystem>

namespace toon {

void write_ppm(const std::filesystem::path& path, const torch::Tensor& frame);
void write_pgm(const std::filesystem::path& path, const torch::Tensor& gray);

/// Reads P6 (color) or P5 (grayscale) files. Returns [3,H,W] or [1,H,W].
torch::Tensor read_netpbm(const std::filesystem::path& path);

/// Quantizes to 8 bits and back, i.e. the value a lossless write/read would yield.
torch::Tensor quantize_u8(const torch::Tensor& image);

}  // namespace toon
