#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <torch/torch.h>

namespace xswap {

// Images travel as float tensors of shape [3, H, W] (batches: [N, 3, H, W])
// with intensities in [-1, 1].
using Image = torch::Tensor;

// 8-bit quantization used by every PNG we write: round((p + 1) * 127.5).
std::uint8_t quantize_pixel(float p);
float dequantize_pixel(std::uint8_t v);

// Write a [3, H, W] image as 8-bit RGB PNG.
void write_png(const std::filesystem::path& path, const Image& image);
// Read an 8-bit RGB (or RGBA/gray, converted) PNG into a [3, H, W] float32 image.
Image read_png(const std::filesystem::path& path);

// Tile equally sized [3, H, W] images into a rows x cols grid with a 1px
// separator.
Image montage(const std::vector<Image>& images, std::int64_t cols);

// Peak signal-to-noise ratio in dB for images in [-1, 1] (peak-to-peak 2).
double psnr(const Image& a, const Image& b);

}  // namespace xswap
