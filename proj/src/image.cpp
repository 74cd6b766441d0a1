#include "xswap/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>

#include "xswap/error.hpp"

namespace xswap {

std::uint8_t quantize_pixel(float p) {
  const double v = std::round((static_cast<double>(p) + 1.0) * 127.5);
  return static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
}

float dequantize_pixel(std::uint8_t v) { return static_cast<float>(v / 127.5 - 1.0); }

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

void write_png(const std::filesystem::path& path, const Image& image) {
  if (image.dim() != 3 || image.size(0) != 3) throw ShapeError("write_png expects [3, H, W]");
  const auto img = image.detach().to(torch::kFloat32).contiguous();
  const auto h = static_cast<png_uint_32>(img.size(1));
  const auto w = static_cast<png_uint_32>(img.size(2));
  const float* src = img.data_ptr<float>();

  std::vector<png_byte> rows(static_cast<std::size_t>(h) * w * 3);
  for (png_uint_32 y = 0; y < h; ++y)
    for (png_uint_32 x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        rows[(static_cast<std::size_t>(y) * w + x) * 3 + c] =
            quantize_pixel(src[(static_cast<std::size_t>(c) * h + y) * w + x]);

  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("cannot open for writing: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info) throw IoError("libpng initialization failed");
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG encoding failed: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (png_uint_32 y = 0; y < h; ++y) png_write_row(png, rows.data() + static_cast<std::size_t>(y) * w * 3);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image read_png(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open image: " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw FormatError("not a PNG file: " + path.string());

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info) throw IoError("libpng initialization failed");
  std::vector<png_byte> data;
  png_uint_32 w = 0, h = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("corrupt PNG: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  w = png_get_image_width(png, info);
  h = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  if (png_get_rowbytes(png, info) != static_cast<std::size_t>(w) * 3)
    throw FormatError("unsupported PNG layout: " + path.string());
  data.resize(static_cast<std::size_t>(w) * h * 3);
  std::vector<png_bytep> rows(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = data.data() + static_cast<std::size_t>(y) * w * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  auto out = torch::empty({3, h, w}, torch::kFloat32);
  float* dst = out.data_ptr<float>();
  for (png_uint_32 y = 0; y < h; ++y)
    for (png_uint_32 x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        dst[(static_cast<std::size_t>(c) * h + y) * w + x] =
            dequantize_pixel(data[(static_cast<std::size_t>(y) * w + x) * 3 + c]);
  return out;
}

Image montage(const std::vector<Image>& images, std::int64_t cols) {
  if (images.empty() || cols < 1) throw ArgumentError("montage needs images and cols >= 1");
  const auto h = images.front().size(1);
  const auto w = images.front().size(2);
  const auto n = static_cast<std::int64_t>(images.size());
  const auto rows = (n + cols - 1) / cols;
  auto canvas = torch::ones({3, rows * (h + 1) + 1, cols * (w + 1) + 1}, torch::kFloat32);
  for (std::int64_t i = 0; i < n; ++i) {
    if (images[i].size(1) != h || images[i].size(2) != w)
      throw ShapeError("montage images must share a size");
    const auto r = i / cols, c = i % cols;
    canvas.slice(1, 1 + r * (h + 1), 1 + r * (h + 1) + h)
        .slice(2, 1 + c * (w + 1), 1 + c * (w + 1) + w)
        .copy_(images[i].detach().to(torch::kFloat32));
  }
  return canvas;
}

double psnr(const Image& a, const Image& b) {
  const double mse = (a.to(torch::kFloat64) - b.to(torch::kFloat64)).pow(2).mean().item<double>();
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(4.0 / mse);
}

}  // namespace xswap
