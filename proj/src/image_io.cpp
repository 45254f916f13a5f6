#include "mkup/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

namespace mkup {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::uint8_t to_byte(Real v) {
  const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

void write_raw(const std::filesystem::path& path, int height, int width, int color_type,
               const std::vector<std::uint8_t>& bytes, int channels) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw ImageIoError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("failed writing " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y)
    png_write_row(png, const_cast<png_bytep>(bytes.data() + static_cast<std::size_t>(y) * width * channels));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Reads any 8-bit PNG, expanding to `channels` channels (1 = gray, 3 = RGB).
std::vector<std::uint8_t> read_raw(const std::filesystem::path& path, int channels, int& height, int& width) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw ImageIoError("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("failed reading " + path.string());
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  width = static_cast<int>(png_get_image_width(png, info));
  height = static_cast<int>(png_get_image_height(png, info));
  const int bit_depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (bit_depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (channels == 3 && (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)) png_set_gray_to_rgb(png);
  if (channels == 1 && (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA ||
                        color == PNG_COLOR_TYPE_PALETTE)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError(path.string() + " is not a single-channel raster");
  }
  png_read_update_info(png, info);
  if (static_cast<int>(png_get_rowbytes(png, info)) != width * channels) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("unexpected pixel layout in " + path.string());
  }
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(height) * width * channels);
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) rows[static_cast<std::size_t>(y)] = bytes.data() + static_cast<std::size_t>(y) * width * channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return bytes;
}

}  // namespace

void write_png(const std::filesystem::path& path, const Image& image) {
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(image.height) * image.width * 3);
  for (Eigen::Index p = 0; p < image.pixels.rows(); ++p)
    for (int c = 0; c < 3; ++c) bytes[static_cast<std::size_t>(p) * 3 + c] = to_byte(image.pixels(p, c));
  write_raw(path, image.height, image.width, PNG_COLOR_TYPE_RGB, bytes, 3);
}

Image read_png(const std::filesystem::path& path) {
  int h = 0, w = 0;
  const auto bytes = read_raw(path, 3, h, w);
  Image img(h, w);
  for (Eigen::Index p = 0; p < img.pixels.rows(); ++p)
    for (int c = 0; c < 3; ++c) img.pixels(p, c) = static_cast<Real>(bytes[static_cast<std::size_t>(p) * 3 + c]) / Real(255);
  return img;
}

void write_label_png(const std::filesystem::path& path, const LabelMap& labels) {
  write_raw(path, labels.height, labels.width, PNG_COLOR_TYPE_GRAY, labels.labels, 1);
}

LabelMap read_label_png(const std::filesystem::path& path) {
  int h = 0, w = 0;
  auto bytes = read_raw(path, 1, h, w);
  LabelMap m;
  m.height = h;
  m.width = w;
  m.labels = std::move(bytes);
  return m;
}

std::pair<int, int> png_dimensions(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw ImageIoError("cannot open " + path.string());
  unsigned char head[24];
  if (std::fread(head, 1, sizeof head, file.get()) != sizeof head || png_sig_cmp(head, 0, 8) != 0)
    throw ImageIoError(path.string() + " is not a PNG file");
  auto be32 = [&](int at) {
    return (static_cast<int>(head[at]) << 24) | (head[at + 1] << 16) | (head[at + 2] << 8) | head[at + 3];
  };
  return {be32(20), be32(16)};
}

void quantize_8bit(Image& image) {
  for (Eigen::Index i = 0; i < image.pixels.size(); ++i)
    image.pixels.data()[i] = static_cast<Real>(to_byte(image.pixels.data()[i])) / Real(255);
}

Image hconcat(const std::vector<Image>& images) {
  if (images.empty()) return {};
  int width = 0;
  for (const Image& im : images) {
    if (im.height != images.front().height) throw ShapeError("hconcat: heights differ");
    width += im.width;
  }
  Image out(images.front().height, width);
  int x0 = 0;
  for (const Image& im : images) {
    for (int y = 0; y < im.height; ++y)
      for (int x = 0; x < im.width; ++x)
        for (int c = 0; c < 3; ++c) out.at(y, x0 + x, c) = im.at(y, x, c);
    x0 += im.width;
  }
  return out;
}

}  // namespace mkup
