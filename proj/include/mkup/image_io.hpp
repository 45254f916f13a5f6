#pragma once

#include "mkup/tensor.hpp"

#include <filesystem>
#include <stdexcept>
#include <utility>

namespace mkup {

struct ImageIoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// 8-bit RGB PNG. Values are quantised to multiples of 1/255 on write.
void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);

// 8-bit single-channel PNG holding region labels.
void write_label_png(const std::filesystem::path& path, const LabelMap& labels);
LabelMap read_label_png(const std::filesystem::path& path);

// (height, width) from the PNG header.
std::pair<int, int> png_dimensions(const std::filesystem::path& path);

// Rounds every channel to the nearest representable 8-bit value.
void quantize_8bit(Image& image);

// Places images side by side (all must share a height).
Image hconcat(const std::vector<Image>& images);

}  // namespace mkup
