#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "facecloak/tensor.hpp"

namespace facecloak {

inline constexpr std::size_t kImageSide = 96;

// 3-channel planar (CHW) image with real-valued pixels in [0, 255]. Values
// stay real during optimization and are rounded only when written to disk.
class Image {
 public:
  Image() = default;
  Image(std::size_t height, std::size_t width, float fill = 0.0f);
  Image(std::size_t height, std::size_t width, std::vector<float> pixels);

  static constexpr std::size_t channels() noexcept { return 3; }
  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t size() const noexcept { return pixels_.size(); }

  float& at(std::size_t c, std::size_t y, std::size_t x) {
    return pixels_[(c * height_ + y) * width_ + x];
  }
  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels_[(c * height_ + y) * width_ + x];
  }

  std::vector<float>& pixels() noexcept { return pixels_; }
  const std::vector<float>& pixels() const noexcept { return pixels_; }

  Tensor to_tensor() const;
  static Image from_tensor(const Tensor& t);

  void clamp();  // to [0, 255]
  // Round-to-nearest 8-bit view of the pixels, as written by save_image.
  Image quantized() const;

  friend bool operator==(const Image&, const Image&) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<float> pixels_;
};

// Binary portable pixmap (P6) and graymap (P5), 8-bit, maxval 255. Graymaps
// are expanded to three identical channels and a warning is appended to
// `warnings` when provided. Lossy formats are refused by extension.
Image load_image(const std::filesystem::path& path,
                 std::vector<std::string>* warnings = nullptr);
void save_image(const Image& image, const std::filesystem::path& path);

// In-memory variants used by the file functions.
Image decode_pnm(const std::vector<unsigned char>& bytes,
                 std::vector<std::string>* warnings = nullptr);
std::vector<unsigned char> encode_ppm(const Image& image);

struct CropRect {
  std::size_t x = 0;
  std::size_t y = 0;
  std::size_t width = 0;
  std::size_t height = 0;
};

// Crops (largest centered square when `crop` is empty) and bilinearly
// resamples to 96x96 using pixel-center alignment.
Image preprocess(const Image& image, std::optional<CropRect> crop = std::nullopt);

Image resize_bilinear(const Image& image, std::size_t out_height,
                      std::size_t out_width);

}  // namespace facecloak
