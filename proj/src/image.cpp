#include "facecloak/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>

#include "facecloak/error.hpp"

namespace facecloak {

Image::Image(std::size_t height, std::size_t width, float fill)
    : height_(height), width_(width), pixels_(3 * height * width, fill) {
  if (height == 0 || width == 0) {
    throw ArgumentError("image dimensions must be positive");
  }
}

Image::Image(std::size_t height, std::size_t width, std::vector<float> pixels)
    : height_(height), width_(width), pixels_(std::move(pixels)) {
  if (height == 0 || width == 0) {
    throw ArgumentError("image dimensions must be positive");
  }
  if (pixels_.size() != 3 * height * width) {
    throw StructuralError("image pixel buffer has " +
                          std::to_string(pixels_.size()) + " values, expected " +
                          std::to_string(3 * height * width));
  }
}

Tensor Image::to_tensor() const { return Tensor({3, height_, width_}, pixels_); }

Image Image::from_tensor(const Tensor& t) {
  const Shape& s = t.shape();
  if (s.size() != 3 || s[0] != 3) {
    throw StructuralError("expected a [3,H,W] tensor, got " + to_string(s));
  }
  return Image(s[1], s[2], t.values());
}

void Image::clamp() {
  for (auto& v : pixels_) v = std::clamp(v, 0.0f, 255.0f);
}

Image Image::quantized() const {
  Image out = *this;
  for (auto& v : out.pixels_) v = std::nearbyint(std::clamp(v, 0.0f, 255.0f));
  return out;
}

// ---------------------------------------------------------------------------
// PNM

namespace {

class PnmReader {
 public:
  PnmReader(const std::vector<unsigned char>& bytes, std::size_t start)
      : bytes_(bytes), pos_(start) {}

  std::size_t pos() const { return pos_; }

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t read_uint(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    std::size_t value = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      value = value * 10 + (bytes_[pos_] - '0');
      if (value > 1'000'000) throw FormatError(std::string(what) + " too large", start);
      ++pos_;
    }
    if (pos_ == start) {
      throw FormatError(std::string("expected ") + what, start);
    }
    return value;
  }

  void expect_single_whitespace() {
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) {
      throw FormatError("expected whitespace before raster", pos_);
    }
    ++pos_;
  }

 private:
  const std::vector<unsigned char>& bytes_;
  std::size_t pos_;
};

std::string lowercase_extension(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return ext;
}

void refuse_lossy(const std::filesystem::path& path) {
  const std::string ext = lowercase_extension(path);
  if (ext == ".jpg" || ext == ".jpeg" || ext == ".webp" || ext == ".heic" ||
      ext == ".avif") {
    throw ArgumentError("lossy image format refused: " + path.string());
  }
}

}  // namespace

Image decode_pnm(const std::vector<unsigned char>& bytes,
                 std::vector<std::string>* warnings) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '6' && bytes[1] != '5')) {
    throw FormatError("not a binary PPM/PGM file (expected P6 or P5 magic)", 0);
  }
  const bool gray = bytes[1] == '5';
  PnmReader body(bytes, 2);
  const std::size_t width = body.read_uint("width");
  const std::size_t height = body.read_uint("height");
  const std::size_t maxval = body.read_uint("maxval");
  if (width == 0 || height == 0) throw FormatError("zero image dimension", body.pos());
  if (maxval != 255) {
    throw FormatError("only maxval 255 is supported, found " + std::to_string(maxval),
                      body.pos());
  }
  body.expect_single_whitespace();
  const std::size_t raster = body.pos();
  const std::size_t channels = gray ? 1 : 3;
  const std::size_t needed = width * height * channels;
  if (bytes.size() < raster + needed) {
    throw FormatError("truncated raster: need " + std::to_string(needed) +
                          " bytes, have " + std::to_string(bytes.size() - raster),
                      bytes.size());
  }
  Image img(height, width);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t base = raster + (y * width + x) * channels;
      for (std::size_t c = 0; c < 3; ++c) {
        img.at(c, y, x) = bytes[base + (gray ? 0 : c)];
      }
    }
  }
  if (gray && warnings) {
    warnings->push_back("grayscale image expanded to three identical channels");
  }
  return img;
}

std::vector<unsigned char> encode_ppm(const Image& image) {
  const std::string header = "P6\n" + std::to_string(image.width()) + " " +
                             std::to_string(image.height()) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  out.reserve(out.size() + image.size());
  for (std::size_t y = 0; y < image.height(); ++y) {
    for (std::size_t x = 0; x < image.width(); ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = std::nearbyint(std::clamp(image.at(c, y, x), 0.0f, 255.0f));
        out.push_back(static_cast<unsigned char>(v));
      }
    }
  }
  return out;
}

Image load_image(const std::filesystem::path& path,
                 std::vector<std::string>* warnings) {
  refuse_lossy(path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open image: " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  try {
    return decode_pnm(bytes, warnings);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.detail(), e.offset());
  }
}

void save_image(const Image& image, const std::filesystem::path& path) {
  refuse_lossy(path);
  const std::string ext = lowercase_extension(path);
  if (ext != ".ppm" && ext != ".pnm") {
    throw ArgumentError("unsupported output format (use .ppm): " + path.string());
  }
  const auto bytes = encode_ppm(image);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write image: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ConfigError("failed writing image: " + path.string());
}

// ---------------------------------------------------------------------------
// Resampling

Image resize_bilinear(const Image& image, std::size_t out_height,
                      std::size_t out_width) {
  Image out(out_height, out_width);
  const double sy = double(image.height()) / out_height;
  const double sx = double(image.width()) / out_width;
  const long max_y = static_cast<long>(image.height()) - 1;
  const long max_x = static_cast<long>(image.width()) - 1;
  for (std::size_t oy = 0; oy < out_height; ++oy) {
    const double fy = std::clamp((oy + 0.5) * sy - 0.5, 0.0, double(max_y));
    const long y0 = static_cast<long>(std::floor(fy));
    const long y1 = std::min(y0 + 1, max_y);
    const double wy = fy - y0;
    for (std::size_t ox = 0; ox < out_width; ++ox) {
      const double fx = std::clamp((ox + 0.5) * sx - 0.5, 0.0, double(max_x));
      const long x0 = static_cast<long>(std::floor(fx));
      const long x1 = std::min(x0 + 1, max_x);
      const double wx = fx - x0;
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = image.at(c, y0, x0) * (1 - wx) + image.at(c, y0, x1) * wx;
        const double bot = image.at(c, y1, x0) * (1 - wx) + image.at(c, y1, x1) * wx;
        out.at(c, oy, ox) = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return out;
}

Image preprocess(const Image& image, std::optional<CropRect> crop) {
  CropRect r;
  if (crop) {
    r = *crop;
    if (r.width == 0 || r.height == 0 || r.x + r.width > image.width() ||
        r.y + r.height > image.height()) {
      throw ArgumentError("crop rectangle out of bounds");
    }
  } else {
    const std::size_t side = std::min(image.width(), image.height());
    r = {(image.width() - side) / 2, (image.height() - side) / 2, side, side};
  }
  Image cropped(r.height, r.width);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < r.height; ++y) {
      for (std::size_t x = 0; x < r.width; ++x) {
        cropped.at(c, y, x) = image.at(c, r.y + y, r.x + x);
      }
    }
  }
  if (r.width == kImageSide && r.height == kImageSide) return cropped;
  return resize_bilinear(cropped, kImageSide, kImageSide);
}

}  // namespace facecloak
