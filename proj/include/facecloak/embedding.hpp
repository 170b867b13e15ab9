#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace facecloak {

inline constexpr std::size_t kEmbeddingDim = 128;

using Label = int;

// Output of the embedder: a point on the unit hypersphere (norm 1 within
// 1e-4), so pairwise distances lie in [0, 2].
class EmbeddingVector {
 public:
  EmbeddingVector() = default;
  explicit EmbeddingVector(std::vector<float> values)
      : values_(std::move(values)) {}

  std::size_t size() const noexcept { return values_.size(); }
  float operator[](std::size_t i) const { return values_[i]; }
  float& operator[](std::size_t i) { return values_[i]; }
  std::span<const float> values() const noexcept { return values_; }
  const std::vector<float>& raw() const noexcept { return values_; }

  double norm() const;

  friend bool operator==(const EmbeddingVector&,
                         const EmbeddingVector&) = default;

 private:
  std::vector<float> values_;
};

struct GalleryEntry {
  EmbeddingVector embedding;
  Label label = 0;
  std::string source;
};

using LabeledGallery = std::vector<GalleryEntry>;

}  // namespace facecloak
