#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "facecloak/embedding.hpp"
#include "facecloak/image.hpp"

namespace facecloak {

// Euclidean distance between two embeddings.
double embedding_distance(const EmbeddingVector& a, const EmbeddingVector& b);

// Mean SSIM over channels, 11x11 Gaussian window (sigma 1.5) evaluated where
// the window fits inside the image, C1 = (0.01*255)^2, C2 = (0.03*255)^2,
// population (not sample) covariance.
double ssim(const Image& a, const Image& b);
// (1 - ssim) / 2.
double dssim(const Image& a, const Image& b);

enum class PairCounting { Unordered, Ordered };

struct VerificationReport {
  double true_positive_rate = 0.0;
  double false_positive_rate = 0.0;
  double threshold = 0.0;
  std::size_t matching_pairs = 0;
  std::size_t mismatching_pairs = 0;
  std::size_t true_positives = 0;
  std::size_t false_positives = 0;

  friend bool operator==(const VerificationReport&, const VerificationReport&) = default;
};

// A pair matches when its distance is strictly below the threshold.
VerificationReport verification(const LabeledGallery& gallery, double threshold,
                                PairCounting counting = PairCounting::Unordered);

// Pairwise distances of a gallery, computed once and reused for any number of
// thresholds.
class DistanceMatrix {
 public:
  explicit DistanceMatrix(const LabeledGallery& gallery, std::size_t jobs = 1);

  std::size_t size() const noexcept { return labels_.size(); }
  double at(std::size_t i, std::size_t j) const { return d_[i * size() + j]; }
  const std::vector<Label>& labels() const noexcept { return labels_; }

  VerificationReport verify(double threshold,
                            PairCounting counting = PairCounting::Unordered) const;

 private:
  std::vector<Label> labels_;
  std::vector<double> d_;
  // Sorted distances of unordered matching / mismatching pairs.
  std::vector<double> matching_;
  std::vector<double> mismatching_;
};

struct RocPoint {
  double threshold = 0.0;
  double tp_rate = 0.0;
  double fp_rate = 0.0;
};

struct RocCurve {
  std::vector<RocPoint> points;
};

// Thresholds start + i*step for every i with start + i*step < stop (up to
// rounding), so the defaults give 150 points 0.00 .. 2.98.
std::vector<double> roc_thresholds(double start = 0.0, double step = 0.02,
                                   double stop = 3.0);
RocCurve roc_sweep(const LabeledGallery& gallery, double start = 0.0,
                   double step = 0.02, double stop = 3.0);
RocCurve roc_sweep(const DistanceMatrix& distances, double start = 0.0,
                   double step = 0.02, double stop = 3.0);

// Largest sweep threshold whose false-positive rate is at most `max_fp`;
// ConfigError when even the first threshold exceeds it.
double threshold_at_fp(const DistanceMatrix& distances, double max_fp,
                       double start = 0.0, double step = 0.02, double stop = 3.0);

// Header `threshold,tp_rate,fp_rate`, six decimals.
std::string roc_to_csv(const RocCurve& curve);

}  // namespace facecloak
