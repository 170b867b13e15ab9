#include "facecloak/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <string>

#include "facecloak/error.hpp"
#include "facecloak/parallel.hpp"

namespace facecloak {

double embedding_distance(const EmbeddingVector& a, const EmbeddingVector& b) {
  if (a.size() != b.size()) {
    throw StructuralError("embedding dimensions differ: " + std::to_string(a.size()) +
                          " vs " + std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// SSIM

namespace {

constexpr int kRadius = 5;
constexpr double kSigma = 1.5;
constexpr double kC1 = (0.01 * 255) * (0.01 * 255);
constexpr double kC2 = (0.03 * 255) * (0.03 * 255);

std::array<double, 2 * kRadius + 1> gaussian_taps() {
  std::array<double, 2 * kRadius + 1> w{};
  double sum = 0.0;
  for (int i = -kRadius; i <= kRadius; ++i) {
    w[i + kRadius] = std::exp(-(i * i) / (2.0 * kSigma * kSigma));
    sum += w[i + kRadius];
  }
  for (double& v : w) v /= sum;
  return w;
}

// Separable weighted mean over every fully contained window of a plane.
std::vector<double> filter_valid(const std::vector<double>& plane, std::size_t h,
                                 std::size_t w) {
  static const auto taps = gaussian_taps();
  const std::size_t oh = h - 2 * kRadius, ow = w - 2 * kRadius;
  std::vector<double> rows(h * ow);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int k = 0; k <= 2 * kRadius; ++k) s += taps[k] * plane[y * w + x + k];
      rows[y * ow + x] = s;
    }
  }
  std::vector<double> out(oh * ow);
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int k = 0; k <= 2 * kRadius; ++k) s += taps[k] * rows[(y + k) * ow + x];
      out[y * ow + x] = s;
    }
  }
  return out;
}

}  // namespace

double ssim(const Image& a, const Image& b) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw StructuralError("ssim: image shapes differ");
  }
  const std::size_t h = a.height(), w = a.width();
  if (h < 2 * kRadius + 1 || w < 2 * kRadius + 1) {
    throw StructuralError("ssim: images smaller than the 11x11 window");
  }
  const std::size_t plane = h * w;
  double total = 0.0;
  for (std::size_t c = 0; c < Image::channels(); ++c) {
    std::vector<double> x(plane), y(plane), xx(plane), yy(plane), xy(plane);
    for (std::size_t i = 0; i < plane; ++i) {
      x[i] = a.pixels()[c * plane + i];
      y[i] = b.pixels()[c * plane + i];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto ux = filter_valid(x, h, w), uy = filter_valid(y, h, w);
    const auto uxx = filter_valid(xx, h, w), uyy = filter_valid(yy, h, w);
    const auto uxy = filter_valid(xy, h, w);
    double sum = 0.0;
    for (std::size_t i = 0; i < ux.size(); ++i) {
      const double vx = uxx[i] - ux[i] * ux[i];
      const double vy = uyy[i] - uy[i] * uy[i];
      const double vxy = uxy[i] - ux[i] * uy[i];
      sum += ((2 * ux[i] * uy[i] + kC1) * (2 * vxy + kC2)) /
             ((ux[i] * ux[i] + uy[i] * uy[i] + kC1) * (vx + vy + kC2));
    }
    total += sum / static_cast<double>(ux.size());
  }
  return total / Image::channels();
}

double dssim(const Image& a, const Image& b) { return (1.0 - ssim(a, b)) / 2.0; }

// ---------------------------------------------------------------------------
// Verification

namespace {

void check_gallery(const LabeledGallery& gallery) {
  std::map<Label, std::size_t> counts;
  for (const auto& e : gallery) ++counts[e.label];
  std::size_t with_pairs = 0;
  for (const auto& [label, n] : counts) with_pairs += n >= 2;
  if (counts.size() < 2 || with_pairs == 0) {
    throw ConfigError(
        "verification needs at least 2 identities and one identity with 2 images");
  }
}

void check_threshold(double threshold) {
  if (!(threshold >= 0.0) || !std::isfinite(threshold)) {
    throw ConfigError("verification threshold must be a non-negative number");
  }
}

VerificationReport make_report(double threshold, std::size_t matching,
                               std::size_t mismatching, std::size_t tp,
                               std::size_t fp, PairCounting counting) {
  const std::size_t f = counting == PairCounting::Ordered ? 2 : 1;
  VerificationReport r;
  r.threshold = threshold;
  r.matching_pairs = matching * f;
  r.mismatching_pairs = mismatching * f;
  r.true_positives = tp * f;
  r.false_positives = fp * f;
  r.true_positive_rate = static_cast<double>(tp) / static_cast<double>(matching);
  r.false_positive_rate = static_cast<double>(fp) / static_cast<double>(mismatching);
  return r;
}

}  // namespace

VerificationReport verification(const LabeledGallery& gallery, double threshold,
                                PairCounting counting) {
  check_gallery(gallery);
  check_threshold(threshold);
  std::size_t matching = 0, mismatching = 0, tp = 0, fp = 0;
  for (std::size_t i = 0; i < gallery.size(); ++i) {
    for (std::size_t j = i + 1; j < gallery.size(); ++j) {
      const bool accept =
          embedding_distance(gallery[i].embedding, gallery[j].embedding) < threshold;
      if (gallery[i].label == gallery[j].label) {
        ++matching;
        tp += accept;
      } else {
        ++mismatching;
        fp += accept;
      }
    }
  }
  return make_report(threshold, matching, mismatching, tp, fp, counting);
}

DistanceMatrix::DistanceMatrix(const LabeledGallery& gallery, std::size_t jobs) {
  check_gallery(gallery);
  const std::size_t n = gallery.size();
  for (const auto& e : gallery) labels_.push_back(e.label);
  d_.assign(n * n, 0.0);
  parallel_for(n, jobs, [&](std::size_t i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) d_[i * n + j] = embedding_distance(gallery[i].embedding, gallery[j].embedding);
    }
  });
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      (labels_[i] == labels_[j] ? matching_ : mismatching_).push_back(d_[i * n + j]);
    }
  }
  std::sort(matching_.begin(), matching_.end());
  std::sort(mismatching_.begin(), mismatching_.end());
}

VerificationReport DistanceMatrix::verify(double threshold, PairCounting counting) const {
  check_threshold(threshold);
  const auto below = [threshold](const std::vector<double>& v) {
    return static_cast<std::size_t>(std::lower_bound(v.begin(), v.end(), threshold) -
                                    v.begin());
  };
  return make_report(threshold, matching_.size(), mismatching_.size(), below(matching_),
                     below(mismatching_), counting);
}

// ---------------------------------------------------------------------------
// ROC

std::vector<double> roc_thresholds(double start, double step, double stop) {
  if (!(step > 0.0) || !(stop > start) || !std::isfinite(start) || !std::isfinite(stop)) {
    throw ConfigError("roc sweep needs step > 0 and stop > start");
  }
  const auto count = static_cast<std::size_t>(std::llround((stop - start) / step));
  std::vector<double> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(start + static_cast<double>(i) * step);
  return out;
}

RocCurve roc_sweep(const DistanceMatrix& distances, double start, double step,
                   double stop) {
  RocCurve curve;
  for (double t : roc_thresholds(start, step, stop)) {
    const auto r = distances.verify(t);
    curve.points.push_back({t, r.true_positive_rate, r.false_positive_rate});
  }
  return curve;
}

RocCurve roc_sweep(const LabeledGallery& gallery, double start, double step,
                   double stop) {
  roc_thresholds(start, step, stop);
  return roc_sweep(DistanceMatrix(gallery), start, step, stop);
}

double threshold_at_fp(const DistanceMatrix& distances, double max_fp, double start,
                       double step, double stop) {
  std::optional<double> best;
  for (double t : roc_thresholds(start, step, stop)) {
    if (distances.verify(t).false_positive_rate <= max_fp) best = t;
  }
  if (!best) throw ConfigError("no sweep threshold keeps the false-positive rate within bound");
  return *best;
}

std::string roc_to_csv(const RocCurve& curve) {
  std::string out = "threshold,tp_rate,fp_rate\n";
  char line[96];
  for (const auto& p : curve.points) {
    std::snprintf(line, sizeof line, "%.6f,%.6f,%.6f\n", p.threshold, p.tp_rate, p.fp_rate);
    out += line;
  }
  return out;
}

}  // namespace facecloak
