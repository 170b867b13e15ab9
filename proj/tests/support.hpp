#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "facecloak/corpus.hpp"
#include "facecloak/embedder.hpp"
#include "facecloak/random.hpp"
#include "facecloak/tensor.hpp"

namespace testing {

inline facecloak::Tensor random_tensor(facecloak::Shape shape, std::uint64_t seed,
                                       double scale = 1.0) {
  facecloak::Rng rng(seed);
  facecloak::Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.normal() * scale);
  return t;
}

inline void randomize(facecloak::ParamStore& params, std::uint64_t seed, double scale = 0.5) {
  facecloak::Rng rng(seed);
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& t = params.mutable_param(p);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.normal() * scale);
  }
}

inline facecloak::EmbeddingVector random_unit(std::uint64_t seed,
                                              std::size_t dim = facecloak::kEmbeddingDim) {
  facecloak::Rng rng(seed);
  std::vector<double> v(dim);
  double n = 0.0;
  for (double& x : v) {
    x = rng.normal();
    n += x * x;
  }
  n = std::sqrt(n);
  std::vector<float> f(dim);
  for (std::size_t i = 0; i < dim; ++i) f[i] = static_cast<float>(v[i] / n);
  return facecloak::EmbeddingVector(std::move(f));
}

// A small corpus and a briefly trained model shared by the tests of one
// executable.
struct Fixture {
  facecloak::Corpus corpus;
  facecloak::EmbedderModel model;
};

inline const Fixture& small_fixture() {
  static const Fixture f = [] {
    Fixture out;
    out.corpus = facecloak::synthesize_corpus(6, 6, 0);
    facecloak::TrainOptions o;
    o.epochs = 8;
    o.seed = 1;
    out.model = facecloak::train(out.corpus.images, out.corpus.labels, o);
    return out;
  }();
  return f;
}

class TempDir {
 public:
  explicit TempDir(const std::string& name)
      : path_(std::filesystem::temp_directory_path() / ("facecloak_test_" + name)) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing
