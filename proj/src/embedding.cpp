#include "facecloak/embedding.hpp"

#include <cmath>

namespace facecloak {

double EmbeddingVector::norm() const {
  double s = 0.0;
  for (float v : values_) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

}  // namespace facecloak
