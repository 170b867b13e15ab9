#pragma once

// Straight-line double-precision re-implementation of the chain networks the
// embedder uses. Written with plain index loops and no shared code with the
// library's im2col kernels, so it serves as an independent forward oracle.

#include <cmath>
#include <stdexcept>
#include <vector>

#include "facecloak/autodiff.hpp"

namespace oracle {

struct Activation {
  std::vector<std::size_t> shape;
  std::vector<double> v;
};

inline Activation conv3x3(const Activation& x, const facecloak::Tensor& w,
                          const facecloak::Tensor& b, int stride) {
  const std::size_t ci = x.shape[0], h = x.shape[1], wd = x.shape[2];
  const std::size_t co = w.shape()[0];
  const std::size_t oh = (h - 1) / stride + 1, ow = (wd - 1) / stride + 1;
  Activation y{{co, oh, ow}, std::vector<double>(co * oh * ow)};
  for (std::size_t o = 0; o < co; ++o) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double s = b[o];
        for (std::size_t c = 0; c < ci; ++c) {
          for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
              const long iy = static_cast<long>(oy) * stride + ky - 1;
              const long ix = static_cast<long>(ox) * stride + kx - 1;
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) ||
                  ix >= static_cast<long>(wd)) {
                continue;
              }
              s += static_cast<double>(w[((o * ci + c) * 3 + ky) * 3 + kx]) *
                   x.v[(c * h + iy) * wd + ix];
            }
          }
        }
        y.v[(o * oh + oy) * ow + ox] = s;
      }
    }
  }
  return y;
}

inline Activation avg_pool2(const Activation& x) {
  const std::size_t c = x.shape[0], h = x.shape[1], w = x.shape[2];
  Activation y{{c, h / 2, w / 2}, std::vector<double>(c * (h / 2) * (w / 2))};
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t oy = 0; oy < h / 2; ++oy) {
      for (std::size_t ox = 0; ox < w / 2; ++ox) {
        double s = 0.0;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) s += x.v[(k * h + 2 * oy + dy) * w + 2 * ox + dx];
        }
        y.v[(k * (h / 2) + oy) * (w / 2) + ox] = s / 4.0;
      }
    }
  }
  return y;
}

inline Activation dense(const Activation& x, const facecloak::Tensor& w,
                        const facecloak::Tensor& b) {
  const std::size_t out = w.shape()[0], in = w.shape()[1];
  Activation y{{out}, std::vector<double>(out)};
  for (std::size_t o = 0; o < out; ++o) {
    double s = b[o];
    for (std::size_t i = 0; i < in; ++i) s += static_cast<double>(w[o * in + i]) * x.v[i];
    y.v[o] = s;
  }
  return y;
}

// Runs a single-input chain graph (each node consumes the previous one).
inline Activation forward(const facecloak::Graph& graph, const facecloak::ParamStore& params,
                          const std::vector<double>& input) {
  using facecloak::OpKind;
  Activation x{graph.nodes()[0].shape, input};
  for (std::size_t id = 1; id < graph.size(); ++id) {
    const auto& n = graph.node(id);
    switch (n.kind) {
      case OpKind::Identity:
        break;
      case OpKind::ScaleShift:
        for (double& v : x.v) v = v * n.scale + n.shift;
        break;
      case OpKind::Conv3x3:
        x = conv3x3(x, params.param(n.params[0]), params.param(n.params[1]), n.stride);
        break;
      case OpKind::Relu:
        for (double& v : x.v) v = v > 0.0 ? v : 0.0;
        break;
      case OpKind::AvgPool2:
        x = avg_pool2(x);
        break;
      case OpKind::Flatten:
        x.shape = {x.v.size()};
        break;
      case OpKind::Dense:
        x = dense(x, params.param(n.params[0]), params.param(n.params[1]));
        break;
      case OpKind::L2Normalize: {
        double s = 0.0;
        for (double v : x.v) s += v * v;
        s = std::sqrt(s);
        for (double& v : x.v) v /= s;
        break;
      }
      default:
        throw std::logic_error("reference net: unsupported op");
    }
  }
  return x;
}

inline double distance(const std::vector<double>& a, const std::vector<float>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

// max(d(a,n) - d(a,p) + margin, 0) with a computed by the reference net.
inline double attack_loss(const facecloak::Graph& graph, const facecloak::ParamStore& params,
                          const std::vector<double>& pixels, const std::vector<float>& p,
                          const std::vector<float>& n, double margin) {
  const Activation a = forward(graph, params, pixels);
  return std::max(distance(a.v, n) - distance(a.v, p) + margin, 0.0);
}

}  // namespace oracle
