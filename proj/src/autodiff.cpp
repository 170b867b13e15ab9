#include "facecloak/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "facecloak/error.hpp"
#include "facecloak/random.hpp"

namespace facecloak {
namespace {

std::string node_label(NodeId id, OpKind kind) {
  return "node " + std::to_string(id) + " (" + std::string(op_name(kind)) +
         ")";
}

// Dot product with eight independent partial sums; fixed summation order
// keeps results bit-reproducible while letting the compiler vectorize.
float dot(const float* a, const float* b, std::size_t n) {
  float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
  }
  float tail = 0.0f;
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) +
         ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

void axpy(float alpha, const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

struct ConvGeometry {
  std::size_t in_c, in_h, in_w, out_c, out_h, out_w;
  int stride;
  std::size_t k() const { return in_c * 9; }
  std::size_t p() const { return out_h * out_w; }
};

ConvGeometry conv_geometry(const Node& node, const Shape& in) {
  return ConvGeometry{in[0],          in[1],          in[2],     node.shape[0],
                      node.shape[1],  node.shape[2],  node.stride};
}

void im2col(const ConvGeometry& g, const float* x, float* col) {
  const std::size_t P = g.p();
  for (std::size_t ci = 0; ci < g.in_c; ++ci) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        float* row = col + ((ci * 3 + ky) * 3 + kx) * P;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride + ky - 1;
          float* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<long>(g.in_h)) {
            std::fill(dst, dst + g.out_w, 0.0f);
            continue;
          }
          const float* src = x + (ci * g.in_h + iy) * g.in_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox) * g.stride + kx - 1;
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.in_w)) ? 0.0f
                                                                  : src[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const float* col, float* dx) {
  const std::size_t P = g.p();
  for (std::size_t ci = 0; ci < g.in_c; ++ci) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const float* row = col + ((ci * 3 + ky) * 3 + kx) * P;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride + ky - 1;
          if (iy < 0 || iy >= static_cast<long>(g.in_h)) continue;
          float* dst = dx + (ci * g.in_h + iy) * g.in_w;
          const float* src = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox) * g.stride + kx - 1;
            if (ix >= 0 && ix < static_cast<long>(g.in_w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

void add_into(Tensor& dst, const Tensor& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Input: return "input";
    case OpKind::Identity: return "identity";
    case OpKind::ScaleShift: return "scale_shift";
    case OpKind::Conv3x3: return "conv3x3";
    case OpKind::Relu: return "relu";
    case OpKind::AvgPool2: return "avg_pool2";
    case OpKind::Dense: return "dense";
    case OpKind::Flatten: return "flatten";
    case OpKind::L2Normalize: return "l2_normalize";
    case OpKind::Add: return "add";
    case OpKind::Subtract: return "subtract";
    case OpKind::Square: return "square";
    case OpKind::Sum: return "sum";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::MaxZero: return "max_zero";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Graph construction

void Graph::require_node(NodeId id) const {
  if (id >= nodes_.size()) {
    throw StructuralError("node " + std::to_string(id) + " does not exist");
  }
}

const Node& Graph::node(NodeId id) const {
  require_node(id);
  return nodes_[id];
}

NodeId Graph::output() const {
  if (nodes_.empty()) throw StructuralError("graph has no nodes");
  return nodes_.size() - 1;
}

NodeId Graph::push(Node node) {
  for (auto in : node.inputs) require_node(in);
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

ParamId Graph::add_param(std::string name, Shape shape) {
  params_.push_back({std::move(name), std::move(shape)});
  return params_.size() - 1;
}

NodeId Graph::input(Shape shape) {
  if (shape.empty() || element_count(shape) == 0) {
    throw StructuralError("input shape must be non-empty and positive");
  }
  Node n;
  n.kind = OpKind::Input;
  n.shape = std::move(shape);
  const NodeId id = push(std::move(n));
  inputs_.push_back(id);
  return id;
}

NodeId Graph::identity(NodeId x) {
  require_node(x);
  Node n;
  n.kind = OpKind::Identity;
  n.inputs = {x};
  n.shape = nodes_[x].shape;
  return push(std::move(n));
}

NodeId Graph::scale_shift(NodeId x, float scale, float shift) {
  require_node(x);
  Node n;
  n.kind = OpKind::ScaleShift;
  n.inputs = {x};
  n.shape = nodes_[x].shape;
  n.scale = scale;
  n.shift = shift;
  return push(std::move(n));
}

NodeId Graph::conv3x3(NodeId x, std::size_t out_channels, int stride) {
  require_node(x);
  const Shape& in = nodes_[x].shape;
  const NodeId id = nodes_.size();
  if (in.size() != 3) {
    throw StructuralError(node_label(id, OpKind::Conv3x3) +
                          ": expects [C,H,W] input, got " + to_string(in));
  }
  if (stride != 1 && stride != 2) {
    throw StructuralError(node_label(id, OpKind::Conv3x3) +
                          ": stride must be 1 or 2");
  }
  if (out_channels == 0) {
    throw StructuralError(node_label(id, OpKind::Conv3x3) +
                          ": zero output channels");
  }
  Node n;
  n.kind = OpKind::Conv3x3;
  n.inputs = {x};
  n.stride = stride;
  n.shape = {out_channels, (in[1] - 1) / stride + 1, (in[2] - 1) / stride + 1};
  const std::string prefix = "conv" + std::to_string(id);
  n.params = {add_param(prefix + ".weight", {out_channels, in[0], 3, 3}),
              add_param(prefix + ".bias", {out_channels})};
  return push(std::move(n));
}

NodeId Graph::relu(NodeId x) {
  require_node(x);
  Node n;
  n.kind = OpKind::Relu;
  n.inputs = {x};
  n.shape = nodes_[x].shape;
  return push(std::move(n));
}

NodeId Graph::avg_pool2(NodeId x) {
  require_node(x);
  const Shape& in = nodes_[x].shape;
  if (in.size() != 3 || in[1] < 2 || in[2] < 2) {
    throw StructuralError(node_label(nodes_.size(), OpKind::AvgPool2) +
                          ": expects [C,H,W] with H,W >= 2, got " +
                          to_string(in));
  }
  Node n;
  n.kind = OpKind::AvgPool2;
  n.inputs = {x};
  n.shape = {in[0], in[1] / 2, in[2] / 2};
  return push(std::move(n));
}

NodeId Graph::dense(NodeId x, std::size_t out_features) {
  require_node(x);
  const Shape& in = nodes_[x].shape;
  const NodeId id = nodes_.size();
  if (in.size() != 1) {
    throw StructuralError(node_label(id, OpKind::Dense) +
                          ": expects a flat input, got " + to_string(in));
  }
  if (out_features == 0) {
    throw StructuralError(node_label(id, OpKind::Dense) + ": zero outputs");
  }
  Node n;
  n.kind = OpKind::Dense;
  n.inputs = {x};
  n.shape = {out_features};
  const std::string prefix = "dense" + std::to_string(id);
  n.params = {add_param(prefix + ".weight", {out_features, in[0]}),
              add_param(prefix + ".bias", {out_features})};
  return push(std::move(n));
}

NodeId Graph::flatten(NodeId x) {
  require_node(x);
  Node n;
  n.kind = OpKind::Flatten;
  n.inputs = {x};
  n.shape = {element_count(nodes_[x].shape)};
  return push(std::move(n));
}

NodeId Graph::l2_normalize(NodeId x) {
  require_node(x);
  if (nodes_[x].shape.size() != 1) {
    throw StructuralError(node_label(nodes_.size(), OpKind::L2Normalize) +
                          ": expects a vector, got " +
                          to_string(nodes_[x].shape));
  }
  Node n;
  n.kind = OpKind::L2Normalize;
  n.inputs = {x};
  n.shape = nodes_[x].shape;
  return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
  require_node(a);
  require_node(b);
  if (nodes_[a].shape != nodes_[b].shape) {
    throw StructuralError(node_label(nodes_.size(), OpKind::Add) +
                          ": operand shapes " + to_string(nodes_[a].shape) +
                          " and " + to_string(nodes_[b].shape) + " differ");
  }
  Node n;
  n.kind = OpKind::Add;
  n.inputs = {a, b};
  n.shape = nodes_[a].shape;
  return push(std::move(n));
}

NodeId Graph::subtract(NodeId a, NodeId b) {
  require_node(a);
  require_node(b);
  if (nodes_[a].shape != nodes_[b].shape) {
    throw StructuralError(node_label(nodes_.size(), OpKind::Subtract) +
                          ": operand shapes " + to_string(nodes_[a].shape) +
                          " and " + to_string(nodes_[b].shape) + " differ");
  }
  Node n;
  n.kind = OpKind::Subtract;
  n.inputs = {a, b};
  n.shape = nodes_[a].shape;
  return push(std::move(n));
}

NodeId Graph::square(NodeId x) {
  require_node(x);
  Node n;
  n.kind = OpKind::Square;
  n.inputs = {x};
  n.shape = nodes_[x].shape;
  return push(std::move(n));
}

NodeId Graph::sum(NodeId x) {
  require_node(x);
  Node n;
  n.kind = OpKind::Sum;
  n.inputs = {x};
  n.shape = {1};
  return push(std::move(n));
}

NodeId Graph::sqrt(NodeId x) {
  require_node(x);
  Node n;
  n.kind = OpKind::Sqrt;
  n.inputs = {x};
  n.shape = nodes_[x].shape;
  return push(std::move(n));
}

NodeId Graph::max_zero(NodeId x) {
  require_node(x);
  Node n;
  n.kind = OpKind::MaxZero;
  n.inputs = {x};
  n.shape = nodes_[x].shape;
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Parameters

ParamStore::ParamStore(const Graph& graph) {
  values_.reserve(graph.params().size());
  for (const auto& spec : graph.params()) values_.emplace_back(spec.shape);
}

const Tensor& ParamStore::param(ParamId id) const {
  if (id >= values_.size()) {
    throw StructuralError("parameter " + std::to_string(id) +
                          " does not exist");
  }
  return values_[id];
}

Tensor& ParamStore::mutable_param(ParamId id) {
  if (id >= values_.size()) {
    throw StructuralError("parameter " + std::to_string(id) +
                          " does not exist");
  }
  ++version_;
  return values_[id];
}

void ParamStore::validate(const Graph& graph) const {
  const auto& specs = graph.params();
  if (specs.size() != values_.size()) {
    throw StructuralError("parameter store holds " +
                          std::to_string(values_.size()) +
                          " tensors, graph declares " +
                          std::to_string(specs.size()));
  }
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (specs[i].shape != values_[i].shape()) {
      throw StructuralError("parameter " + specs[i].name + " has shape " +
                            to_string(values_[i].shape()) + ", expected " +
                            to_string(specs[i].shape));
    }
  }
}

bool ParamStore::all_finite() const {
  return std::all_of(values_.begin(), values_.end(),
                     [](const Tensor& t) { return t.all_finite(); });
}

// ---------------------------------------------------------------------------
// Forward

void Tape::clear() {
  graph_ = nullptr;
  params_ = nullptr;
  values_.clear();
  aux_.clear();
}

const Tensor& Tape::value(NodeId id) const {
  if (!has_run()) throw StateError("no forward pass has been recorded");
  if (id >= values_.size()) {
    throw StructuralError("node " + std::to_string(id) + " does not exist");
  }
  return values_[id];
}

void Tape::check_fresh() const {
  if (!has_run()) throw StateError("backward called before forward");
  if (params_->version() != params_version_) {
    throw StateError(
        "activation cache is stale: parameters changed since forward");
  }
}

const Tensor& Tape::forward(const Graph& graph, const ParamStore& params,
                            std::span<const Tensor> inputs) {
  clear();
  params.validate(graph);
  if (inputs.size() != graph.inputs().size()) {
    throw StructuralError("graph has " + std::to_string(graph.inputs().size()) +
                          " input nodes, got " + std::to_string(inputs.size()) +
                          " tensors");
  }
  const auto& nodes = graph.nodes();
  if (nodes.empty()) throw StructuralError("graph has no nodes");
  values_.resize(nodes.size());
  aux_.resize(nodes.size());

  std::size_t next_input = 0;
  for (NodeId id = 0; id < nodes.size(); ++id) {
    const Node& node = nodes[id];
    Tensor out(node.shape);
    auto y = out.data();
    auto in = [&](std::size_t k) -> const Tensor& {
      return values_[node.inputs[k]];
    };

    switch (node.kind) {
      case OpKind::Input: {
        const Tensor& src = inputs[next_input++];
        if (src.shape() != node.shape) {
          throw StructuralError(node_label(id, node.kind) + ": expected shape " +
                                to_string(node.shape) + ", got " +
                                to_string(src.shape()));
        }
        out = src;
        break;
      }
      case OpKind::Identity:
      case OpKind::Flatten: {
        auto x = in(0).data();
        std::copy(x.begin(), x.end(), y.begin());
        break;
      }
      case OpKind::ScaleShift: {
        auto x = in(0).data();
        for (std::size_t i = 0; i < y.size(); ++i) {
          y[i] = x[i] * node.scale + node.shift;
        }
        break;
      }
      case OpKind::Conv3x3: {
        const ConvGeometry g = conv_geometry(node, in(0).shape());
        auto& col = aux_[id];
        col.assign(g.k() * g.p(), 0.0f);
        im2col(g, in(0).data().data(), col.data());
        const Tensor& w = params.param(node.params[0]);
        const Tensor& b = params.param(node.params[1]);
        const std::size_t K = g.k(), P = g.p();
        for (std::size_t co = 0; co < g.out_c; ++co) {
          float* dst = y.data() + co * P;
          std::fill(dst, dst + P, b[co]);
          const float* wrow = w.data().data() + co * K;
          for (std::size_t k = 0; k < K; ++k) {
            axpy(wrow[k], col.data() + k * P, dst, P);
          }
        }
        break;
      }
      case OpKind::Relu:
      case OpKind::MaxZero: {
        auto x = in(0).data();
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] > 0 ? x[i] : 0;
        break;
      }
      case OpKind::AvgPool2: {
        const Shape& s = in(0).shape();
        const std::size_t C = s[0], H = s[1], W = s[2];
        const std::size_t OH = node.shape[1], OW = node.shape[2];
        auto x = in(0).data();
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t oy = 0; oy < OH; ++oy) {
            const float* r0 = x.data() + (c * H + 2 * oy) * W;
            const float* r1 = r0 + W;
            float* dst = y.data() + (c * OH + oy) * OW;
            for (std::size_t ox = 0; ox < OW; ++ox) {
              dst[ox] = 0.25f * ((r0[2 * ox] + r0[2 * ox + 1]) +
                                 (r1[2 * ox] + r1[2 * ox + 1]));
            }
          }
        }
        break;
      }
      case OpKind::Dense: {
        const Tensor& w = params.param(node.params[0]);
        const Tensor& b = params.param(node.params[1]);
        const std::size_t n_in = in(0).size();
        const float* x = in(0).data().data();
        for (std::size_t o = 0; o < y.size(); ++o) {
          y[o] = b[o] + dot(w.data().data() + o * n_in, x, n_in);
        }
        break;
      }
      case OpKind::L2Normalize: {
        auto x = in(0).data();
        double ss = 0.0;
        for (float v : x) ss += static_cast<double>(v) * v;
        const double norm = std::sqrt(ss);
        if (!(norm >= 1e-12)) {
          throw NumericError(node_label(id, node.kind) +
                             ": input norm below 1e-12");
        }
        aux_[id] = {static_cast<float>(norm)};
        for (std::size_t i = 0; i < y.size(); ++i) {
          y[i] = static_cast<float>(x[i] / norm);
        }
        break;
      }
      case OpKind::Add: {
        auto a = in(0).data();
        auto b = in(1).data();
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
        break;
      }
      case OpKind::Subtract: {
        auto a = in(0).data();
        auto b = in(1).data();
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] - b[i];
        break;
      }
      case OpKind::Square: {
        auto x = in(0).data();
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * x[i];
        break;
      }
      case OpKind::Sum: {
        double s = 0.0;
        for (float v : in(0).data()) s += v;
        y[0] = static_cast<float>(s);
        break;
      }
      case OpKind::Sqrt: {
        auto x = in(0).data();
        for (std::size_t i = 0; i < y.size(); ++i) {
          if (x[i] < 0) {
            throw NumericError(node_label(id, node.kind) +
                               ": negative operand");
          }
          y[i] = std::sqrt(x[i]);
        }
        break;
      }
    }

    if (!out.all_finite()) {
      throw NumericError(node_label(id, node.kind) +
                         ": produced a non-finite value");
    }
    values_[id] = std::move(out);
  }

  graph_ = &graph;
  params_ = &params;
  params_version_ = params.version();
  return values_.back();
}

// ---------------------------------------------------------------------------
// Backward

GradientSet Tape::backward(NodeId loss, bool wrt_input) const {
  check_fresh();
  if (loss >= values_.size()) {
    throw StructuralError("loss node " + std::to_string(loss) +
                          " does not exist");
  }
  if (values_[loss].size() != 1) {
    throw StructuralError("loss node " + std::to_string(loss) +
                          " is not scalar: shape " +
                          to_string(values_[loss].shape()));
  }
  return backward_from(loss, Tensor(values_[loss].shape(), 1.0f),
                       {.wrt_input = wrt_input, .wrt_params = true});
}

GradientSet Tape::backward_from(NodeId from, const Tensor& seed,
                                BackwardOptions options) const {
  check_fresh();
  const auto& nodes = graph_->nodes();
  if (from >= nodes.size()) {
    throw StructuralError("node " + std::to_string(from) + " does not exist");
  }
  if (seed.shape() != values_[from].shape()) {
    throw StructuralError("seed shape " + to_string(seed.shape()) +
                          " does not match node " + std::to_string(from) +
                          " shape " + to_string(values_[from].shape()));
  }

  const NodeId primary_input =
      graph_->inputs().empty() ? nodes.size() : graph_->inputs().front();

  // A node needs a gradient when some requested target lies upstream of it.
  std::vector<char> needs(from + 1, 0);
  for (NodeId id = 0; id <= from; ++id) {
    const Node& n = nodes[id];
    if (n.kind == OpKind::Input) {
      needs[id] = options.wrt_input && id == primary_input;
      continue;
    }
    bool need = options.wrt_params && !n.params.empty();
    for (auto in : n.inputs) need = need || needs[in];
    needs[id] = need;
  }

  GradientSet result;
  if (options.wrt_params) {
    result.by_parameter.reserve(params_->size());
    for (const auto& p : params_->all()) result.by_parameter.emplace_back(p.shape());
  }

  std::vector<Tensor> grads(from + 1);
  grads[from] = seed;

  auto grad_for = [&](NodeId id) -> Tensor& {
    if (grads[id].empty()) grads[id] = Tensor(nodes[id].shape);
    return grads[id];
  };

  for (NodeId id = from + 1; id-- > 0;) {
    const Node& node = nodes[id];
    if (grads[id].empty() || node.kind == OpKind::Input) continue;
    const Tensor& gy = grads[id];
    auto dy = gy.data();
    auto x_of = [&](std::size_t k) { return values_[node.inputs[k]].data(); };
    const NodeId in0 = node.inputs.empty() ? 0 : node.inputs[0];

    switch (node.kind) {
      case OpKind::Input:
        break;
      case OpKind::Identity:
      case OpKind::Flatten:
        if (needs[in0]) add_into(grad_for(in0), Tensor(nodes[in0].shape, gy.values()));
        break;
      case OpKind::ScaleShift:
        if (needs[in0]) {
          auto dx = grad_for(in0).data();
          for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * node.scale;
        }
        break;
      case OpKind::Conv3x3: {
        const ConvGeometry g = conv_geometry(node, values_[in0].shape());
        const std::size_t K = g.k(), P = g.p();
        const auto& col = aux_[id];
        const Tensor& w = params_->param(node.params[0]);
        if (options.wrt_params) {
          auto dw = result.by_parameter[node.params[0]].data();
          auto db = result.by_parameter[node.params[1]].data();
          for (std::size_t co = 0; co < g.out_c; ++co) {
            const float* drow = dy.data() + co * P;
            double bsum = 0.0;
            for (std::size_t p = 0; p < P; ++p) bsum += drow[p];
            db[co] += static_cast<float>(bsum);
            for (std::size_t k = 0; k < K; ++k) {
              dw[co * K + k] += dot(drow, col.data() + k * P, P);
            }
          }
        }
        if (needs[in0]) {
          std::vector<float> dcol(K * P, 0.0f);
          for (std::size_t co = 0; co < g.out_c; ++co) {
            const float* drow = dy.data() + co * P;
            const float* wrow = w.data().data() + co * K;
            for (std::size_t k = 0; k < K; ++k) {
              axpy(wrow[k], drow, dcol.data() + k * P, P);
            }
          }
          col2im_add(g, dcol.data(), grad_for(in0).data().data());
        }
        break;
      }
      case OpKind::Relu:
      case OpKind::MaxZero:
        if (needs[in0]) {
          auto x = x_of(0);
          auto dx = grad_for(in0).data();
          for (std::size_t i = 0; i < dx.size(); ++i) {
            if (x[i] > 0) dx[i] += dy[i];
          }
        }
        break;
      case OpKind::AvgPool2:
        if (needs[in0]) {
          const Shape& s = nodes[in0].shape;
          const std::size_t C = s[0], H = s[1], W = s[2];
          const std::size_t OH = node.shape[1], OW = node.shape[2];
          auto dx = grad_for(in0).data();
          for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t oy = 0; oy < OH; ++oy) {
              float* r0 = dx.data() + (c * H + 2 * oy) * W;
              float* r1 = r0 + W;
              const float* src = dy.data() + (c * OH + oy) * OW;
              for (std::size_t ox = 0; ox < OW; ++ox) {
                const float v = 0.25f * src[ox];
                r0[2 * ox] += v;
                r0[2 * ox + 1] += v;
                r1[2 * ox] += v;
                r1[2 * ox + 1] += v;
              }
            }
          }
        }
        break;
      case OpKind::Dense: {
        const Tensor& w = params_->param(node.params[0]);
        auto x = x_of(0);
        const std::size_t n_in = x.size();
        if (options.wrt_params) {
          auto dw = result.by_parameter[node.params[0]].data();
          auto db = result.by_parameter[node.params[1]].data();
          for (std::size_t o = 0; o < dy.size(); ++o) {
            db[o] += dy[o];
            axpy(dy[o], x.data(), dw.data() + o * n_in, n_in);
          }
        }
        if (needs[in0]) {
          auto dx = grad_for(in0).data();
          for (std::size_t o = 0; o < dy.size(); ++o) {
            axpy(dy[o], w.data().data() + o * n_in, dx.data(), n_in);
          }
        }
        break;
      }
      case OpKind::L2Normalize:
        if (needs[in0]) {
          // d(x/|x|) = (dy - y (y.dy)) / |x|
          auto y = values_[id].data();
          const double norm = aux_[id][0];
          double ydy = 0.0;
          for (std::size_t i = 0; i < y.size(); ++i) ydy += double(y[i]) * dy[i];
          auto dx = grad_for(in0).data();
          for (std::size_t i = 0; i < dx.size(); ++i) {
            dx[i] += static_cast<float>((dy[i] - y[i] * ydy) / norm);
          }
        }
        break;
      case OpKind::Add:
      case OpKind::Subtract: {
        const float sign_b = node.kind == OpKind::Add ? 1.0f : -1.0f;
        if (needs[node.inputs[0]]) {
          auto da = grad_for(node.inputs[0]).data();
          for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i];
        }
        if (needs[node.inputs[1]]) {
          auto db = grad_for(node.inputs[1]).data();
          for (std::size_t i = 0; i < db.size(); ++i) db[i] += sign_b * dy[i];
        }
        break;
      }
      case OpKind::Square:
        if (needs[in0]) {
          auto x = x_of(0);
          auto dx = grad_for(in0).data();
          for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += 2.0f * x[i] * dy[i];
        }
        break;
      case OpKind::Sum:
        if (needs[in0]) {
          auto dx = grad_for(in0).data();
          for (auto& v : dx) v += dy[0];
        }
        break;
      case OpKind::Sqrt:
        if (needs[in0]) {
          // At exactly zero the minimal-norm subgradient (0) is used.
          auto y = values_[id].data();
          auto dx = grad_for(in0).data();
          for (std::size_t i = 0; i < dx.size(); ++i) {
            if (y[i] > 0) dx[i] += 0.5f * dy[i] / y[i];
          }
        }
        break;
    }

    for (auto in : node.inputs) {
      if (!grads[in].empty() && !grads[in].all_finite()) {
        throw NumericError(node_label(id, node.kind) +
                           ": backward produced a non-finite gradient");
      }
    }
  }

  if (options.wrt_input && primary_input <= from) {
    result.by_input = grads[primary_input].empty()
                          ? Tensor(nodes[primary_input].shape)
                          : std::move(grads[primary_input]);
  } else if (options.wrt_input && primary_input < nodes.size()) {
    result.by_input = Tensor(nodes[primary_input].shape);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Gradient check

bool GradientCheckReport::pass() const {
  return std::all_of(groups.begin(), groups.end(),
                     [](const GroupCheck& g) { return g.pass; });
}

const GroupCheck* GradientCheckReport::first_failure() const {
  for (const auto& g : groups) {
    if (!g.pass) return &g;
  }
  return nullptr;
}

GradientSet autodiff_gradient(const Graph& graph, const ParamStore& params,
                              std::span<const Tensor> inputs) {
  Tape tape;
  tape.forward(graph, params, inputs);
  return tape.backward(graph.output(), true);
}

namespace {

double scalar_output(const Graph& graph, const ParamStore& params,
                     std::span<const Tensor> inputs) {
  Tape tape;
  const Tensor& out = tape.forward(graph, params, inputs);
  if (out.size() != 1) {
    throw StructuralError("gradient check needs a scalar final node, got " +
                          to_string(out.shape()));
  }
  return out[0];
}

std::vector<std::size_t> pick_components(std::size_t n, std::size_t max,
                                         Rng& rng) {
  if (max == 0 || max >= n) {
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    return all;
  }
  auto picked = rng.sample_without_replacement(n, max);
  std::sort(picked.begin(), picked.end());
  return picked;
}

// Central differences over the full step and over half of it. On smooth
// functions they agree to O(h^2); a kink inside the step separates them.
struct Probe {
  double full, half;
  bool smooth(const GradientCheckOptions& opt) const {
    const double gap = std::fabs(full - half);
    return gap <= opt.abs_tolerance ||
           gap <= opt.rel_tolerance * std::max(std::fabs(full), std::fabs(half));
  }
};

// Evaluates the scalar output with `slot` set to x + h and x - h for the
// full and half step; `slot` is restored afterwards.
template <typename Eval>
Probe probe_component(float& slot, float step, Eval&& eval) {
  const float original = slot;
  const auto central = [&](float h) {
    const float up = original + h, down = original - h;
    slot = up;
    const double f_up = eval();
    slot = down;
    const double f_down = eval();
    slot = original;
    return (f_up - f_down) / (double(up) - double(down));
  };
  return {central(step), central(step / 2)};
}

void record(GroupCheck& g, std::size_t index, double analytic, const Probe& probe,
            const GradientCheckOptions& opt) {
  if (opt.skip_nonsmooth && !probe.smooth(opt)) {
    ++g.nonsmooth;
    return;
  }
  const double numeric = probe.full;
  const double abs_err = std::fabs(analytic - numeric);
  const double scale = std::max(std::fabs(analytic), std::fabs(numeric));
  const double rel_err =
      abs_err <= opt.abs_tolerance || scale == 0.0 ? 0.0 : abs_err / scale;
  ++g.checked;
  g.max_abs_error = std::max(g.max_abs_error, abs_err);
  if (g.checked == 1 || rel_err > g.max_rel_error) {
    g.max_rel_error = rel_err;
    g.worst_index = index;
    g.analytic_at_worst = analytic;
    g.numeric_at_worst = numeric;
  }
  if (rel_err > opt.rel_tolerance) g.pass = false;
}

}  // namespace

GradientCheckReport check_gradient(const Graph& graph,
                                   std::span<const Tensor> inputs,
                                   const ParamStore& params,
                                   const GradientCheckOptions& options,
                                   const AnalyticGradientFn& analytic) {
  if (!(options.step > 0)) throw ArgumentError("gradient check step must be > 0");
  const GradientSet grads = analytic(graph, params, inputs);
  Rng rng(options.seed);
  GradientCheckReport report;

  ParamStore probe = params;
  for (ParamId pid = 0; pid < params.size(); ++pid) {
    GroupCheck g;
    g.group = graph.params()[pid].name;
    const auto picks =
        pick_components(params.param(pid).size(), options.max_samples_per_group, rng);
    for (auto i : picks) {
      const Probe pr = probe_component(probe.mutable_param(pid)[i], options.step,
                                       [&] { return scalar_output(graph, probe, inputs); });
      const double a = grads.by_parameter.empty()
                           ? 0.0
                           : double(grads.by_parameter[pid][i]);
      record(g, i, a, pr, options);
    }
    report.groups.push_back(std::move(g));
  }

  if (options.include_input && !inputs.empty()) {
    GroupCheck g;
    g.group = "input";
    std::vector<Tensor> probe_inputs(inputs.begin(), inputs.end());
    Tensor& x = probe_inputs.front();
    const auto picks =
        pick_components(x.size(), options.max_samples_per_group, rng);
    for (auto i : picks) {
      const Probe pr = probe_component(x[i], options.step,
                                       [&] { return scalar_output(graph, probe, probe_inputs); });
      const double a = grads.by_input ? double((*grads.by_input)[i]) : 0.0;
      record(g, i, a, pr, options);
    }
    report.groups.push_back(std::move(g));
  }
  return report;
}

}  // namespace facecloak
