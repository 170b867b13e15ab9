#pragma once

// Minimal reverse-mode differentiation over a closed vocabulary of layer
// operations. A Graph describes the computation, a ParamStore holds the
// trainable tensors, and a Tape owns the activation cache of one
// forward/backward pair. Graphs and parameter stores may be shared read-only
// between threads; every concurrent evaluation needs its own Tape.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "facecloak/tensor.hpp"

namespace facecloak {

using NodeId = std::size_t;
using ParamId = std::size_t;

enum class OpKind : std::uint8_t {
  Input = 0,
  Identity = 1,
  ScaleShift = 2,   // y = x * scale + shift, constants fixed at build time
  Conv3x3 = 3,      // zero padding 1, stride 1 or 2
  Relu = 4,
  AvgPool2 = 5,     // 2x2 window, stride 2
  Dense = 6,
  Flatten = 7,
  L2Normalize = 8,
  Add = 9,
  Subtract = 10,
  Square = 11,
  Sum = 12,         // reduces to shape [1]
  Sqrt = 13,
  MaxZero = 14,
};

std::string_view op_name(OpKind kind);

struct Node {
  OpKind kind = OpKind::Input;
  std::vector<NodeId> inputs;
  std::vector<ParamId> params;
  Shape shape;
  int stride = 1;
  float scale = 1.0f;
  float shift = 0.0f;
};

struct ParamSpec {
  std::string name;
  Shape shape;
};

// Append-only operation list; every node's inputs precede it, so node order
// is a valid topological order.
class Graph {
 public:
  NodeId input(Shape shape);
  NodeId identity(NodeId x);
  NodeId scale_shift(NodeId x, float scale, float shift);
  NodeId conv3x3(NodeId x, std::size_t out_channels, int stride);
  NodeId relu(NodeId x);
  NodeId avg_pool2(NodeId x);
  NodeId dense(NodeId x, std::size_t out_features);
  NodeId flatten(NodeId x);
  NodeId l2_normalize(NodeId x);
  NodeId add(NodeId a, NodeId b);
  NodeId subtract(NodeId a, NodeId b);
  NodeId square(NodeId x);
  NodeId sum(NodeId x);
  NodeId sqrt(NodeId x);
  NodeId max_zero(NodeId x);

  const std::vector<Node>& nodes() const noexcept { return nodes_; }
  const Node& node(NodeId id) const;
  const std::vector<ParamSpec>& params() const noexcept { return params_; }
  const std::vector<NodeId>& inputs() const noexcept { return inputs_; }
  NodeId output() const;
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  NodeId push(Node node);
  ParamId add_param(std::string name, Shape shape);
  void require_node(NodeId id) const;

  std::vector<Node> nodes_;
  std::vector<ParamSpec> params_;
  std::vector<NodeId> inputs_;
};

// Values for a graph's parameters. Every mutable access bumps the version so
// that activation caches computed against older values are detected as stale.
class ParamStore {
 public:
  ParamStore() = default;
  explicit ParamStore(const Graph& graph);

  std::size_t size() const noexcept { return values_.size(); }
  const Tensor& param(ParamId id) const;
  Tensor& mutable_param(ParamId id);
  const std::vector<Tensor>& all() const noexcept { return values_; }
  std::uint64_t version() const noexcept { return version_; }
  void touch() noexcept { ++version_; }

  // Shapes and parameter count agree with the graph declaration.
  void validate(const Graph& graph) const;
  bool all_finite() const;

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    return a.values_ == b.values_;
  }

 private:
  std::vector<Tensor> values_;
  std::uint64_t version_ = 0;
};

struct GradientSet {
  // Indexed by ParamId; empty when parameter gradients were not requested.
  std::vector<Tensor> by_parameter;
  // Gradient with respect to the graph's first input node.
  std::optional<Tensor> by_input;
};

struct BackwardOptions {
  bool wrt_input = true;
  bool wrt_params = true;
};

class Tape {
 public:
  // Runs every node in order, caching activations. `inputs` supplies one
  // tensor per Input node in declaration order.
  const Tensor& forward(const Graph& graph, const ParamStore& params,
                        std::span<const Tensor> inputs);
  const Tensor& forward(const Graph& graph, const ParamStore& params,
                        const Tensor& input) {
    return forward(graph, params, std::span<const Tensor>(&input, 1));
  }

  bool has_run() const noexcept { return graph_ != nullptr; }
  const Tensor& value(NodeId id) const;

  // Gradient of a scalar node.
  GradientSet backward(NodeId loss, bool wrt_input) const;
  // Vector-Jacobian product: propagates `seed` (shaped like node `from`)
  // back to the requested targets.
  GradientSet backward_from(NodeId from, const Tensor& seed,
                            BackwardOptions options) const;

  void clear();

 private:
  void check_fresh() const;

  const Graph* graph_ = nullptr;
  const ParamStore* params_ = nullptr;
  std::uint64_t params_version_ = 0;
  std::vector<Tensor> values_;
  // Per-node auxiliary buffers: im2col matrices for convolutions, the input
  // norm for L2 normalization.
  std::vector<std::vector<float>> aux_;
};

// Finite-difference validation of analytic gradients.

struct GradientCheckOptions {
  float step = 1e-3f;
  double rel_tolerance = 1e-2;
  double abs_tolerance = 1e-4;
  // 0 checks every component; otherwise a seeded sample per group.
  std::size_t max_samples_per_group = 0;
  std::uint64_t seed = 0;
  bool include_input = true;
  // Components whose forward and backward one-sided differences disagree
  // beyond the tolerances straddle a kink (ReLU, hinge) within the step; they
  // are counted in `nonsmooth` and not judged.
  bool skip_nonsmooth = true;
};

struct GroupCheck {
  std::string group;  // parameter name, or "input"
  std::size_t checked = 0;
  std::size_t nonsmooth = 0;
  std::size_t worst_index = 0;
  double max_rel_error = 0.0;  // over components outside the absolute floor
  double max_abs_error = 0.0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  bool pass = true;
};

struct GradientCheckReport {
  std::vector<GroupCheck> groups;
  bool pass() const;
  const GroupCheck* first_failure() const;
};

using AnalyticGradientFn = std::function<GradientSet(
    const Graph&, const ParamStore&, std::span<const Tensor>)>;

// Gradients of the graph's final (scalar) node from the tape.
GradientSet autodiff_gradient(const Graph& graph, const ParamStore& params,
                              std::span<const Tensor> inputs);

GradientCheckReport check_gradient(const Graph& graph,
                                   std::span<const Tensor> inputs,
                                   const ParamStore& params,
                                   const GradientCheckOptions& options,
                                   const AnalyticGradientFn& analytic =
                                       autodiff_gradient);

}  // namespace facecloak
