#include <doctest.h>

#include <cmath>

#include "facecloak/autodiff.hpp"
#include "facecloak/error.hpp"
#include "oracles/reference_net.hpp"
#include "support.hpp"

using namespace facecloak;

namespace {

Tensor forward_once(const Graph& g, const ParamStore& p, const Tensor& x) {
  Tape tape;
  return tape.forward(g, p, x);
}

GradientCheckOptions tight() {
  GradientCheckOptions o;
  o.step = 1e-3f;
  o.rel_tolerance = 1e-2;
  o.abs_tolerance = 1e-4;
  return o;
}

}  // namespace

TEST_CASE("tensor keeps shape and data consistent") {
  Tensor t({2, 3}, 1.5f);
  CHECK(t.size() == 6);
  CHECK(t.all_finite());
  CHECK(t.max_abs() == 1.5f);
  t[4] = -4.0f;
  CHECK(t.max_abs() == 4.0f);
  t[0] = std::nanf("");
  CHECK_FALSE(t.all_finite());
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<float>(3)), StructuralError);
  CHECK(element_count({4, 5, 6}) == 120);
}

TEST_CASE("identity graph passes input through") {
  Graph g;
  const auto x = g.input({3});
  g.identity(x);
  ParamStore p(g);
  const Tensor in({3}, std::vector<float>{1, 2, 3});
  CHECK(forward_once(g, p, in) == in);
}

TEST_CASE("dense layer with zero weights outputs zeros") {
  Graph g;
  g.dense(g.input({7}), 4);
  ParamStore p(g);
  const Tensor out = forward_once(g, p, testing::random_tensor({7}, 3));
  CHECK(out.shape() == Shape{4});
  for (float v : out.values()) CHECK(v == 0.0f);
}

TEST_CASE("two-layer network matches the scalar-loop oracle") {
  Graph g;
  auto h = g.conv3x3(g.input({2, 6, 6}), 3, 1);
  h = g.relu(h);
  h = g.flatten(h);
  g.dense(h, 5);
  ParamStore p(g);
  testing::randomize(p, 0);
  const Tensor x = testing::random_tensor({2, 6, 6}, 0);
  const Tensor out = forward_once(g, p, x);
  const auto ref = oracle::forward(g, p, std::vector<double>(x.values().begin(), x.values().end()));
  REQUIRE(ref.v.size() == out.size());
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(std::fabs(out[i] - ref.v[i]) <= 1e-5);
}

TEST_CASE("full embedder forward matches the oracle") {
  const EmbedderModel m = init_embedder(4);
  const Image img = synthesize_face(0, 1, 2);
  const Tensor out = forward_once(m.graph, m.params, img.to_tensor());
  const auto ref = oracle::forward(
      m.graph, m.params, std::vector<double>(img.pixels().begin(), img.pixels().end()));
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(std::fabs(out[i] - ref.v[i]) <= 1e-5);
}

TEST_CASE("forward validates shapes and finiteness") {
  Graph g;
  g.sum(g.input({4}));
  ParamStore p(g);
  Tape tape;
  CHECK_THROWS_AS(tape.forward(g, p, Tensor({5})), StructuralError);
  Tensor bad({4}, 1.0f);
  bad[2] = std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(tape.forward(g, p, bad), NumericError);

  Graph n;
  n.l2_normalize(n.input({3}));
  ParamStore np(n);
  CHECK_THROWS_AS(tape.forward(n, np, Tensor({3})), NumericError);
}

TEST_CASE("graph construction rejects malformed nodes") {
  Graph g;
  const auto x = g.input({4});
  CHECK_THROWS_AS(g.conv3x3(x, 2, 1), StructuralError);
  CHECK_THROWS_AS(g.relu(17), StructuralError);
  const auto img = g.input({1, 4, 4});
  CHECK_THROWS_AS(g.conv3x3(img, 2, 3), StructuralError);
  CHECK_THROWS_AS(g.dense(img, 3), StructuralError);
  CHECK_THROWS_AS(g.subtract(x, g.flatten(img)), StructuralError);
}

TEST_CASE("sum loss gives an all-ones input gradient") {
  Graph g;
  const auto loss = g.sum(g.input({4}));
  ParamStore p(g);
  Tape tape;
  tape.forward(g, p, testing::random_tensor({4}, 9));
  const auto grads = tape.backward(loss, true);
  REQUIRE(grads.by_input);
  for (float v : grads.by_input->values()) CHECK(v == 1.0f);
}

TEST_CASE("constant loss gives zero gradients") {
  Graph g;
  const auto x = g.input({5});
  const auto loss = g.sum(g.subtract(x, x));
  ParamStore p(g);
  Tape tape;
  tape.forward(g, p, testing::random_tensor({5}, 2));
  const auto grads = tape.backward(loss, true);
  for (float v : grads.by_input->values()) CHECK(v == 0.0f);
}

TEST_CASE("backward lifecycle errors") {
  Graph g;
  const auto h = g.dense(g.input({3}), 2);
  const auto loss = g.sum(h);
  ParamStore p(g);
  Tape tape;
  CHECK_THROWS_AS(tape.backward(loss, true), StateError);
  tape.forward(g, p, testing::random_tensor({3}, 1));
  CHECK_THROWS_AS(tape.backward(h, true), StructuralError);
  CHECK_NOTHROW(tape.backward(loss, true));
  p.mutable_param(0)[0] = 2.0f;
  CHECK_THROWS_AS(tape.backward(loss, true), StateError);
}

TEST_CASE("random two-conv network passes central finite differences") {
  Graph g;
  auto h = g.conv3x3(g.input({2, 5, 5}), 3, 1);
  h = g.relu(h);
  h = g.conv3x3(h, 2, 2);
  h = g.flatten(h);
  g.sum(g.square(h));
  ParamStore p(g);
  testing::randomize(p, 7, 0.1);
  const Tensor x = testing::random_tensor({2, 5, 5}, 7, 0.5);
  const auto report = check_gradient(g, std::span<const Tensor>(&x, 1), p, tight());
  REQUIRE(report.groups.size() == 5);
  for (const auto& grp : report.groups) {
    INFO(grp.group << " rel " << grp.max_rel_error << " abs " << grp.max_abs_error);
    CHECK(grp.pass);
    CHECK(grp.checked > 0);
  }
}

TEST_CASE("every op kind passes the gradient check on small tensors") {
  struct Case {
    const char* name;
    Graph graph;
    Shape shape;
    bool second_input;
  };
  std::vector<Case> cases;
  {
    Graph g;
    g.sum(g.square(g.scale_shift(g.input({2, 3, 3}), 0.5f, -0.25f)));
    cases.push_back({"scale_shift", g, {2, 3, 3}, false});
  }
  for (int stride : {1, 2}) {
    Graph g;
    g.sum(g.square(g.flatten(g.conv3x3(g.input({2, 5, 5}), 2, stride))));
    cases.push_back({"conv3x3", g, {2, 5, 5}, false});
  }
  {
    Graph g;
    g.sum(g.square(g.flatten(g.relu(g.input({2, 3, 3})))));
    cases.push_back({"relu", g, {2, 3, 3}, false});
  }
  {
    Graph g;
    g.sum(g.square(g.flatten(g.avg_pool2(g.input({2, 4, 4})))));
    cases.push_back({"avg_pool2", g, {2, 4, 4}, false});
  }
  {
    Graph g;
    g.sum(g.square(g.dense(g.input({8}), 4)));
    cases.push_back({"dense", g, {8}, false});
  }
  {
    Graph g;
    const auto x = g.input({6});
    const auto y = g.input({6});
    g.sum(g.square(g.subtract(g.l2_normalize(x), y)));
    cases.push_back({"l2_normalize", g, {6}, true});
  }
  {
    Graph g;
    const auto x = g.input({6});
    const auto y = g.input({6});
    g.sum(g.square(g.add(x, y)));
    cases.push_back({"add", g, {6}, true});
  }
  {
    Graph g;
    g.sqrt(g.sum(g.square(g.input({6}))));
    cases.push_back({"sqrt", g, {6}, false});
  }
  {
    Graph g;
    const auto x = g.input({6});
    const auto y = g.input({6});
    g.sum(g.max_zero(g.subtract(x, y)));
    cases.push_back({"max_zero", g, {6}, true});
  }
  for (const auto& c : cases) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      ParamStore p(c.graph);
      testing::randomize(p, seed, 0.1);
      std::vector<Tensor> in = {testing::random_tensor(c.shape, seed, 0.5)};
      if (c.second_input) in.push_back(testing::random_tensor(c.shape, seed + 100, 0.5));
      auto options = tight();
      options.step = 1e-2f;
      const auto report = check_gradient(c.graph, in, p, options);
      INFO(std::string(c.name) << " seed " << seed);
      if (const auto* f = report.first_failure()) {
        FAIL_CHECK(f->group << " rel " << f->max_rel_error << " abs " << f->max_abs_error);
      }
    }
  }
}

TEST_CASE("dense-only network passes the gradient check") {
  Graph g;
  auto h = g.dense(g.input({6}), 4);
  h = g.relu(h);
  h = g.dense(h, 3);
  g.sum(g.square(h));
  ParamStore p(g);
  testing::randomize(p, 12, 0.1);
  const Tensor x = testing::random_tensor({6}, 12, 0.5);
  CHECK(check_gradient(g, std::span<const Tensor>(&x, 1), p, tight()).pass());
}

TEST_CASE("a kink inside the step is reported as non-smooth, not judged") {
  Graph g;
  g.sum(g.relu(g.input({2})));
  ParamStore p(g);
  const Tensor x({2}, std::vector<float>{0.0002f, 1.0f});
  const auto report = check_gradient(g, std::span<const Tensor>(&x, 1), p, tight());
  REQUIRE(report.groups.size() == 1);
  CHECK(report.groups[0].nonsmooth == 1);
  CHECK(report.pass());
  GradientCheckOptions strict = tight();
  strict.skip_nonsmooth = false;
  CHECK_FALSE(check_gradient(g, std::span<const Tensor>(&x, 1), p, strict).pass());
}

TEST_CASE("a corrupted backward rule is caught and located") {
  Graph g;
  auto h = g.dense(g.input({4}), 3);
  g.sum(g.square(h));
  ParamStore p(g);
  testing::randomize(p, 5, 0.1);
  const Tensor x = testing::random_tensor({4}, 5, 0.5);
  const AnalyticGradientFn corrupted = [](const Graph& gr, const ParamStore& ps,
                                          std::span<const Tensor> in) {
    GradientSet gs = autodiff_gradient(gr, ps, in);
    for (std::size_t i = 0; i < gs.by_parameter[1].size(); ++i) gs.by_parameter[1][i] *= 1.5f;
    return gs;
  };
  const auto report = check_gradient(g, std::span<const Tensor>(&x, 1), p, tight(), corrupted);
  CHECK_FALSE(report.pass());
  REQUIRE(report.first_failure() != nullptr);
  CHECK(report.first_failure()->group == g.params()[1].name);
}

TEST_CASE("zero-parameter graph gives an empty passing report") {
  Graph g;
  g.sum(g.input({3}));
  ParamStore p(g);
  const Tensor x({3}, 1.0f);
  GradientCheckOptions o = tight();
  o.include_input = false;
  const auto report = check_gradient(g, std::span<const Tensor>(&x, 1), p, o);
  CHECK(report.groups.empty());
  CHECK(report.pass());
  o.step = 0.0f;
  CHECK_THROWS_AS(check_gradient(g, std::span<const Tensor>(&x, 1), p, o), ArgumentError);
}

TEST_CASE("forward and backward are bit-identical across runs") {
  const EmbedderModel m = init_embedder(3);
  const Tensor x = synthesize_face(1, 0, 0).to_tensor();
  Tape a, b;
  const Tensor ya = a.forward(m.graph, m.params, x);
  const Tensor yb = b.forward(m.graph, m.params, x);
  CHECK(ya == yb);
  const Tensor seed = testing::random_tensor({kEmbeddingDim}, 8);
  const auto ga = a.backward_from(m.output_node(), seed, {true, true});
  const auto gb = b.backward_from(m.output_node(), seed, {true, true});
  CHECK(*ga.by_input == *gb.by_input);
  CHECK(ga.by_parameter == gb.by_parameter);
}
