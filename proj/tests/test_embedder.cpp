#include <doctest.h>

#include <cmath>

#include "facecloak/embedder.hpp"
#include "facecloak/error.hpp"
#include "facecloak/metrics.hpp"
#include "support.hpp"

using namespace facecloak;

TEST_CASE("embeddings are unit-norm and deterministic") {
  const auto& f = testing::small_fixture();
  for (std::size_t i = 0; i < f.corpus.size(); i += 5) {
    const auto e = embed(f.model, f.corpus.images[i]);
    CHECK(e.size() == kEmbeddingDim);
    CHECK(std::fabs(e.norm() - 1.0) < 1e-4);
    CHECK(embed(f.model, f.corpus.images[i]) == e);
  }
  const auto fresh = init_embedder(3);
  CHECK(std::fabs(embed(fresh, Image(96, 96, 128.0f)).norm() - 1.0) < 1e-4);
}

TEST_CASE("embed rejects images of the wrong shape") {
  const auto model = init_embedder(0);
  CHECK_THROWS_AS(embed(model, Image(64, 64)), StructuralError);
}

TEST_CASE("embed_all matches embed for any job count") {
  const auto& f = testing::small_fixture();
  const auto serial = embed_all(f.model, f.corpus.images, 1);
  const auto parallel = embed_all(f.model, f.corpus.images, 3);
  REQUIRE(serial.size() == f.corpus.size());
  CHECK(serial == parallel);
  CHECK(serial[7] == embed(f.model, f.corpus.images[7]));
}

TEST_CASE("trained model keeps identities apart") {
  const auto& f = testing::small_fixture();
  const auto emb = embed_all(f.model, f.corpus.images);
  double intra = 0.0, inter = 0.0;
  std::size_t n_intra = 0, n_inter = 0;
  for (std::size_t i = 0; i < emb.size(); ++i) {
    for (std::size_t j = i + 1; j < emb.size(); ++j) {
      const double d = embedding_distance(emb[i], emb[j]);
      if (f.corpus.labels[i] == f.corpus.labels[j]) {
        intra += d;
        ++n_intra;
      } else {
        inter += d;
        ++n_inter;
      }
    }
  }
  CHECK(inter / n_inter > intra / n_intra);
}

TEST_CASE("corpora from different seeds land apart in embedding space") {
  const auto& f = testing::small_fixture();
  const auto other = synthesize_corpus(2, 6, 1);
  const auto a = embed_all(f.model, subset(f.corpus, f.corpus.indices_of(0)).images);
  const auto b = embed_all(f.model, subset(other, other.indices_of(0)).images);
  double intra = 0.0, inter = 0.0;
  std::size_t n_intra = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = i + 1; j < a.size(); ++j, ++n_intra) intra += embedding_distance(a[i], a[j]);
    for (const auto& y : b) inter += embedding_distance(a[i], y);
  }
  CHECK(inter / (a.size() * b.size()) > intra / n_intra);
}

TEST_CASE("one epoch on a tiny corpus does not raise the loss") {
  const auto c = synthesize_corpus(2, 2, 4);
  TrainOptions o;
  o.epochs = 1;
  o.seed = 2;
  o.learning_rate = 0.01;
  const auto m = train(c.images, c.labels, o);
  CHECK(m.metadata.epochs == 1);
  CHECK(m.metadata.final_loss <= m.metadata.initial_loss);
  CHECK(m.params.all_finite());
}

TEST_CASE("training is bit-identical for a fixed seed and any job count") {
  const auto c = synthesize_corpus(3, 4, 5);
  TrainOptions o;
  o.epochs = 2;
  o.seed = 9;
  const auto a = train(c.images, c.labels, o);
  o.jobs = 2;
  const auto b = train(c.images, c.labels, o);
  CHECK(a == b);
  CHECK(serialize_model(a) == serialize_model(b));
  o.seed = 10;
  CHECK_FALSE(train(c.images, c.labels, o).params == a.params);
}

TEST_CASE("training preconditions") {
  const auto c = synthesize_corpus(2, 3, 0);
  std::vector<Label> one_id(c.size(), 0);
  CHECK_THROWS_AS(train(c.images, one_id, {}), ConfigError);
  TrainOptions o;
  o.margin = 0.0;
  CHECK_THROWS_AS(train(c.images, c.labels, o), ConfigError);
  std::vector<Label> short_labels(c.labels.begin(), c.labels.end() - 1);
  CHECK_THROWS_AS(train(c.images, short_labels, {}), StructuralError);
}

TEST_CASE("epoch callback reports every epoch with finite loss") {
  const auto c = synthesize_corpus(3, 3, 1);
  TrainOptions o;
  o.epochs = 3;
  std::vector<EpochStats> seen;
  o.on_epoch = [&](const EpochStats& s) { seen.push_back(s); };
  train(c.images, c.labels, o);
  REQUIRE(seen.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(seen[i].epoch == i + 1);
    CHECK(std::isfinite(seen[i].mean_loss));
    CHECK(seen[i].active_fraction >= 0.0);
    CHECK(seen[i].active_fraction <= 1.0);
  }
}

TEST_CASE("satisfied triplets contribute zero loss") {
  const auto a = testing::random_unit(1);
  auto far = a;
  for (std::size_t i = 0; i < far.size(); ++i) far[i] = -a[i];
  const std::vector<EmbeddingVector> emb = {a, a, far, far};
  const std::vector<Label> labels = {0, 0, 1, 1};
  CHECK(evaluate_triplet_loss(emb, labels, 0.2) == doctest::Approx(0.0));
  const std::vector<EmbeddingVector> mixed = {a, far, a, far};
  CHECK(evaluate_triplet_loss(mixed, labels, 0.2) == doctest::Approx(2.2).epsilon(1e-5));
}

TEST_CASE("model file round-trips bit-exactly") {
  const auto& f = testing::small_fixture();
  testing::TempDir dir("embedder_roundtrip");
  const auto path = dir.path() / "m.cfw";
  save_model(f.model, path);
  const auto loaded = load_model(path);
  CHECK(loaded == f.model);
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK(embed(loaded, f.corpus.images[i]) == embed(f.model, f.corpus.images[i]));
  }
  const auto bytes = serialize_model(f.model);
  REQUIRE(bytes.size() > 4);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "CFW1");
  CHECK(serialize_model(loaded) == bytes);
  CHECK(loaded.describe().size() == f.model.describe().size());
}

TEST_CASE("damaged model files are rejected with offsets") {
  const auto bytes = serialize_model(init_embedder(1));

  auto truncated = bytes;
  truncated.resize(bytes.size() / 2);
  CHECK_THROWS_AS(deserialize_model(truncated), FormatError);

  auto flipped = bytes;
  flipped[4] ^= 0x01;
  try {
    deserialize_model(flipped);
    FAIL("expected a version error");
  } catch (const VersionError& e) {
    CHECK(e.expected() == kModelFormatVersion);
    CHECK(e.actual() == (kModelFormatVersion ^ 1u));
    CHECK(e.offset() == 4);
  }

  auto magic = bytes;
  magic[0] = 'X';
  try {
    deserialize_model(magic);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 0);
  }

  auto payload = bytes;
  payload[bytes.size() - 20] ^= 0x40;
  CHECK_THROWS_AS(deserialize_model(payload), FormatError);

  auto trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(deserialize_model(trailing), FormatError);
}

TEST_CASE("missing or unwritable model paths are configuration errors") {
  CHECK_THROWS_AS(load_model("/nonexistent/dir/m.cfw"), ConfigError);
  CHECK_THROWS_AS(save_model(init_embedder(0), "/nonexistent/dir/m.cfw"), ConfigError);
}

TEST_CASE("architecture descriptor lists the fixed layer stack") {
  const auto d = init_embedder(0).describe();
  REQUIRE(d.size() == 12);
  CHECK(d.front().kind == OpKind::Input);
  CHECK(d[1].kind == OpKind::ScaleShift);
  CHECK(d[2].kind == OpKind::Conv3x3);
  CHECK(d.back().kind == OpKind::L2Normalize);
  const auto model = init_embedder(0);
  CHECK(model.graph.node(model.input_node()).shape == Shape{3, 96, 96});
  CHECK(model.graph.node(model.output_node()).shape == Shape{128});
}
