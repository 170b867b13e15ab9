#include "facecloak/embedder.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <string>

#include "facecloak/error.hpp"
#include "facecloak/hash.hpp"
#include "facecloak/parallel.hpp"
#include "facecloak/random.hpp"

namespace facecloak {

Graph build_embedder_graph() {
  Graph g;
  NodeId x = g.input({3, kImageSide, kImageSide});
  x = g.scale_shift(x, 1.0f / 127.5f, -1.0f);
  x = g.relu(g.conv3x3(x, 16, 2));
  x = g.relu(g.conv3x3(x, 32, 2));
  x = g.avg_pool2(x);
  x = g.relu(g.conv3x3(x, 64, 2));
  x = g.flatten(x);
  x = g.dense(x, kEmbeddingDim);
  g.l2_normalize(x);
  return g;
}

EmbedderModel init_embedder(std::uint64_t seed) {
  EmbedderModel m;
  m.graph = build_embedder_graph();
  m.params = ParamStore(m.graph);
  Rng rng(derive_seed(seed, 0xE1));
  for (ParamId id = 0; id < m.graph.params().size(); ++id) {
    const ParamSpec& spec = m.graph.params()[id];
    if (spec.shape.size() < 2) continue;  // biases stay zero
    std::size_t fan_in = 1;
    for (std::size_t d = 1; d < spec.shape.size(); ++d) fan_in *= spec.shape[d];
    // He scaling for rectified layers; the last dense layer feeds the
    // normalization, not a rectifier.
    const bool rectified = spec.shape.size() == 4;
    const double sd = std::sqrt((rectified ? 2.0 : 1.0) / fan_in);
    Tensor& w = m.params.mutable_param(id);
    for (float& v : w.data()) v = static_cast<float>(rng.normal(0.0, sd));
  }
  m.metadata.seed = seed;
  return m;
}

std::vector<LayerDescriptor> EmbedderModel::describe() const {
  std::vector<LayerDescriptor> out;
  for (const Node& n : graph.nodes()) {
    LayerDescriptor d;
    d.kind = n.kind;
    d.ints.push_back(static_cast<std::uint32_t>(n.shape.size()));
    for (auto s : n.shape) d.ints.push_back(static_cast<std::uint32_t>(s));
    if (n.kind == OpKind::Conv3x3) d.ints.push_back(static_cast<std::uint32_t>(n.stride));
    if (n.kind == OpKind::ScaleShift) {
      d.ints.push_back(std::bit_cast<std::uint32_t>(n.scale));
      d.ints.push_back(std::bit_cast<std::uint32_t>(n.shift));
    }
    out.push_back(std::move(d));
  }
  return out;
}

namespace {

Tensor image_tensor(const Image& image) {
  if (image.height() != kImageSide || image.width() != kImageSide) {
    throw StructuralError("embedder expects a 3x96x96 image, got 3x" +
                          std::to_string(image.height()) + "x" +
                          std::to_string(image.width()));
  }
  return image.to_tensor();
}

EmbeddingVector to_embedding(const Tensor& t) {
  return EmbeddingVector(std::vector<float>(t.values().begin(), t.values().end()));
}

}  // namespace

EmbeddingVector embed(const EmbedderModel& model, const Image& image) {
  Tape tape;
  return to_embedding(tape.forward(model.graph, model.params, image_tensor(image)));
}

std::vector<EmbeddingVector> embed_all(const EmbedderModel& model,
                                       const std::vector<Image>& images,
                                       std::size_t jobs) {
  std::vector<EmbeddingVector> out(images.size());
  parallel_for(images.size(), jobs, [&](std::size_t i) { out[i] = embed(model, images[i]); });
  return out;
}

// ---------------------------------------------------------------------------
// Training

namespace {

double distance(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

struct MinedTriplet {
  std::size_t anchor, positive, negative;
  double d_ap, d_an;
};

// Every ordered anchor-positive pair of `members` (indices into `emb`) with a
// semi-hard negative, falling back to the hardest one.
std::vector<MinedTriplet> mine_triplets(const std::vector<std::span<const float>>& emb,
                                        const std::vector<Label>& labels) {
  const std::size_t n = emb.size();
  std::vector<double> dist(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      dist[i * n + j] = dist[j * n + i] = distance(emb[i], emb[j]);
    }
  }
  std::vector<MinedTriplet> out;
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t p = 0; p < n; ++p) {
      if (p == a || labels[p] != labels[a]) continue;
      const double d_ap = dist[a * n + p];
      std::size_t semi = n, hardest = n;
      for (std::size_t k = 0; k < n; ++k) {
        if (labels[k] == labels[a]) continue;
        const double d = dist[a * n + k];
        if (hardest == n || d < dist[a * n + hardest]) hardest = k;
        if (d > d_ap && (semi == n || d < dist[a * n + semi])) semi = k;
      }
      if (hardest == n) continue;
      const std::size_t neg = semi != n ? semi : hardest;
      out.push_back({a, p, neg, d_ap, dist[a * n + neg]});
    }
  }
  return out;
}

void validate_training_set(const std::vector<Image>& images,
                           const std::vector<Label>& labels,
                           const TrainOptions& options) {
  if (images.size() != labels.size()) {
    throw StructuralError("training images and labels differ in length");
  }
  std::map<Label, std::size_t> counts;
  for (Label l : labels) ++counts[l];
  if (counts.size() < 2) {
    throw ConfigError("training needs at least 2 identities (no negatives exist)");
  }
  for (const auto& [label, count] : counts) {
    if (count < 2) {
      throw ConfigError("identity " + std::to_string(label) +
                        " has fewer than 2 images (no positives exist)");
    }
  }
  if (!(options.margin > 0.0)) throw ConfigError("training margin must be positive");
  if (!(options.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (options.identities_per_batch < 2 || options.images_per_identity < 2) {
    throw ConfigError("batches need at least 2 identities of at least 2 images");
  }
}

// Groups of same-identity images, shuffled, then packed into batches.
std::vector<std::vector<std::size_t>> make_batches(const std::vector<Label>& labels,
                                                   const TrainOptions& options,
                                                   Rng& rng) {
  std::map<Label, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < labels.size(); ++i) by_label[labels[i]].push_back(i);
  std::vector<std::vector<std::size_t>> groups;
  for (auto& [label, members] : by_label) {
    rng.shuffle(members);
    const std::size_t k = options.images_per_identity;
    for (std::size_t start = 0; start < members.size(); start += k) {
      const std::size_t end = std::min(members.size(), start + k);
      if (end - start < 2 && !groups.empty() && start > 0) {
        groups.back().insert(groups.back().end(), members.begin() + start,
                             members.begin() + end);
      } else {
        groups.emplace_back(members.begin() + start, members.begin() + end);
      }
    }
  }
  rng.shuffle(groups);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t g = 0; g < groups.size(); g += options.identities_per_batch) {
    std::vector<std::size_t> batch;
    for (std::size_t h = g; h < std::min(groups.size(), g + options.identities_per_batch); ++h) {
      batch.insert(batch.end(), groups[h].begin(), groups[h].end());
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

struct StepResult {
  double loss_sum = 0.0;
  std::size_t triplets = 0;
  std::size_t active = 0;
};

StepResult sgd_step(EmbedderModel& model, const std::vector<Image>& images,
                    const std::vector<Label>& labels,
                    const std::vector<std::size_t>& batch,
                    const TrainOptions& options) {
  const std::size_t n = batch.size();
  const NodeId out = model.output_node();
  std::vector<Tape> tapes(n);
  parallel_for(n, options.jobs, [&](std::size_t i) {
    tapes[i].forward(model.graph, model.params, image_tensor(images[batch[i]]));
  });

  std::vector<std::span<const float>> emb(n);
  std::vector<Label> batch_labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    emb[i] = tapes[i].value(out).values();
    batch_labels[i] = labels[batch[i]];
  }
  const auto triplets = mine_triplets(emb, batch_labels);

  StepResult result;
  result.triplets = triplets.size();
  if (triplets.empty()) return result;

  std::vector<std::vector<double>> grad(n, std::vector<double>(kEmbeddingDim, 0.0));
  for (const auto& t : triplets) {
    const double loss = t.d_ap - t.d_an + options.margin;
    if (loss <= 0.0) continue;
    result.loss_sum += loss;
    ++result.active;
    const auto a = emb[t.anchor], p = emb[t.positive], ng = emb[t.negative];
    for (std::size_t k = 0; k < kEmbeddingDim; ++k) {
      const double up = t.d_ap > 0.0 ? (a[k] - p[k]) / t.d_ap : 0.0;
      const double un = t.d_an > 0.0 ? (a[k] - ng[k]) / t.d_an : 0.0;
      grad[t.anchor][k] += up - un;
      grad[t.positive][k] -= up;
      grad[t.negative][k] += un;
    }
  }
  if (result.active == 0) return result;

  const double scale = 1.0 / static_cast<double>(triplets.size());
  std::vector<GradientSet> per_image(n);
  parallel_for(n, options.jobs, [&](std::size_t i) {
    std::vector<float> seed(kEmbeddingDim);
    for (std::size_t k = 0; k < kEmbeddingDim; ++k) {
      seed[k] = static_cast<float>(grad[i][k] * scale);
    }
    per_image[i] = tapes[i].backward_from(out, Tensor({kEmbeddingDim}, std::move(seed)),
                                          BackwardOptions{false, true});
  });

  const float lr = static_cast<float>(options.learning_rate);
  for (ParamId id = 0; id < model.params.size(); ++id) {
    std::vector<float> total(model.params.param(id).values().size(), 0.0f);
    for (std::size_t i = 0; i < n; ++i) {
      const auto g = per_image[i].by_parameter[id].values();
      for (std::size_t k = 0; k < total.size(); ++k) total[k] += g[k];
    }
    auto w = model.params.mutable_param(id).data();
    for (std::size_t k = 0; k < total.size(); ++k) w[k] -= lr * total[k];
  }
  return result;
}

}  // namespace

double evaluate_triplet_loss(const std::vector<EmbeddingVector>& embeddings,
                             const std::vector<Label>& labels, double margin) {
  if (embeddings.size() != labels.size()) {
    throw StructuralError("embeddings and labels differ in length");
  }
  std::vector<std::span<const float>> emb;
  for (const auto& e : embeddings) emb.push_back(e.values());
  const auto triplets = mine_triplets(emb, labels);
  if (triplets.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& t : triplets) sum += std::max(t.d_ap - t.d_an + margin, 0.0);
  return sum / static_cast<double>(triplets.size());
}

EmbedderModel train(const std::vector<Image>& images,
                    const std::vector<Label>& labels,
                    const TrainOptions& options) {
  validate_training_set(images, labels, options);
  EmbedderModel model = init_embedder(options.seed);
  model.metadata.corpus_fingerprint = options.corpus_fingerprint;
  model.metadata.epochs = static_cast<std::uint32_t>(options.epochs);
  model.metadata.margin = options.margin;
  model.metadata.learning_rate = options.learning_rate;
  model.metadata.initial_loss =
      evaluate_triplet_loss(embed_all(model, images, options.jobs), labels, options.margin);

  Rng rng(derive_seed(options.seed, 0xBA7C));
  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    double loss = 0.0;
    std::size_t triplets = 0, active = 0;
    for (const auto& batch : make_batches(labels, options, rng)) {
      const StepResult r = sgd_step(model, images, labels, batch, options);
      loss += r.loss_sum;
      triplets += r.triplets;
      active += r.active;
    }
    if (!model.params.all_finite()) {
      throw NumericError("non-finite parameters after training epoch " +
                         std::to_string(epoch));
    }
    if (options.on_epoch) {
      EpochStats stats;
      stats.epoch = epoch;
      stats.mean_loss = triplets ? loss / triplets : 0.0;
      stats.active_fraction = triplets ? static_cast<double>(active) / triplets : 0.0;
      options.on_epoch(stats);
    }
  }
  model.metadata.final_loss =
      evaluate_triplet_loss(embed_all(model, images, options.jobs), labels, options.margin);
  return model;
}

// ---------------------------------------------------------------------------
// Model file

namespace {

constexpr char kMagic[4] = {'C', 'F', 'W', '1'};
constexpr std::uint32_t kMetadataBytes = 8 + 4 + 8 + 8 + 8 + 8 + 8;

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  template <typename T>
  void le(T v) {
    using U = std::make_unsigned_t<T>;
    const U u = static_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      bytes_.push_back(static_cast<unsigned char>((u >> (8 * i)) & 0xFF));
    }
  }
  void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  std::vector<unsigned char>& bytes() { return bytes_; }

 private:
  std::vector<unsigned char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<unsigned char>& bytes) : bytes_(bytes) {}

  template <typename T>
  T le(const char* what) {
    need(sizeof(T), what);
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      u |= static_cast<std::make_unsigned_t<T>>(bytes_[pos_ + i]) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(u);
  }
  float f32(const char* what) { return std::bit_cast<float>(le<std::uint32_t>(what)); }
  double f64(const char* what) { return std::bit_cast<double>(le<std::uint64_t>(what)); }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw FormatError(std::string("truncated model file while reading ") + what,
                        bytes_.size());
    }
  }

 private:
  const std::vector<unsigned char>& bytes_;
  std::size_t pos_ = 0;
};

NodeId replay_layer(Graph& g, const LayerDescriptor& d, std::size_t offset) {
  const auto& v = d.ints;
  if (v.empty() || v.size() < 1 + v[0]) {
    throw FormatError("layer descriptor shorter than its shape", offset);
  }
  Shape shape(v.begin() + 1, v.begin() + 1 + v[0]);
  const std::size_t extra = v.size() - 1 - v[0];
  const auto want_extra = [&](std::size_t n) {
    if (extra != n) throw FormatError("unexpected layer descriptor length", offset);
  };
  const NodeId prev = g.size() == 0 ? 0 : g.size() - 1;
  NodeId id = 0;
  switch (d.kind) {
    case OpKind::Input:
      want_extra(0);
      if (g.size() != 0) throw FormatError("input layer must come first", offset);
      return g.input(shape);
    case OpKind::ScaleShift:
      want_extra(2);
      id = g.scale_shift(prev, std::bit_cast<float>(v[v.size() - 2]),
                         std::bit_cast<float>(v[v.size() - 1]));
      break;
    case OpKind::Conv3x3:
      want_extra(1);
      if (shape.empty()) throw FormatError("convolution without output shape", offset);
      id = g.conv3x3(prev, shape[0], static_cast<int>(v.back()));
      break;
    case OpKind::Relu:
      want_extra(0);
      id = g.relu(prev);
      break;
    case OpKind::AvgPool2:
      want_extra(0);
      id = g.avg_pool2(prev);
      break;
    case OpKind::Dense:
      want_extra(0);
      if (shape.size() != 1) throw FormatError("dense layer shape must be 1-D", offset);
      id = g.dense(prev, shape[0]);
      break;
    case OpKind::Flatten:
      want_extra(0);
      id = g.flatten(prev);
      break;
    case OpKind::L2Normalize:
      want_extra(0);
      id = g.l2_normalize(prev);
      break;
    default:
      throw FormatError("layer kind " + std::string(op_name(d.kind)) +
                            " is not allowed in an embedder",
                        offset);
  }
  if (g.node(id).shape != shape) {
    throw FormatError("layer shape " + to_string(shape) + " disagrees with computed " +
                          to_string(g.node(id).shape),
                      offset);
  }
  return id;
}

}  // namespace

std::vector<unsigned char> serialize_model(const EmbedderModel& model) {
  model.params.validate(model.graph);
  ByteWriter w;
  w.raw(kMagic, 4);
  w.le<std::uint16_t>(kModelFormatVersion);

  const auto layers = model.describe();
  w.le<std::uint32_t>(static_cast<std::uint32_t>(layers.size()));
  for (const auto& d : layers) {
    w.le<std::uint8_t>(static_cast<std::uint8_t>(d.kind));
    w.le<std::uint8_t>(static_cast<std::uint8_t>(d.ints.size()));
    for (auto v : d.ints) w.le<std::uint32_t>(v);
  }

  const auto& m = model.metadata;
  w.le<std::uint32_t>(kMetadataBytes);
  w.le<std::uint64_t>(m.corpus_fingerprint);
  w.le<std::uint32_t>(m.epochs);
  w.f64(m.margin);
  w.f64(m.learning_rate);
  w.le<std::uint64_t>(m.seed);
  w.f64(m.initial_loss);
  w.f64(m.final_loss);

  std::uint64_t count = 0;
  for (const auto& t : model.params.all()) count += t.values().size();
  w.le<std::uint64_t>(count);
  for (const auto& t : model.params.all()) {
    for (float v : t.values()) w.f32(v);
  }
  w.le<std::uint64_t>(fnv1a64(w.bytes()));
  return std::move(w.bytes());
}

EmbedderModel deserialize_model(const std::vector<unsigned char>& bytes) {
  ByteReader r(bytes);
  r.need(4, "magic");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("bad magic: not a CFW1 model file", 0);
  }
  r.le<std::uint32_t>("magic");
  const std::size_t version_at = r.pos();
  const auto version = r.le<std::uint16_t>("format version");
  if (version != kModelFormatVersion) {
    throw VersionError(kModelFormatVersion, version, version_at);
  }

  const auto layer_count = r.le<std::uint32_t>("layer count");
  if (layer_count == 0 || layer_count > 1024) {
    throw FormatError("implausible layer count " + std::to_string(layer_count),
                      r.pos() - 4);
  }
  EmbedderModel model;
  for (std::uint32_t i = 0; i < layer_count; ++i) {
    const std::size_t at = r.pos();
    LayerDescriptor d;
    const auto kind = r.le<std::uint8_t>("layer kind");
    if (kind > static_cast<std::uint8_t>(OpKind::MaxZero)) {
      throw FormatError("unknown layer kind " + std::to_string(kind), at);
    }
    d.kind = static_cast<OpKind>(kind);
    const auto n = r.le<std::uint8_t>("layer descriptor length");
    for (std::uint8_t k = 0; k < n; ++k) d.ints.push_back(r.le<std::uint32_t>("layer descriptor"));
    try {
      replay_layer(model.graph, d, at);
    } catch (const StructuralError& e) {
      throw FormatError(std::string("invalid architecture: ") + e.what(), at);
    }
  }
  const Node& first = model.graph.node(0);
  const Node& last = model.graph.node(model.graph.output());
  if (first.kind != OpKind::Input || first.shape != Shape{3, kImageSide, kImageSide} ||
      last.kind != OpKind::L2Normalize || last.shape != Shape{kEmbeddingDim}) {
    throw FormatError("architecture is not a 3x96x96 to 128 normalized embedder", 6);
  }

  const std::size_t meta_at = r.pos();
  if (r.le<std::uint32_t>("metadata length") != kMetadataBytes) {
    throw FormatError("unexpected metadata block length", meta_at);
  }
  auto& m = model.metadata;
  m.corpus_fingerprint = r.le<std::uint64_t>("metadata");
  m.epochs = r.le<std::uint32_t>("metadata");
  m.margin = r.f64("metadata");
  m.learning_rate = r.f64("metadata");
  m.seed = r.le<std::uint64_t>("metadata");
  m.initial_loss = r.f64("metadata");
  m.final_loss = r.f64("metadata");

  model.params = ParamStore(model.graph);
  std::uint64_t expected = 0;
  for (const auto& t : model.params.all()) expected += t.values().size();
  const std::size_t count_at = r.pos();
  const auto count = r.le<std::uint64_t>("parameter count");
  if (count != expected) {
    throw FormatError("parameter count " + std::to_string(count) +
                          " does not match architecture (" + std::to_string(expected) + ")",
                      count_at);
  }
  r.need(count * 4, "parameters");
  for (ParamId id = 0; id < model.params.size(); ++id) {
    for (float& v : model.params.mutable_param(id).data()) v = r.f32("parameters");
  }
  const std::size_t checksum_at = r.pos();
  const auto stored = r.le<std::uint64_t>("checksum");
  const auto actual = fnv1a64(std::span<const unsigned char>(bytes.data(), checksum_at));
  if (stored != actual) throw FormatError("checksum mismatch", checksum_at);
  if (r.remaining() != 0) throw FormatError("trailing bytes after checksum", r.pos());
  if (!model.params.all_finite()) throw FormatError("non-finite parameter values", count_at + 8);
  return model;
}

void save_model(const EmbedderModel& model, const std::filesystem::path& path) {
  const auto bytes = serialize_model(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write model file: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ConfigError("failed writing model file: " + path.string());
}

EmbedderModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open model file: " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                         std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

}  // namespace facecloak
