#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "facecloak/autodiff.hpp"
#include "facecloak/embedding.hpp"
#include "facecloak/image.hpp"

namespace facecloak {

inline constexpr std::uint16_t kModelFormatVersion = 1;

struct TrainingMetadata {
  std::uint64_t corpus_fingerprint = 0;
  std::uint32_t epochs = 0;
  double margin = 0.0;
  double learning_rate = 0.0;
  std::uint64_t seed = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;

  friend bool operator==(const TrainingMetadata&, const TrainingMetadata&) = default;
};

// One entry of the architecture descriptor: the op kind and its output shape
// plus any op-specific integers (conv stride).
struct LayerDescriptor {
  OpKind kind = OpKind::Input;
  std::vector<std::uint32_t> ints;

  friend bool operator==(const LayerDescriptor&, const LayerDescriptor&) = default;
};

// The embedding network G_W: 3x96x96 pixels in [0,255] to a unit 128-vector.
// Node 0 is the image input and the final node is the L2 normalization; the
// graph is a single chain, so it can be extended by appending nodes.
struct EmbedderModel {
  Graph graph;
  ParamStore params;
  TrainingMetadata metadata;

  NodeId input_node() const { return 0; }
  NodeId output_node() const { return graph.output(); }
  std::vector<LayerDescriptor> describe() const;

  friend bool operator==(const EmbedderModel& a, const EmbedderModel& b) {
    return a.describe() == b.describe() && a.params == b.params &&
           a.metadata == b.metadata;
  }
};

Graph build_embedder_graph();

// Fresh network with He-normal weights and zero biases drawn from `seed`.
EmbedderModel init_embedder(std::uint64_t seed);

// Deterministic; safe to call concurrently on a shared model.
EmbeddingVector embed(const EmbedderModel& model, const Image& image);
std::vector<EmbeddingVector> embed_all(const EmbedderModel& model,
                                       const std::vector<Image>& images,
                                       std::size_t jobs = 1);

struct EpochStats {
  std::size_t epoch = 0;     // 1-based
  double mean_loss = 0.0;    // mean triplet loss over the epoch's batches
  double active_fraction = 0.0;  // triplets with positive loss
};

struct TrainOptions {
  double margin = 0.2;
  std::size_t epochs = 30;
  double learning_rate = 0.1;
  std::uint64_t seed = 0;
  // Batches hold `identities_per_batch` groups of up to
  // `images_per_identity` images of one identity each.
  std::size_t identities_per_batch = 8;
  std::size_t images_per_identity = 4;
  std::size_t jobs = 1;
  std::uint64_t corpus_fingerprint = 0;
  std::function<void(const EpochStats&)> on_epoch;
};

// Triplet-loss training with in-batch semi-hard negative mining and plain
// SGD. Bit-identical results for a fixed seed, independent of `jobs`.
EmbedderModel train(const std::vector<Image>& images,
                    const std::vector<Label>& labels,
                    const TrainOptions& options);

// Mean triplet loss over every anchor-positive pair of the whole set, each
// paired with its mined (semi-hard, else hardest) negative.
double evaluate_triplet_loss(const std::vector<EmbeddingVector>& embeddings,
                             const std::vector<Label>& labels, double margin);

std::vector<unsigned char> serialize_model(const EmbedderModel& model);
EmbedderModel deserialize_model(const std::vector<unsigned char>& bytes);
void save_model(const EmbedderModel& model, const std::filesystem::path& path);
EmbedderModel load_model(const std::filesystem::path& path);

}  // namespace facecloak
