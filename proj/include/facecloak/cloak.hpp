#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "facecloak/autodiff.hpp"
#include "facecloak/embedder.hpp"
#include "facecloak/embedding.hpp"
#include "facecloak/error.hpp"
#include "facecloak/image.hpp"

namespace facecloak {

inline constexpr double kMaskBudget = 2.5;
inline constexpr double kStallThreshold = 0.01;
inline constexpr std::size_t kDefaultIterationCap = 100;

enum class StrategyKind { Farthest, RandomK, FarthestPlusRandom, MostSimilar, SelfTarget };

std::string_view strategy_name(StrategyKind kind);
// Accepts the names produced by strategy_name ("farthest", "random-k",
// "farthest-plus-random", "most-similar", "self-target").
StrategyKind parse_strategy(std::string_view name);
inline constexpr StrategyKind kAllStrategies[] = {
    StrategyKind::Farthest, StrategyKind::RandomK, StrategyKind::FarthestPlusRandom,
    StrategyKind::MostSimilar, StrategyKind::SelfTarget};

struct StrategySpec {
  StrategyKind kind = StrategyKind::Farthest;
  std::size_t k = 5;
  std::uint64_t seed = 0;
};

struct Triplet {
  Image anchor;
  EmbeddingVector positive;
  EmbeddingVector negative;
  double margin = 0.2;
};

enum class HaltReason { Continue, LossZero, Stalled, IterationCap };
std::string_view halt_name(HaltReason reason);

struct TraceEntry {
  std::size_t triplet = 0;
  std::size_t iteration = 0;  // 1-based within the triplet
  double loss = 0.0;
  double distance_to_original = 0.0;
  double distance_to_negative = 0.0;
  double mask_mean_abs = 0.0;  // mean |component| of the mask applied this step
  HaltReason halt = HaltReason::Continue;
};

struct CloakResult {
  Image cloaked_image;
  Image original_image;
  std::vector<TraceEntry> trace;
  std::vector<HaltReason> triplet_halts;  // final reason per triplet
  std::vector<std::size_t> negatives;     // gallery indices; empty for SelfTarget
  double dssim = 0.0;
  std::size_t total_iterations = 0;
};

// Raised when a non-finite value shows up mid-attack; carries the trace
// recorded up to that point.
class CloakNumericError : public NumericError {
 public:
  CloakNumericError(const std::string& what, std::vector<TraceEntry> partial)
      : NumericError(what), partial_trace(std::move(partial)) {}
  std::vector<TraceEntry> partial_trace;
};

// max(d(a,n) - d(a,p) + margin, 0): the training loss with positive and
// negative swapped, so lowering it pulls the anchor toward n.
double triplet_loss(const EmbeddingVector& a, const EmbeddingVector& p,
                    const EmbeddingVector& n, double margin);

// The embedder extended with the attack loss. Inputs, in order: image,
// positive [128], negative [128], margin [1].
struct AttackGraph {
  Graph graph;
  NodeId embedding = 0;
  NodeId loss = 0;
};
AttackGraph build_attack_graph(const EmbedderModel& model);

// d loss / d pixels for the triplet's current anchor (3x96x96).
Tensor input_gradient(const EmbedderModel& model, const Triplet& triplet);

// Rescales so the largest |component| is 2.5; a zero tensor stays zero.
Tensor normalize_mask(const Tensor& gradient);

// Gallery indices of the negatives, in processing order. SelfTarget returns
// an empty list (its negative is the anchor itself).
std::vector<std::size_t> select_negative_indices(const StrategySpec& strategy,
                                                 const EmbeddingVector& anchor,
                                                 const LabeledGallery& gallery,
                                                 double margin);
std::vector<EmbeddingVector> select_negatives(const StrategySpec& strategy,
                                              const EmbeddingVector& anchor,
                                              const LabeledGallery& gallery,
                                              double margin);

HaltReason halt_check(double loss, double prev_distance_to_negative,
                      double curr_distance_to_negative,
                      double threshold = kStallThreshold);

struct CloakOptions {
  double margin = 1.0;
  std::size_t max_iterations_per_triplet = kDefaultIterationCap;
  double stall_threshold = kStallThreshold;
};

CloakResult cloak(const EmbedderModel& model, const Image& image,
                  const LabeledGallery& gallery, const StrategySpec& strategy,
                  const CloakOptions& options);

}  // namespace facecloak
