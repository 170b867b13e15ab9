#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "facecloak/cloak.hpp"
#include "facecloak/corpus.hpp"
#include "facecloak/embedder.hpp"
#include "facecloak/embedding.hpp"
#include "facecloak/error.hpp"
#include "facecloak/metrics.hpp"

namespace facecloak {

inline constexpr double kDistanceBound = 1.242;

// ---------------------------------------------------------------------------
// Identification

struct IdentifyMethod {
  enum class Kind { NearestNeighbor, NearestCentroid, KNN, WeightedKNN, DistanceBoundNN };
  Kind kind = Kind::NearestNeighbor;
  std::size_t k = 5;
  double bound = kDistanceBound;
  double epsilon = 1e-8;

  static IdentifyMethod nearest_neighbor() { return {Kind::NearestNeighbor}; }
  static IdentifyMethod nearest_centroid() { return {Kind::NearestCentroid}; }
  static IdentifyMethod knn(std::size_t k = 5) { return {Kind::KNN, k}; }
  static IdentifyMethod weighted_knn(std::size_t k = 5) { return {Kind::WeightedKNN, k}; }
  static IdentifyMethod distance_bound(double bound = kDistanceBound) {
    return {Kind::DistanceBoundNN, 5, bound};
  }
};

std::string method_name(const IdentifyMethod& method);
// The five methods with their default parameters, in report order.
std::vector<IdentifyMethod> default_identify_methods();

// Label for `probe`, or nullopt for Unknown. Ties go to the lowest label.
std::optional<Label> identify(const EmbeddingVector& probe, const LabeledGallery& gallery,
                              const IdentifyMethod& method);

// ---------------------------------------------------------------------------
// Clustering

struct StopRule {
  enum class Kind { TargetCount, DistanceThreshold };
  Kind kind = Kind::TargetCount;
  std::size_t count = 20;
  double distance = kDistanceBound;

  static StopRule target_count(std::size_t n) { return {Kind::TargetCount, n, 0.0}; }
  static StopRule distance_threshold(double d) { return {Kind::DistanceThreshold, 0, d}; }
};

std::string stop_rule_name(const StopRule& rule);

struct ClusterSet {
  // Each cluster's members ascending; clusters ordered by smallest member.
  std::vector<std::vector<std::size_t>> clusters;
  std::string linkage = "average";
  StopRule stop_rule;
  // Linkage distance of every merge, in merge order.
  std::vector<double> merge_heights;
};

// Average-linkage agglomeration. Merges the closest pair until the rule
// fires: TargetCount stops at n clusters, DistanceThreshold stops before the
// first merge whose linkage exceeds d. Equal distances merge the
// lexicographically smallest (smallest-member) pair first.
ClusterSet agglomerate(const std::vector<EmbeddingVector>& embeddings, const StopRule& rule);

// Raised when every cluster is a singleton, leaving weighted purity undefined.
class UndefinedScoreError : public Error {
 public:
  using Error::Error;
};

// Size-weighted majority fraction over clusters with at least two members.
double cluster_accuracy(const ClusterSet& clusters, const std::vector<Label>& labels);

// ---------------------------------------------------------------------------
// Experiments

enum class Scenario { AllClear, ClearGalleryCloakedProbes, AllCloaked };
std::string_view scenario_name(Scenario scenario);
Scenario parse_scenario(std::string_view name);

// Clear and cloaked embeddings of every corpus image. Each image is cloaked
// once, against a gallery of all other corpus images, and the cloaked pixels
// are rounded to 8 bits before embedding (as if saved to disk).
struct EmbeddedCorpus {
  std::vector<Label> labels;
  std::vector<EmbeddingVector> clear;
  std::vector<EmbeddingVector> cloaked;
  std::vector<double> dssim;
  std::vector<std::size_t> iterations;
  std::size_t infeasible = 0;  // images left uncloaked (strategy infeasible)
  StrategySpec strategy;
  CloakOptions cloak_options;

  std::size_t size() const noexcept { return labels.size(); }
  LabeledGallery gallery(bool use_cloaked) const;
};

// Strategy randomness for image i is seeded with derive_seed(strategy.seed, i).
EmbeddedCorpus prepare_corpus(const Corpus& corpus, const EmbedderModel& model,
                              const StrategySpec& strategy, const CloakOptions& options,
                              std::size_t jobs = 1,
                              const std::function<void(std::size_t)>& progress = {});

// Uncloaked and cloaked variants only; the cloaked half mirrors the clear one.
EmbeddedCorpus embed_corpus(const Corpus& corpus, const EmbedderModel& model,
                            std::size_t jobs = 1);

struct ExperimentReport {
  std::string task;
  std::vector<std::pair<std::string, std::string>> config;
  std::vector<std::string> methods;
  std::vector<std::vector<double>> scores;  // [repetition][method]
  // Repetitions per method whose score was undefined and recorded as 0.
  std::vector<std::size_t> undefined;

  std::size_t repetitions() const noexcept { return scores.size(); }
  double mean(std::size_t method) const;
  double mean(const std::string& method) const;
  std::string serialize() const;
};

struct IdentificationConfig {
  std::size_t repetitions = 100;
  std::size_t people = 20;
  std::size_t per_person = 20;
  std::size_t probes_per_person = 10;
  Scenario scenario = Scenario::AllClear;
  // Shuffle gallery labels within each repetition (chance-level control).
  bool shuffle_labels = false;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
};

ExperimentReport run_identification(const EmbeddedCorpus& corpus,
                                    const IdentificationConfig& config);

struct ClusteringConfig {
  std::size_t repetitions = 100;
  std::size_t people = 20;
  std::size_t per_person = 20;
  double cloaked_fraction = 0.0;
  std::size_t target_clusters = 20;
  double distance_threshold = kDistanceBound;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
};

ExperimentReport run_clustering(const EmbeddedCorpus& corpus, const ClusteringConfig& config);

struct VerificationPair {
  VerificationReport before;
  VerificationReport after;
};

VerificationPair run_verification(const EmbeddedCorpus& corpus, double threshold,
                                  PairCounting counting = PairCounting::Unordered);

// Nearest-neighbor accuracy on clear embeddings for every (breadth, depth)
// gallery size; one method column per combination, e.g. "b=20,d=5".
struct DatasetSizeConfig {
  std::vector<std::size_t> breadths;
  std::vector<std::size_t> depths;
  std::size_t probes_per_person = 1;
  std::size_t repetitions = 10;
  std::uint64_t seed = 0;
};

ExperimentReport run_dataset_size_study(const EmbeddedCorpus& corpus,
                                        const DatasetSizeConfig& config);

}  // namespace facecloak
