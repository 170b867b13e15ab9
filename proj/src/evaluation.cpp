#include "facecloak/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>

#include "facecloak/parallel.hpp"
#include "facecloak/random.hpp"

namespace facecloak {

namespace {

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string shortest(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Identification

std::string method_name(const IdentifyMethod& method) {
  switch (method.kind) {
    case IdentifyMethod::Kind::NearestNeighbor: return "nearest-neighbor";
    case IdentifyMethod::Kind::NearestCentroid: return "nearest-centroid";
    case IdentifyMethod::Kind::KNN: return "knn-" + std::to_string(method.k);
    case IdentifyMethod::Kind::WeightedKNN: return "weighted-knn-" + std::to_string(method.k);
    case IdentifyMethod::Kind::DistanceBoundNN: return "distance-bound-nn-" + shortest(method.bound);
  }
  return "unknown";
}

std::vector<IdentifyMethod> default_identify_methods() {
  return {IdentifyMethod::nearest_neighbor(), IdentifyMethod::nearest_centroid(),
          IdentifyMethod::knn(), IdentifyMethod::weighted_knn(),
          IdentifyMethod::distance_bound()};
}

namespace {

// Winner of a score map: highest score, ties to the lowest label.
Label best_label(const std::map<Label, double>& scores) {
  Label best = scores.begin()->first;
  double top = scores.begin()->second;
  for (const auto& [label, score] : scores) {
    if (score > top) {
      top = score;
      best = label;
    }
  }
  return best;
}

void check_method(const IdentifyMethod& method, std::size_t gallery_size) {
  if (gallery_size == 0) throw ConfigError("identification needs a non-empty gallery");
  const bool uses_k = method.kind == IdentifyMethod::Kind::KNN ||
                      method.kind == IdentifyMethod::Kind::WeightedKNN;
  if (uses_k && (method.k == 0 || method.k > gallery_size)) {
    throw ConfigError("k must lie in [1, gallery size]");
  }
  if (method.kind == IdentifyMethod::Kind::DistanceBoundNN && !(method.bound > 0.0)) {
    throw ConfigError("distance bound must be positive");
  }
}

// Every method except the centroid one, from the probe's distances to each
// gallery entry.
std::optional<Label> classify(const std::vector<double>& d, const std::vector<Label>& labels,
                              const IdentifyMethod& method) {
  using Kind = IdentifyMethod::Kind;
  if (method.kind == Kind::NearestNeighbor || method.kind == Kind::DistanceBoundNN) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < d.size(); ++i) {
      if (d[i] < d[best] || (d[i] == d[best] && labels[i] < labels[best])) best = i;
    }
    if (method.kind == Kind::DistanceBoundNN && !(d[best] < method.bound)) return std::nullopt;
    return labels[best];
  }
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + method.k, order.end(),
                    [&](std::size_t a, std::size_t b) {
                      return d[a] < d[b] || (d[a] == d[b] && a < b);
                    });
  std::map<Label, double> votes;
  for (std::size_t r = 0; r < method.k; ++r) {
    const std::size_t i = order[r];
    votes[labels[i]] += method.kind == Kind::KNN ? 1.0 : 1.0 / (d[i] + method.epsilon);
  }
  return best_label(votes);
}

std::vector<std::pair<Label, EmbeddingVector>> centroids(
    const std::vector<const EmbeddingVector*>& members, const std::vector<Label>& labels) {
  std::map<Label, std::vector<double>> sums;
  for (std::size_t i = 0; i < members.size(); ++i) {
    auto& s = sums[labels[i]];
    s.resize(members[i]->size(), 0.0);
    for (std::size_t k = 0; k < s.size(); ++k) s[k] += (*members[i])[k];
  }
  std::vector<std::pair<Label, EmbeddingVector>> out;
  for (auto& [label, s] : sums) {
    double norm = 0.0;
    for (double v : s) norm += v * v;
    norm = std::sqrt(norm);
    if (!(norm > 1e-12)) {
      throw NumericError("centroid of identity " + std::to_string(label) + " has zero norm");
    }
    std::vector<float> unit(s.size());
    for (std::size_t k = 0; k < s.size(); ++k) unit[k] = static_cast<float>(s[k] / norm);
    out.emplace_back(label, EmbeddingVector(std::move(unit)));
  }
  return out;
}

Label nearest_centroid(const EmbeddingVector& probe,
                       const std::vector<std::pair<Label, EmbeddingVector>>& cents) {
  std::size_t best = 0;
  double best_d = embedding_distance(probe, cents[0].second);
  for (std::size_t i = 1; i < cents.size(); ++i) {
    const double d = embedding_distance(probe, cents[i].second);
    if (d < best_d) {  // map order already ascends by label
      best_d = d;
      best = i;
    }
  }
  return cents[best].first;
}

}  // namespace

std::optional<Label> identify(const EmbeddingVector& probe, const LabeledGallery& gallery,
                              const IdentifyMethod& method) {
  check_method(method, gallery.size());
  std::vector<Label> labels;
  for (const auto& e : gallery) labels.push_back(e.label);
  if (method.kind == IdentifyMethod::Kind::NearestCentroid) {
    std::vector<const EmbeddingVector*> members;
    for (const auto& e : gallery) members.push_back(&e.embedding);
    return nearest_centroid(probe, centroids(members, labels));
  }
  std::vector<double> d;
  for (const auto& e : gallery) d.push_back(embedding_distance(probe, e.embedding));
  return classify(d, labels, method);
}

// ---------------------------------------------------------------------------
// Clustering

std::string stop_rule_name(const StopRule& rule) {
  return rule.kind == StopRule::Kind::TargetCount
             ? "target-count-" + std::to_string(rule.count)
             : "distance-threshold-" + shortest(rule.distance);
}

ClusterSet agglomerate(const std::vector<EmbeddingVector>& embeddings, const StopRule& rule) {
  const std::size_t n = embeddings.size();
  if (n == 0) throw ConfigError("agglomerate needs at least one embedding");
  if (rule.kind == StopRule::Kind::TargetCount && rule.count == 0) {
    throw ConfigError("target cluster count must be positive");
  }
  constexpr double kInf = std::numeric_limits<double>::infinity();

  // Slot i holds the cluster whose smallest member is i.
  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      d[i * n + j] = d[j * n + i] = embedding_distance(embeddings[i], embeddings[j]);
    }
  }
  std::vector<std::vector<std::size_t>> members(n);
  for (std::size_t i = 0; i < n; ++i) members[i] = {i};
  std::vector<bool> active(n, true);
  // Row i caches its closest active slot j > i.
  std::vector<std::size_t> nn(n, n);
  std::vector<double> nnd(n, kInf);
  const auto rescan = [&](std::size_t i) {
    nn[i] = n;
    nnd[i] = kInf;
    for (std::size_t j = i + 1; j < n; ++j) {
      if (active[j] && d[i * n + j] < nnd[i]) {
        nnd[i] = d[i * n + j];
        nn[i] = j;
      }
    }
  };
  for (std::size_t i = 0; i < n; ++i) rescan(i);

  ClusterSet result;
  result.stop_rule = rule;
  std::size_t count = n;
  while (count > 1) {
    if (rule.kind == StopRule::Kind::TargetCount && count <= rule.count) break;
    std::size_t a = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (active[i] && nn[i] < n && (a == n || nnd[i] < nnd[a])) a = i;
    }
    const std::size_t b = nn[a];
    const double height = nnd[a];
    if (rule.kind == StopRule::Kind::DistanceThreshold && height > rule.distance) break;
    if (!result.merge_heights.empty()) {
      const double prev = result.merge_heights.back();
      if (height < prev - 1e-12 * std::max(1.0, std::fabs(prev))) {
        throw NumericError("average-linkage merge heights decreased (" + fixed6(prev) +
                           " then " + fixed6(height) + ")");
      }
    }
    result.merge_heights.push_back(height);

    const double sa = static_cast<double>(members[a].size());
    const double sb = static_cast<double>(members[b].size());
    for (std::size_t k = 0; k < n; ++k) {
      if (!active[k] || k == a || k == b) continue;
      const double v = (sa * d[a * n + k] + sb * d[b * n + k]) / (sa + sb);
      d[a * n + k] = d[k * n + a] = v;
    }
    members[a].insert(members[a].end(), members[b].begin(), members[b].end());
    std::sort(members[a].begin(), members[a].end());
    members[b].clear();
    active[b] = false;
    --count;

    for (std::size_t i = 0; i < n; ++i) {
      if (!active[i]) continue;
      if (i == a || nn[i] == a || nn[i] == b) {
        rescan(i);
      } else if (i < a && d[i * n + a] < nnd[i]) {
        nnd[i] = d[i * n + a];
        nn[i] = a;
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (active[i]) result.clusters.push_back(std::move(members[i]));
  }
  return result;
}

double cluster_accuracy(const ClusterSet& clusters, const std::vector<Label>& labels) {
  std::size_t total = 0, correct = 0;
  for (const auto& c : clusters.clusters) {
    if (c.size() < 2) continue;
    std::map<Label, std::size_t> counts;
    for (std::size_t i : c) {
      if (i >= labels.size()) throw ConfigError("cluster member without a label");
      ++counts[labels[i]];
    }
    std::size_t majority = 0;
    for (const auto& [label, k] : counts) majority = std::max(majority, k);
    total += c.size();
    correct += majority;
  }
  if (total == 0) {
    throw UndefinedScoreError("cluster accuracy is undefined: every cluster is a singleton");
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Corpus preparation

std::string_view scenario_name(Scenario scenario) {
  switch (scenario) {
    case Scenario::AllClear: return "all-clear";
    case Scenario::ClearGalleryCloakedProbes: return "clear-gallery";
    case Scenario::AllCloaked: return "all-cloaked";
  }
  return "unknown";
}

Scenario parse_scenario(std::string_view name) {
  for (Scenario s : {Scenario::AllClear, Scenario::ClearGalleryCloakedProbes,
                     Scenario::AllCloaked}) {
    if (scenario_name(s) == name) return s;
  }
  throw ArgumentError("unknown scenario '" + std::string(name) +
                      "' (expected all-clear, clear-gallery or all-cloaked)");
}

LabeledGallery EmbeddedCorpus::gallery(bool use_cloaked) const {
  LabeledGallery g;
  const auto& src = use_cloaked ? cloaked : clear;
  for (std::size_t i = 0; i < size(); ++i) g.push_back({src[i], labels[i], std::to_string(i)});
  return g;
}

EmbeddedCorpus embed_corpus(const Corpus& corpus, const EmbedderModel& model,
                            std::size_t jobs) {
  EmbeddedCorpus out;
  out.labels = corpus.labels;
  out.clear = embed_all(model, corpus.images, jobs);
  out.cloaked = out.clear;
  out.dssim.assign(corpus.size(), 0.0);
  out.iterations.assign(corpus.size(), 0);
  return out;
}

EmbeddedCorpus prepare_corpus(const Corpus& corpus, const EmbedderModel& model,
                              const StrategySpec& strategy, const CloakOptions& options,
                              std::size_t jobs,
                              const std::function<void(std::size_t)>& progress) {
  EmbeddedCorpus out = embed_corpus(corpus, model, jobs);
  out.strategy = strategy;
  out.cloak_options = options;
  const LabeledGallery all = out.gallery(false);
  std::vector<char> infeasible(corpus.size(), 0);
  parallel_for(corpus.size(), jobs, [&](std::size_t i) {
    LabeledGallery others;
    others.reserve(all.size() - 1);
    for (std::size_t j = 0; j < all.size(); ++j) {
      if (j != i) others.push_back(all[j]);
    }
    StrategySpec s = strategy;
    s.seed = derive_seed(strategy.seed, i);
    try {
      const CloakResult r = cloak(model, corpus.images[i], others, s, options);
      out.cloaked[i] = embed(model, r.cloaked_image.quantized());
      out.dssim[i] = r.dssim;
      out.iterations[i] = r.total_iterations;
    } catch (const StrategyInfeasibleError&) {
      infeasible[i] = 1;
    }
    if (progress) progress(i);
  });
  out.infeasible = static_cast<std::size_t>(std::count(infeasible.begin(), infeasible.end(), 1));
  return out;
}

// ---------------------------------------------------------------------------
// Reports

double ExperimentReport::mean(std::size_t method) const {
  if (scores.empty()) return 0.0;
  double s = 0.0;
  for (const auto& rep : scores) s += rep.at(method);
  return s / static_cast<double>(scores.size());
}

double ExperimentReport::mean(const std::string& method) const {
  const auto it = std::find(methods.begin(), methods.end(), method);
  if (it == methods.end()) throw ConfigError("report has no method '" + method + "'");
  return mean(static_cast<std::size_t>(it - methods.begin()));
}

std::string ExperimentReport::serialize() const {
  std::string out = "facecloak-report 1\ntask " + task + "\n";
  for (const auto& [key, value] : config) out += "config " + key + " " + value + "\n";
  out += "methods";
  for (const auto& m : methods) out += " " + m;
  out += "\n";
  for (std::size_t r = 0; r < scores.size(); ++r) {
    for (std::size_t m = 0; m < methods.size(); ++m) {
      out += "rep " + std::to_string(r) + " " + methods[m] + " " + fixed6(scores[r][m]) + "\n";
    }
  }
  for (std::size_t m = 0; m < methods.size(); ++m) {
    out += "summary " + methods[m] + " mean " + fixed6(mean(m));
    if (m < undefined.size()) out += " undefined " + std::to_string(undefined[m]);
    out += "\n";
  }
  return out;
}

namespace {

void echo_corpus(ExperimentReport& r, const EmbeddedCorpus& c) {
  r.config.emplace_back("strategy", std::string(strategy_name(c.strategy.kind)));
  r.config.emplace_back("k", std::to_string(c.strategy.k));
  r.config.emplace_back("strategy_seed", std::to_string(c.strategy.seed));
  r.config.emplace_back("margin", shortest(c.cloak_options.margin));
  r.config.emplace_back("max_iterations", std::to_string(c.cloak_options.max_iterations_per_triplet));
  r.config.emplace_back("corpus_images", std::to_string(c.size()));
  r.config.emplace_back("infeasible", std::to_string(c.infeasible));
}

// Identities with at least `needed` images, ascending by label.
std::map<Label, std::vector<std::size_t>> eligible_identities(const EmbeddedCorpus& c,
                                                              std::size_t needed,
                                                              std::size_t people) {
  std::map<Label, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < c.size(); ++i) by_label[c.labels[i]].push_back(i);
  for (auto it = by_label.begin(); it != by_label.end();) {
    it = it->second.size() < needed ? by_label.erase(it) : std::next(it);
  }
  if (by_label.size() < people || people == 0) {
    throw ConfigError("corpus has " + std::to_string(by_label.size()) +
                      " identities with at least " + std::to_string(needed) +
                      " images; " + std::to_string(people) + " required");
  }
  return by_label;
}

// Draws `people` identities and `per` images of each, both uniformly.
std::vector<std::vector<std::size_t>> sample_people(
    const std::map<Label, std::vector<std::size_t>>& pool, std::size_t people,
    std::size_t per, Rng& rng) {
  std::vector<const std::vector<std::size_t>*> ids;
  for (const auto& [label, members] : pool) ids.push_back(&members);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t pick : rng.sample_without_replacement(ids.size(), people)) {
    const auto& members = *ids[pick];
    std::vector<std::size_t> chosen;
    for (std::size_t j : rng.sample_without_replacement(members.size(), per)) {
      chosen.push_back(members[j]);
    }
    out.push_back(std::move(chosen));
  }
  return out;
}

}  // namespace

ExperimentReport run_identification(const EmbeddedCorpus& corpus,
                                    const IdentificationConfig& config) {
  if (config.repetitions == 0) throw ConfigError("repetitions must be positive");
  if (config.per_person == 0 || config.probes_per_person == 0) {
    throw ConfigError("per-person gallery and probe counts must be positive");
  }
  const auto pool = eligible_identities(corpus, config.per_person + config.probes_per_person,
                                        config.people);
  const auto methods = default_identify_methods();
  for (const auto& m : methods) check_method(m, config.people * config.per_person);

  ExperimentReport report;
  report.task = "identification";
  report.config = {{"repetition_seed", std::to_string(config.seed)},
                   {"repetitions", std::to_string(config.repetitions)},
                   {"people", std::to_string(config.people)},
                   {"per_person", std::to_string(config.per_person)},
                   {"probes_per_person", std::to_string(config.probes_per_person)},
                   {"scenario", std::string(scenario_name(config.scenario))},
                   {"shuffle_labels", config.shuffle_labels ? "yes" : "no"}};
  echo_corpus(report, corpus);
  for (const auto& m : methods) report.methods.push_back(method_name(m));
  report.scores.assign(config.repetitions, std::vector<double>(methods.size(), 0.0));

  const bool cloaked_gallery = config.scenario == Scenario::AllCloaked;
  const bool cloaked_probes = config.scenario != Scenario::AllClear;
  parallel_for(config.repetitions, config.jobs, [&](std::size_t rep) {
    Rng rng(derive_seed(config.seed, rep));
    const auto people = sample_people(pool, config.people,
                                      config.per_person + config.probes_per_person, rng);
    std::vector<const EmbeddingVector*> gallery;
    std::vector<Label> gallery_labels;
    std::vector<std::size_t> probes;
    for (const auto& chosen : people) {
      for (std::size_t j = 0; j < chosen.size(); ++j) {
        const std::size_t i = chosen[j];
        if (j < config.per_person) {
          gallery.push_back(cloaked_gallery ? &corpus.cloaked[i] : &corpus.clear[i]);
          gallery_labels.push_back(corpus.labels[i]);
        } else {
          probes.push_back(i);
        }
      }
    }
    if (config.shuffle_labels) rng.shuffle(gallery_labels);
    const auto cents = centroids(gallery, gallery_labels);

    std::vector<std::size_t> correct(methods.size(), 0);
    std::vector<double> d(gallery.size());
    for (std::size_t i : probes) {
      const EmbeddingVector& probe = cloaked_probes ? corpus.cloaked[i] : corpus.clear[i];
      for (std::size_t g = 0; g < gallery.size(); ++g) d[g] = embedding_distance(probe, *gallery[g]);
      for (std::size_t m = 0; m < methods.size(); ++m) {
        const std::optional<Label> got =
            methods[m].kind == IdentifyMethod::Kind::NearestCentroid
                ? std::optional<Label>(nearest_centroid(probe, cents))
                : classify(d, gallery_labels, methods[m]);
        correct[m] += got.has_value() && *got == corpus.labels[i];
      }
    }
    for (std::size_t m = 0; m < methods.size(); ++m) {
      report.scores[rep][m] = static_cast<double>(correct[m]) / static_cast<double>(probes.size());
    }
  });
  return report;
}

ExperimentReport run_clustering(const EmbeddedCorpus& corpus, const ClusteringConfig& config) {
  if (config.repetitions == 0) throw ConfigError("repetitions must be positive");
  if (!(config.cloaked_fraction >= 0.0 && config.cloaked_fraction <= 1.0)) {
    throw ConfigError("cloaked fraction must lie in [0, 1]");
  }
  if (config.per_person == 0) throw ConfigError("per-person count must be positive");
  const auto pool = eligible_identities(corpus, config.per_person, config.people);
  const std::vector<StopRule> rules = {StopRule::target_count(config.target_clusters),
                                       StopRule::distance_threshold(config.distance_threshold)};

  ExperimentReport report;
  report.task = "clustering";
  const double f = config.cloaked_fraction;
  const bool canonical = f == 0.0 || f == 0.1 || f == 0.5 || f == 1.0;
  report.config = {{"repetition_seed", std::to_string(config.seed)},
                   {"repetitions", std::to_string(config.repetitions)},
                   {"people", std::to_string(config.people)},
                   {"per_person", std::to_string(config.per_person)},
                   {"cloaked_fraction", shortest(f) + (canonical ? "" : " non-canonical")},
                   {"linkage", "average"}};
  echo_corpus(report, corpus);
  for (const auto& r : rules) report.methods.push_back(stop_rule_name(r));
  report.scores.assign(config.repetitions, std::vector<double>(rules.size(), 0.0));
  std::vector<std::vector<char>> undefined(config.repetitions, std::vector<char>(rules.size(), 0));

  parallel_for(config.repetitions, config.jobs, [&](std::size_t rep) {
    Rng rng(derive_seed(config.seed, rep));
    const auto people = sample_people(pool, config.people, config.per_person, rng);
    std::vector<std::size_t> items;
    for (const auto& chosen : people) items.insert(items.end(), chosen.begin(), chosen.end());
    const auto n_cloaked =
        static_cast<std::size_t>(std::llround(f * static_cast<double>(items.size())));
    std::vector<char> cloaked(items.size(), 0);
    for (std::size_t j : rng.sample_without_replacement(items.size(), n_cloaked)) cloaked[j] = 1;

    std::vector<EmbeddingVector> emb;
    std::vector<Label> labels;
    for (std::size_t j = 0; j < items.size(); ++j) {
      emb.push_back(cloaked[j] ? corpus.cloaked[items[j]] : corpus.clear[items[j]]);
      labels.push_back(corpus.labels[items[j]]);
    }
    for (std::size_t r = 0; r < rules.size(); ++r) {
      try {
        report.scores[rep][r] = cluster_accuracy(agglomerate(emb, rules[r]), labels);
      } catch (const UndefinedScoreError&) {
        report.scores[rep][r] = 0.0;
        undefined[rep][r] = 1;
      }
    }
  });
  report.undefined.assign(rules.size(), 0);
  for (const auto& rep : undefined) {
    for (std::size_t r = 0; r < rules.size(); ++r) report.undefined[r] += rep[r];
  }
  return report;
}

VerificationPair run_verification(const EmbeddedCorpus& corpus, double threshold,
                                  PairCounting counting) {
  return {verification(corpus.gallery(false), threshold, counting),
          verification(corpus.gallery(true), threshold, counting)};
}

ExperimentReport run_dataset_size_study(const EmbeddedCorpus& corpus,
                                        const DatasetSizeConfig& config) {
  if (config.breadths.empty() || config.depths.empty()) {
    throw ConfigError("dataset-size study needs at least one breadth and one depth");
  }
  ExperimentReport report;
  report.task = "dataset-size";
  report.config = {{"repetition_seed", std::to_string(config.seed)},
                   {"repetitions", std::to_string(config.repetitions)},
                   {"probes_per_person", std::to_string(config.probes_per_person)},
                   {"method", "nearest-neighbor"}};
  struct Cell {
    std::size_t breadth, depth;
  };
  std::vector<Cell> cells;
  for (std::size_t b : config.breadths) {
    for (std::size_t d : config.depths) {
      if (b < 2 || d == 0) throw ConfigError("breadth must be >= 2 and depth >= 1");
      cells.push_back({b, d});
      report.methods.push_back("b=" + std::to_string(b) + ",d=" + std::to_string(d));
    }
  }
  std::vector<std::map<Label, std::vector<std::size_t>>> pools;
  for (const auto& c : cells) {
    pools.push_back(eligible_identities(corpus, c.depth + config.probes_per_person, c.breadth));
  }
  report.scores.assign(config.repetitions, std::vector<double>(cells.size(), 0.0));
  for (std::size_t rep = 0; rep < config.repetitions; ++rep) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      Rng rng(derive_seed(derive_seed(config.seed, rep), c));
      const auto people = sample_people(pools[c], cells[c].breadth,
                                        cells[c].depth + config.probes_per_person, rng);
      LabeledGallery gallery;
      std::vector<std::size_t> probes;
      for (const auto& chosen : people) {
        for (std::size_t j = 0; j < chosen.size(); ++j) {
          if (j < cells[c].depth) {
            gallery.push_back({corpus.clear[chosen[j]], corpus.labels[chosen[j]], {}});
          } else {
            probes.push_back(chosen[j]);
          }
        }
      }
      std::size_t correct = 0;
      for (std::size_t i : probes) {
        const auto got = identify(corpus.clear[i], gallery, IdentifyMethod::nearest_neighbor());
        correct += got == corpus.labels[i];
      }
      report.scores[rep][c] = static_cast<double>(correct) / static_cast<double>(probes.size());
    }
  }
  return report;
}

}  // namespace facecloak
