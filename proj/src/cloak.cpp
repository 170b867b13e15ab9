#include "facecloak/cloak.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "facecloak/hash.hpp"
#include "facecloak/metrics.hpp"
#include "facecloak/random.hpp"

namespace facecloak {

std::string_view strategy_name(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::Farthest: return "farthest";
    case StrategyKind::RandomK: return "random-k";
    case StrategyKind::FarthestPlusRandom: return "farthest-plus-random";
    case StrategyKind::MostSimilar: return "most-similar";
    case StrategyKind::SelfTarget: return "self-target";
  }
  return "unknown";
}

StrategyKind parse_strategy(std::string_view name) {
  for (StrategyKind k : kAllStrategies) {
    if (strategy_name(k) == name) return k;
  }
  throw ArgumentError("unknown strategy '" + std::string(name) +
                      "' (expected farthest, random-k, farthest-plus-random, "
                      "most-similar or self-target)");
}

std::string_view halt_name(HaltReason reason) {
  switch (reason) {
    case HaltReason::Continue: return "continue";
    case HaltReason::LossZero: return "loss-zero";
    case HaltReason::Stalled: return "stalled";
    case HaltReason::IterationCap: return "iteration-cap";
  }
  return "unknown";
}

double triplet_loss(const EmbeddingVector& a, const EmbeddingVector& p,
                    const EmbeddingVector& n, double margin) {
  return std::max(embedding_distance(a, n) - embedding_distance(a, p) + margin, 0.0);
}

AttackGraph build_attack_graph(const EmbedderModel& model) {
  AttackGraph ag;
  ag.graph = model.graph;
  ag.embedding = model.output_node();
  Graph& g = ag.graph;
  const NodeId p = g.input({kEmbeddingDim});
  const NodeId n = g.input({kEmbeddingDim});
  const NodeId m = g.input({1});
  const NodeId d_an = g.sqrt(g.sum(g.square(g.subtract(ag.embedding, n))));
  const NodeId d_ap = g.sqrt(g.sum(g.square(g.subtract(ag.embedding, p))));
  ag.loss = g.max_zero(g.add(g.subtract(d_an, d_ap), m));
  return ag;
}

namespace {

Tensor embedding_tensor(const EmbeddingVector& e) {
  if (e.size() != kEmbeddingDim) {
    throw StructuralError("expected a 128-d embedding, got " + std::to_string(e.size()));
  }
  return Tensor({kEmbeddingDim}, e.raw());
}

Tensor checked_image_tensor(const Image& image) {
  if (image.height() != kImageSide || image.width() != kImageSide) {
    throw StructuralError("cloaking expects a 3x96x96 image");
  }
  return image.to_tensor();
}

EmbeddingVector tensor_embedding(const Tensor& t) {
  return EmbeddingVector(std::vector<float>(t.values().begin(), t.values().end()));
}

}  // namespace

Tensor input_gradient(const EmbedderModel& model, const Triplet& triplet) {
  const AttackGraph ag = build_attack_graph(model);
  const std::vector<Tensor> inputs = {
      checked_image_tensor(triplet.anchor), embedding_tensor(triplet.positive),
      embedding_tensor(triplet.negative),
      Tensor({1}, std::vector<float>{static_cast<float>(triplet.margin)})};
  Tape tape;
  tape.forward(ag.graph, model.params, inputs);
  return *tape.backward_from(ag.loss, Tensor({1}, 1.0f), BackwardOptions{true, false})
              .by_input;
}

Tensor normalize_mask(const Tensor& gradient) {
  const float peak = gradient.max_abs();
  Tensor out = gradient;
  if (peak == 0.0f) return out;
  const double scale = kMaskBudget / static_cast<double>(peak);
  for (float& v : out.data()) v = static_cast<float>(v * scale);
  return out;
}

// ---------------------------------------------------------------------------
// Negative selection

std::vector<std::size_t> select_negative_indices(const StrategySpec& strategy,
                                                 const EmbeddingVector& anchor,
                                                 const LabeledGallery& gallery,
                                                 double margin) {
  if (strategy.kind == StrategyKind::SelfTarget) return {};
  if (gallery.empty()) {
    throw ConfigError(std::string(strategy_name(strategy.kind)) +
                      " needs a non-empty gallery");
  }
  std::vector<double> d(gallery.size());
  for (std::size_t i = 0; i < gallery.size(); ++i) {
    d[i] = embedding_distance(anchor, gallery[i].embedding);
  }
  const auto farthest = static_cast<std::size_t>(
      std::max_element(d.begin(), d.end()) - d.begin());

  const auto random_draws = [&](std::size_t exclude) {
    const std::size_t pool = gallery.size() - (exclude < gallery.size() ? 1 : 0);
    if (strategy.k == 0) throw ConfigError("k must be positive");
    if (strategy.k > pool) {
      throw StrategyInfeasibleError(std::string(strategy_name(strategy.kind)) +
                                    ": gallery has fewer than k=" +
                                    std::to_string(strategy.k) + " candidates");
    }
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < gallery.size(); ++i) {
      if (i != exclude) candidates.push_back(i);
    }
    Rng rng(strategy.seed);
    std::vector<std::size_t> out;
    for (std::size_t pick : rng.sample_without_replacement(pool, strategy.k)) {
      out.push_back(candidates[pick]);
    }
    return out;
  };

  switch (strategy.kind) {
    case StrategyKind::Farthest:
      return {farthest};
    case StrategyKind::RandomK:
      return random_draws(gallery.size());
    case StrategyKind::FarthestPlusRandom: {
      std::vector<std::size_t> out = {farthest};
      for (std::size_t i : random_draws(farthest)) out.push_back(i);
      return out;
    }
    case StrategyKind::MostSimilar: {
      std::size_t best = gallery.size();
      for (std::size_t i = 0; i < gallery.size(); ++i) {
        if (d[i] >= margin && (best == gallery.size() || d[i] < d[best])) best = i;
      }
      if (best == gallery.size()) {
        throw StrategyInfeasibleError("most-similar: no gallery embedding at distance >= margin " +
                                      std::to_string(margin));
      }
      return {best};
    }
    case StrategyKind::SelfTarget:
      break;
  }
  return {};
}

std::vector<EmbeddingVector> select_negatives(const StrategySpec& strategy,
                                              const EmbeddingVector& anchor,
                                              const LabeledGallery& gallery,
                                              double margin) {
  if (strategy.kind == StrategyKind::SelfTarget) return {anchor};
  std::vector<EmbeddingVector> out;
  for (std::size_t i : select_negative_indices(strategy, anchor, gallery, margin)) {
    out.push_back(gallery[i].embedding);
  }
  return out;
}

HaltReason halt_check(double loss, double prev_distance_to_negative,
                      double curr_distance_to_negative, double threshold) {
  if (loss <= 0.0) return HaltReason::LossZero;
  if (std::fabs(prev_distance_to_negative - curr_distance_to_negative) < threshold) {
    return HaltReason::Stalled;
  }
  return HaltReason::Continue;
}

// ---------------------------------------------------------------------------
// Attack loop

namespace {

constexpr double kDisplacementTolerance = 1e-4;

// Pseudo-random point on the unit sphere, seeded by the bytes of `from`.
EmbeddingVector scatter_target(const EmbeddingVector& from) {
  const auto* bytes = reinterpret_cast<const unsigned char*>(from.raw().data());
  Rng rng(fnv1a64(std::span<const unsigned char>(bytes, from.size() * sizeof(float))));
  std::vector<double> u(from.size());
  double norm = 0.0;
  for (double& v : u) {
    v = rng.normal();
    norm += v * v;
  }
  norm = std::sqrt(norm);
  std::vector<float> out(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) out[i] = static_cast<float>(u[i] / norm);
  return EmbeddingVector(std::move(out));
}

struct State {
  Tape tape;
  EmbeddingVector embedding;
  double loss = 0.0;
  double d_orig = 0.0;
  double d_neg = 0.0;
};

}  // namespace

CloakResult cloak(const EmbedderModel& model, const Image& image,
                  const LabeledGallery& gallery, const StrategySpec& strategy,
                  const CloakOptions& options) {
  if (options.max_iterations_per_triplet < 1) {
    throw ConfigError("max iterations per triplet must be at least 1");
  }
  if (!(options.margin >= 0.0)) throw ConfigError("margin must be non-negative");
  const Tensor original_tensor = checked_image_tensor(image);
  for (float v : image.pixels()) {
    if (!(v >= 0.0f && v <= 255.0f)) throw ArgumentError("image pixels must lie in [0,255]");
  }

  const AttackGraph ag = build_attack_graph(model);
  const EmbeddingVector original = embed(model, image);
  const bool self_target = strategy.kind == StrategyKind::SelfTarget;
  const EmbeddingVector scatter = scatter_target(original);

  CloakResult result;
  result.original_image = image;
  result.negatives = select_negative_indices(strategy, original, gallery, options.margin);
  std::vector<EmbeddingVector> negatives;
  if (self_target) {
    negatives.push_back(original);
  } else {
    for (std::size_t i : result.negatives) negatives.push_back(gallery[i].embedding);
  }

  Image anchor = image;
  const Tensor positive = embedding_tensor(original);
  const Tensor margin({1}, std::vector<float>{static_cast<float>(options.margin)});

  try {
    for (std::size_t t = 0; t < negatives.size(); ++t) {
      const Tensor negative = embedding_tensor(negatives[t]);
      const auto evaluate = [&](const Image& img) {
        State s;
        const std::vector<Tensor> inputs = {img.to_tensor(), positive, negative, margin};
        s.tape.forward(ag.graph, model.params, inputs);
        s.embedding = tensor_embedding(s.tape.value(ag.embedding));
        s.loss = s.tape.value(ag.loss)[0];
        s.d_orig = embedding_distance(s.embedding, original);
        s.d_neg = embedding_distance(s.embedding, negatives[t]);
        return s;
      };

      State cur = evaluate(anchor);
      HaltReason reason = HaltReason::Continue;
      for (std::size_t it = 1; it <= options.max_iterations_per_triplet; ++it) {
        if (!self_target && cur.loss <= 0.0) {
          reason = HaltReason::LossZero;
          result.trace.push_back({t, it, cur.loss, cur.d_orig, cur.d_neg, 0.0, reason});
          break;
        }

        Tensor mask;
        if (self_target) {
          // The self-target loss is constant in the anchor. Its step instead
          // pulls the embedding toward a point on the sphere fixed by the
          // original embedding, so different images scatter apart.
          Tensor seed({kEmbeddingDim}, 0.0f);
          for (std::size_t k = 0; k < kEmbeddingDim; ++k) {
            seed[k] = cur.embedding[k] - scatter[k];
          }
          Tensor g = *cur.tape.backward_from(ag.embedding, seed, BackwardOptions{true, false})
                          .by_input;
          for (float& v : g.data()) v = -v;
          mask = normalize_mask(g);
        } else {
          Tensor g = *cur.tape.backward_from(ag.loss, Tensor({1}, 1.0f),
                                             BackwardOptions{true, false})
                          .by_input;
          for (float& v : g.data()) v = -v;
          mask = normalize_mask(g);
        }
        if (!mask.all_finite()) throw NumericError("non-finite noise mask");

        Image next = anchor;
        double mask_sum = 0.0;
        for (std::size_t i = 0; i < next.pixels().size(); ++i) {
          next.pixels()[i] += mask.values()[i];
          mask_sum += std::fabs(mask.values()[i]);
        }
        next.clamp();
        State moved = evaluate(next);

        if (moved.d_orig < cur.d_orig - kDisplacementTolerance) {
          // The step would bring the anchor back toward the original; keep
          // the current anchor and stop this triplet.
          reason = HaltReason::Stalled;
          result.trace.push_back({t, it, cur.loss, cur.d_orig, cur.d_neg, 0.0, reason});
          break;
        }
        const double prev_d_neg = cur.d_neg;
        anchor = std::move(next);
        cur = std::move(moved);
        reason = halt_check(self_target ? 1.0 : cur.loss, prev_d_neg, cur.d_neg,
                            options.stall_threshold);
        if (reason == HaltReason::Continue && it == options.max_iterations_per_triplet) {
          reason = HaltReason::IterationCap;
        }
        result.trace.push_back({t, it, cur.loss, cur.d_orig, cur.d_neg,
                                mask_sum / static_cast<double>(mask.values().size()), reason});
        if (reason != HaltReason::Continue) break;
      }
      result.triplet_halts.push_back(reason);
    }
  } catch (const CloakNumericError&) {
    throw;
  } catch (const NumericError& e) {
    throw CloakNumericError(std::string("cloaking aborted: ") + e.what(), result.trace);
  }

  result.cloaked_image = std::move(anchor);
  result.total_iterations = result.trace.size();
  result.dssim = dssim(image, result.cloaked_image);
  return result;
}

}  // namespace facecloak
