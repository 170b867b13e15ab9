#include "facecloak/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>

#include "facecloak/cloak.hpp"
#include "facecloak/corpus.hpp"
#include "facecloak/embedder.hpp"
#include "facecloak/error.hpp"
#include "facecloak/evaluation.hpp"
#include "facecloak/metrics.hpp"
#include "facecloak/parallel.hpp"
#include "facecloak/random.hpp"

namespace facecloak {

namespace fs = std::filesystem;

namespace {

using RunConfig = std::vector<std::pair<std::string, std::string>>;

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

std::string hex64(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string join(const std::vector<std::string>& items, const char* sep = ",") {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? sep : "") + items[i];
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
  if (!out) throw ConfigError("failed writing " + path.string());
}

std::string config_block(const RunConfig& config) {
  std::string out;
  for (const auto& [key, value] : config) {
    out += "config " + key + " " + (value.empty() ? "-" : value) + "\n";
  }
  return out;
}

void write_run_file(const fs::path& dir, const RunConfig& config) {
  write_text(dir / "run.txt", "facecloak-run 1\n" + config_block(config));
}

void require_file(const fs::path& path, const char* what) {
  if (!fs::is_regular_file(path)) {
    throw ConfigError(std::string(what) + " not found: " + path.string());
  }
}

struct Global {
  std::uint64_t seed = 0;
  bool quiet = false;
  std::size_t jobs = 1;
};

class Printer {
 public:
  Printer(std::ostream& out, bool quiet) : out_(out), quiet_(quiet) {}
  void line(const std::string& text) {
    if (!quiet_) out_ << text << '\n';
  }

 private:
  std::ostream& out_;
  bool quiet_;
};

void print_warnings(std::ostream& err, const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) err << "warning: " << w << '\n';
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::size_t identities = 25;
  std::size_t per_identity = 10;
  std::size_t test_per_identity = 0;
  std::string out;
};

void cmd_synth(const SynthArgs& a, const Global& g, std::ostream& out) {
  if (a.test_per_identity > 0 && a.test_per_identity + 2 > a.per_identity) {
    throw ConfigError("--test-per-identity must leave at least 2 training images per identity");
  }
  Corpus corpus = synthesize_corpus(a.identities, a.per_identity, g.seed);
  if (a.test_per_identity > 0) {
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      const bool test = i % a.per_identity >= a.per_identity - a.test_per_identity;
      corpus.manifest.entries[i].split = test ? "test" : "train";
    }
  }
  const fs::path manifest = write_corpus(corpus, a.out);
  write_run_file(a.out, {{"subcommand", "synth"},
                         {"seed", std::to_string(g.seed)},
                         {"identities", std::to_string(a.identities)},
                         {"per_identity", std::to_string(a.per_identity)},
                         {"test_per_identity", std::to_string(a.test_per_identity)},
                         {"manifest", manifest.string()},
                         {"manifest_fingerprint", hex64(corpus.manifest.fingerprint)}});
  Printer p(out, g.quiet);
  p.line("wrote " + std::to_string(corpus.size()) + " images and " + manifest.string());
  p.line("fingerprint " + hex64(corpus.manifest.fingerprint));
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string manifest;
  std::string out;
  std::size_t epochs = 30;
  double learning_rate = 0.1;
  double margin = 0.2;
  std::vector<std::string> exclude_splits;
};

void cmd_train(const TrainArgs& a, const Global& g, std::ostream& out, std::ostream& err) {
  require_file(a.manifest, "manifest");
  std::vector<std::string> warnings;
  const Corpus corpus = load_corpus(a.manifest, &warnings, a.exclude_splits);
  print_warnings(err, warnings);

  Printer p(out, g.quiet);
  std::string log;
  TrainOptions o;
  o.epochs = a.epochs;
  o.learning_rate = a.learning_rate;
  o.margin = a.margin;
  o.seed = g.seed;
  o.jobs = g.jobs;
  o.corpus_fingerprint = corpus.manifest.fingerprint;
  o.on_epoch = [&](const EpochStats& s) {
    const std::string line = "epoch " + std::to_string(s.epoch) + " loss " +
                             fixed6(s.mean_loss) + " active " + fixed6(s.active_fraction);
    log += line + "\n";
    p.line(line);
  };
  const EmbedderModel model = train(corpus.images, corpus.labels, o);
  save_model(model, a.out);

  const RunConfig config = {{"subcommand", "train"},
                            {"seed", std::to_string(g.seed)},
                            {"manifest", a.manifest},
                            {"manifest_fingerprint", hex64(corpus.manifest.fingerprint)},
                            {"exclude_splits", join(a.exclude_splits)},
                            {"images", std::to_string(corpus.size())},
                            {"identities", std::to_string(corpus.identity_count())},
                            {"epochs", std::to_string(a.epochs)},
                            {"learning_rate", shortest(a.learning_rate)},
                            {"margin", shortest(a.margin)},
                            {"model", a.out}};
  write_text(a.out + ".txt", "facecloak-train 1\n" + config_block(config) + log +
                                 "summary initial_loss " + fixed6(model.metadata.initial_loss) +
                                 " final_loss " + fixed6(model.metadata.final_loss) + "\n");
  p.line("saved " + a.out + " (loss " + fixed6(model.metadata.initial_loss) + " -> " +
         fixed6(model.metadata.final_loss) + ")");
}

// ---------------------------------------------------------------------------
// cloak

struct StrategyArgs {
  std::string strategy = "self-target";
  double margin = 1.0;
  std::size_t k = 5;
  std::size_t max_iterations = kDefaultIterationCap;
};

CloakOptions cloak_options(const StrategyArgs& s) {
  CloakOptions o;
  o.margin = s.margin;
  o.max_iterations_per_triplet = s.max_iterations;
  return o;
}

struct CloakArgs {
  std::string model;
  std::string manifest;
  std::string image;
  std::string gallery;
  std::string out;
  std::vector<std::string> exclude_splits;
  StrategyArgs strategy;
};

std::string trace_text(const std::vector<TraceEntry>& trace) {
  std::string out =
      "triplet\titeration\tloss\tdistance_to_original\tdistance_to_negative\t"
      "mask_mean_abs\thalt\n";
  for (const auto& t : trace) {
    out += std::to_string(t.triplet) + "\t" + std::to_string(t.iteration) + "\t" +
           fixed6(t.loss) + "\t" + fixed6(t.distance_to_original) + "\t" +
           fixed6(t.distance_to_negative) + "\t" + fixed6(t.mask_mean_abs) + "\t" +
           std::string(halt_name(t.halt)) + "\n";
  }
  return out;
}

struct CloakOutcome {
  bool infeasible = false;
  Image cloaked;
  std::vector<TraceEntry> trace;
  std::vector<HaltReason> halts;
  double dssim = 0.0;
  std::size_t iterations = 0;
};

void cmd_cloak(const CloakArgs& a, const Global& g, std::ostream& out, std::ostream& err) {
  if (a.manifest.empty() == a.image.empty()) {
    throw ConfigError("cloak needs exactly one of --manifest or --image");
  }
  if (!a.gallery.empty() && a.image.empty()) {
    throw ConfigError("--gallery only applies to --image; a manifest is its own gallery");
  }
  require_file(a.model, "model file");
  const StrategySpec base{parse_strategy(a.strategy.strategy), a.strategy.k, g.seed};
  const CloakOptions options = cloak_options(a.strategy);
  const EmbedderModel model = load_model(a.model);

  std::vector<std::string> warnings;
  std::vector<Image> targets;
  std::vector<std::string> names;
  std::vector<ManifestEntry> entries;
  LabeledGallery gallery;
  std::uint64_t fingerprint = 0;
  const bool single = !a.image.empty();
  if (single) {
    require_file(a.image, "image");
    Image img = load_image(a.image, &warnings);
    if (img.height() != kImageSide || img.width() != kImageSide) img = preprocess(img);
    targets.push_back(std::move(img));
    names.push_back(fs::path(a.image).filename().replace_extension(".ppm").string());
    if (!a.gallery.empty()) {
      require_file(a.gallery, "gallery manifest");
      const Corpus gc = load_corpus(a.gallery, &warnings, a.exclude_splits);
      fingerprint = gc.manifest.fingerprint;
      const auto emb = embed_all(model, gc.images, g.jobs);
      for (std::size_t i = 0; i < gc.size(); ++i) {
        gallery.push_back({emb[i], gc.labels[i], gc.sources[i]});
      }
    }
  } else {
    require_file(a.manifest, "manifest");
    Corpus corpus = load_corpus(a.manifest, &warnings, a.exclude_splits);
    fingerprint = corpus.manifest.fingerprint;
    const auto emb = embed_all(model, corpus.images, g.jobs);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      gallery.push_back({emb[i], corpus.labels[i], corpus.sources[i]});
      names.push_back(corpus.manifest.entries[i].path);
      entries.push_back(corpus.manifest.entries[i]);
    }
    targets = std::move(corpus.images);
  }
  print_warnings(err, warnings);

  std::vector<CloakOutcome> outcomes(targets.size());
  parallel_for(targets.size(), g.jobs, [&](std::size_t i) {
    LabeledGallery others;
    for (std::size_t j = 0; j < gallery.size(); ++j) {
      if (single || j != i) others.push_back(gallery[j]);
    }
    StrategySpec s = base;
    s.seed = derive_seed(g.seed, i);
    CloakOutcome& o = outcomes[i];
    try {
      CloakResult r = cloak(model, targets[i], others, s, options);
      o.cloaked = r.cloaked_image.quantized();
      o.trace = std::move(r.trace);
      o.halts = std::move(r.triplet_halts);
      o.dssim = r.dssim;
      o.iterations = r.total_iterations;
    } catch (const StrategyInfeasibleError&) {
      if (single) throw;
      o.infeasible = true;
    } catch (const CloakNumericError& e) {
      write_text(fs::path(a.out) / "traces" / fs::path(names[i]).replace_extension(".tsv"),
                 trace_text(e.partial_trace));
      throw;
    }
  });

  const RunConfig config = {{"subcommand", "cloak"},
                            {"seed", std::to_string(g.seed)},
                            {"model", a.model},
                            {"input", single ? a.image : a.manifest},
                            {"gallery", single ? a.gallery : a.manifest},
                            {"gallery_fingerprint", hex64(fingerprint)},
                            {"exclude_splits", join(a.exclude_splits)},
                            {"strategy", std::string(strategy_name(base.kind))},
                            {"k", std::to_string(base.k)},
                            {"margin", shortest(options.margin)},
                            {"max_iterations", std::to_string(options.max_iterations_per_triplet)}};
  write_run_file(a.out, config);

  std::string summary = "facecloak-cloak 1\n" + config_block(config);
  Manifest cloaked_manifest;
  std::vector<double> dssims;
  std::size_t total_iterations = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const CloakOutcome& o = outcomes[i];
    if (o.infeasible) {
      summary += "image " + names[i] + " status infeasible\n";
      continue;
    }
    const fs::path target = fs::path(a.out) / names[i];
    fs::create_directories(target.parent_path());
    save_image(o.cloaked, target);
    write_text(fs::path(a.out) / "traces" / fs::path(names[i]).replace_extension(".tsv"),
               trace_text(o.trace));
    if (!single) cloaked_manifest.entries.push_back(entries[i]);
    std::vector<std::string> halts;
    for (HaltReason h : o.halts) halts.emplace_back(halt_name(h));
    summary += "image " + names[i] + " status ok dssim " + fixed6(o.dssim) + " iterations " +
               std::to_string(o.iterations) + " halts " + (halts.empty() ? "-" : join(halts)) +
               "\n";
    dssims.push_back(o.dssim);
    total_iterations += o.iterations;
  }
  double mean = 0.0, max = 0.0, var = 0.0;
  for (double d : dssims) {
    mean += d;
    max = std::max(max, d);
  }
  if (!dssims.empty()) mean /= static_cast<double>(dssims.size());
  for (double d : dssims) var += (d - mean) * (d - mean);
  const double stddev = dssims.empty() ? 0.0 : std::sqrt(var / static_cast<double>(dssims.size()));
  summary += "summary images " + std::to_string(targets.size()) + " cloaked " +
             std::to_string(dssims.size()) + " infeasible " +
             std::to_string(targets.size() - dssims.size()) + "\n";
  summary += "summary dssim mean " + fixed6(mean) + " max " + fixed6(max) + " stddev " +
             fixed6(stddev) + "\n";
  summary += "summary iterations total " + std::to_string(total_iterations) + "\n";
  write_text(fs::path(a.out) / "summary.txt", summary);
  if (!single) write_manifest(cloaked_manifest, fs::path(a.out) / "manifest.tsv");

  Printer p(out, g.quiet);
  p.line("cloaked " + std::to_string(dssims.size()) + "/" + std::to_string(targets.size()) +
         " images with " + std::string(strategy_name(base.kind)) + " (margin " +
         shortest(options.margin) + ")");
  p.line("dssim mean " + fixed6(mean) + " max " + fixed6(max) + " stddev " + fixed6(stddev));
  if (dssims.size() != targets.size()) {
    p.line("infeasible " + std::to_string(targets.size() - dssims.size()) +
           " (no admissible negative; left uncloaked and omitted)");
  }
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string model;
  std::string manifest;
  std::string task;
  std::string out;
  std::vector<std::string> exclude_splits;
  StrategyArgs strategy;
  std::string scenario = "all";
  std::vector<double> cloaked_fractions = {0.0, 0.1, 0.5, 1.0};
  std::size_t repetitions = 100;
  std::size_t people = 20;
  std::size_t per_person = 20;
  std::size_t probes_per_person = 10;
  bool shuffle_labels = false;
  std::string threshold = "1.242";
  double max_fp = 0.10;
  bool ordered_pairs = false;
  std::size_t target_clusters = 20;
  double distance_threshold = kDistanceBound;
  double roc_start = 0.0;
  double roc_step = 0.02;
  double roc_stop = 3.0;
  bool with_cloaked = false;
  std::vector<std::size_t> breadths = {2, 5, 10, 15, 20, 25};
  std::vector<std::size_t> depths = {5, 10};
};

std::string embeddings_tsv(const std::vector<EmbeddingVector>& emb, const Corpus& corpus) {
  std::string out = "source\tlabel";
  for (std::size_t k = 0; k < kEmbeddingDim; ++k) out += "\te" + std::to_string(k);
  out += "\n";
  char buf[32];
  for (std::size_t i = 0; i < emb.size(); ++i) {
    out += corpus.sources[i] + "\t" + corpus.label_names[corpus.labels[i]];
    for (std::size_t k = 0; k < emb[i].size(); ++k) {
      std::snprintf(buf, sizeof buf, "\t%.9g", static_cast<double>(emb[i][k]));
      out += buf;
    }
    out += "\n";
  }
  return out;
}

std::string verification_line(const char* tag, const VerificationReport& r) {
  return std::string(tag) + " threshold " + fixed6(r.threshold) + " tp_rate " +
         fixed6(r.true_positive_rate) + " fp_rate " + fixed6(r.false_positive_rate) +
         " matching_pairs " + std::to_string(r.matching_pairs) + " mismatching_pairs " +
         std::to_string(r.mismatching_pairs) + " true_positives " +
         std::to_string(r.true_positives) + " false_positives " +
         std::to_string(r.false_positives) + "\n";
}

void cmd_eval(const EvalArgs& a, const Global& g, std::ostream& out, std::ostream& err) {
  require_file(a.model, "model file");
  require_file(a.manifest, "manifest");
  const StrategySpec strategy{parse_strategy(a.strategy.strategy), a.strategy.k, g.seed};
  const CloakOptions options = cloak_options(a.strategy);
  std::vector<Scenario> scenarios;
  if (a.scenario == "all") {
    scenarios = {Scenario::AllClear, Scenario::ClearGalleryCloakedProbes, Scenario::AllCloaked};
  } else {
    scenarios = {parse_scenario(a.scenario)};
  }
  for (double f : a.cloaked_fractions) {
    if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("--cloaked-fraction must lie in [0, 1]");
  }
  const bool needs_cloak =
      (a.task == "verify") || (a.with_cloaked && (a.task == "roc" || a.task == "embed")) ||
      (a.task == "identify" &&
       std::any_of(scenarios.begin(), scenarios.end(),
                   [](Scenario s) { return s != Scenario::AllClear; })) ||
      (a.task == "cluster" && std::any_of(a.cloaked_fractions.begin(),
                                          a.cloaked_fractions.end(),
                                          [](double f) { return f > 0.0; }));

  const EmbedderModel model = load_model(a.model);
  std::vector<std::string> warnings;
  const Corpus corpus = load_corpus(a.manifest, &warnings, a.exclude_splits);
  print_warnings(err, warnings);
  const EmbeddedCorpus ec = needs_cloak
                                ? prepare_corpus(corpus, model, strategy, options, g.jobs)
                                : embed_corpus(corpus, model, g.jobs);
  const std::uint64_t repetition_seed = derive_seed(g.seed, 0x2E95);

  RunConfig config = {{"subcommand", "eval"},
                      {"task", a.task},
                      {"seed", std::to_string(g.seed)},
                      {"model", a.model},
                      {"manifest", a.manifest},
                      {"manifest_fingerprint", hex64(corpus.manifest.fingerprint)},
                      {"exclude_splits", join(a.exclude_splits)},
                      {"cloaking", needs_cloak ? "yes" : "no"}};
  if (needs_cloak) {
    config.emplace_back("strategy", std::string(strategy_name(strategy.kind)));
    config.emplace_back("k", std::to_string(strategy.k));
    config.emplace_back("margin", shortest(options.margin));
    config.emplace_back("max_iterations", std::to_string(options.max_iterations_per_triplet));
    config.emplace_back("infeasible", std::to_string(ec.infeasible));
  }
  const fs::path dir = a.out;
  Printer p(out, g.quiet);

  const auto write_report = [&](ExperimentReport report, const std::string& file) {
    RunConfig merged = config;
    for (auto& kv : report.config) {
      const bool dup = std::any_of(merged.begin(), merged.end(),
                                   [&](const auto& m) { return m.first == kv.first; });
      if (!dup) merged.push_back(kv);
    }
    report.config = std::move(merged);
    write_text(dir / file, report.serialize());
    std::string line = report.task + " [" + file + "]";
    for (std::size_t m = 0; m < report.methods.size(); ++m) {
      line += "\n  " + report.methods[m] + " " + fixed6(report.mean(m));
    }
    p.line(line);
  };

  if (a.task == "verify") {
    double threshold = 0.0;
    if (a.threshold == "auto") {
      threshold = threshold_at_fp(DistanceMatrix(ec.gallery(false), g.jobs), a.max_fp);
      config.emplace_back("threshold", "auto");
      config.emplace_back("max_fp", shortest(a.max_fp));
    } else {
      try {
        std::size_t used = 0;
        threshold = std::stod(a.threshold, &used);
        if (used != a.threshold.size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw ArgumentError("--threshold must be a number or 'auto'");
      }
      config.emplace_back("threshold", a.threshold);
    }
    const PairCounting counting =
        a.ordered_pairs ? PairCounting::Ordered : PairCounting::Unordered;
    config.emplace_back("pair_counting", a.ordered_pairs ? "ordered" : "unordered");
    const VerificationPair v = run_verification(ec, threshold, counting);
    double mean = 0.0, max = 0.0;
    for (double d : ec.dssim) {
      mean += d;
      max = std::max(max, d);
    }
    mean /= static_cast<double>(std::max<std::size_t>(1, ec.size()));
    write_text(dir / "verify.txt", "facecloak-report 1\ntask verification\n" +
                                       config_block(config) + verification_line("before", v.before) +
                                       verification_line("after", v.after) + "cloak dssim_mean " +
                                       fixed6(mean) + " dssim_max " + fixed6(max) + "\n");
    p.line("verification at threshold " + fixed6(threshold));
    p.line("  before tp " + fixed6(v.before.true_positive_rate) + " fp " +
           fixed6(v.before.false_positive_rate));
    p.line("  after  tp " + fixed6(v.after.true_positive_rate) + " fp " +
           fixed6(v.after.false_positive_rate));
  } else if (a.task == "roc") {
    const RocCurve clear =
        roc_sweep(DistanceMatrix(ec.gallery(false), g.jobs), a.roc_start, a.roc_step, a.roc_stop);
    write_text(dir / "roc_clear.csv", roc_to_csv(clear));
    p.line("roc_clear.csv: " + std::to_string(clear.points.size()) + " points");
    if (a.with_cloaked) {
      const RocCurve cloaked = roc_sweep(DistanceMatrix(ec.gallery(true), g.jobs), a.roc_start,
                                         a.roc_step, a.roc_stop);
      write_text(dir / "roc_cloaked.csv", roc_to_csv(cloaked));
      p.line("roc_cloaked.csv: " + std::to_string(cloaked.points.size()) + " points");
    }
    config.emplace_back("roc", shortest(a.roc_start) + ":" + shortest(a.roc_step) + ":" +
                                   shortest(a.roc_stop));
  } else if (a.task == "identify") {
    for (Scenario s : scenarios) {
      IdentificationConfig c;
      c.repetitions = a.repetitions;
      c.people = a.people;
      c.per_person = a.per_person;
      c.probes_per_person = a.probes_per_person;
      c.scenario = s;
      c.shuffle_labels = a.shuffle_labels;
      c.seed = repetition_seed;
      c.jobs = g.jobs;
      write_report(run_identification(ec, c),
                   "identify_" + std::string(scenario_name(s)) +
                       (a.shuffle_labels ? "_shuffled" : "") + ".txt");
    }
  } else if (a.task == "cluster") {
    for (double f : a.cloaked_fractions) {
      ClusteringConfig c;
      c.repetitions = a.repetitions;
      c.people = a.people;
      c.per_person = a.per_person;
      c.cloaked_fraction = f;
      c.target_clusters = a.target_clusters;
      c.distance_threshold = a.distance_threshold;
      c.seed = repetition_seed;
      c.jobs = g.jobs;
      write_report(run_clustering(ec, c), "cluster_f" + shortest(f) + ".txt");
    }
  } else if (a.task == "dataset-size") {
    DatasetSizeConfig c;
    c.breadths = a.breadths;
    c.depths = a.depths;
    c.repetitions = a.repetitions;
    c.seed = repetition_seed;
    write_report(run_dataset_size_study(ec, c), "dataset_size.txt");
  } else if (a.task == "embed") {
    write_text(dir / "embeddings_clear.tsv", embeddings_tsv(ec.clear, corpus));
    if (a.with_cloaked) write_text(dir / "embeddings_cloaked.tsv", embeddings_tsv(ec.cloaked, corpus));
    p.line("exported " + std::to_string(ec.size()) + " embeddings");
  }
  write_run_file(dir, config);
}

void add_strategy_flags(CLI::App* cmd, StrategyArgs& s) {
  cmd->add_option("--strategy", s.strategy,
                  "farthest | random-k | farthest-plus-random | most-similar | self-target")
      ->capture_default_str();
  cmd->add_option("--margin", s.margin, "Attack margin")->capture_default_str();
  cmd->add_option("--k", s.k, "Random negatives for random-k strategies")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cmd->add_option("--max-iterations", s.max_iterations, "Per-triplet iteration cap")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Face cloaking against embedding-based recognition", "facecloak"};
  app.require_subcommand(1);
  app.fallthrough();
  Global g;
  app.add_option("--seed", g.seed, "Seed for all randomness")->required();
  app.add_flag("--quiet", g.quiet, "Suppress the human summary on stdout");
  app.add_option("--jobs", g.jobs, "Worker threads")->check(CLI::PositiveNumber)->capture_default_str();

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic identity corpus");
  s->add_option("--identities", synth.identities)->capture_default_str();
  s->add_option("--per-identity", synth.per_identity)->capture_default_str();
  s->add_option("--test-per-identity", synth.test_per_identity,
                "Tag the last N images of each identity as split 'test' (others 'train')")
      ->capture_default_str();
  s->add_option("--out", synth.out, "Output directory")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train the embedder with triplet loss");
  t->add_option("--manifest", tr.manifest)->required();
  t->add_option("--out", tr.out, "Model file to write")->required();
  t->add_option("--epochs", tr.epochs)->check(CLI::PositiveNumber)->capture_default_str();
  t->add_option("--lr", tr.learning_rate)->capture_default_str();
  t->add_option("--margin", tr.margin, "Training margin")->capture_default_str();
  t->add_option("--exclude-split", tr.exclude_splits, "Skip manifest entries with this split");

  CloakArgs ck;
  auto* c = app.add_subcommand("cloak", "Cloak a corpus or a single image");
  c->add_option("--model", ck.model)->required();
  c->add_option("--manifest", ck.manifest, "Cloak every image; the rest form the gallery");
  c->add_option("--image", ck.image, "Cloak one image");
  c->add_option("--gallery", ck.gallery, "Negative gallery manifest for --image");
  c->add_option("--out", ck.out, "Output directory")->required();
  c->add_option("--exclude-split", ck.exclude_splits, "Skip manifest entries with this split");
  add_strategy_flags(c, ck.strategy);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Verification, ROC, identification and clustering");
  e->add_option("--model", ev.model)->required();
  e->add_option("--manifest", ev.manifest)->required();
  e->add_option("--task", ev.task)
      ->required()
      ->check(CLI::IsMember({"verify", "roc", "identify", "cluster", "dataset-size", "embed"}));
  e->add_option("--out", ev.out, "Output directory")->required();
  e->add_option("--exclude-split", ev.exclude_splits, "Skip manifest entries with this split");
  add_strategy_flags(e, ev.strategy);
  e->add_option("--scenario", ev.scenario, "all | all-clear | clear-gallery | all-cloaked")
      ->capture_default_str();
  e->add_option("--cloaked-fraction", ev.cloaked_fractions)->capture_default_str();
  e->add_option("--repetitions", ev.repetitions)->check(CLI::PositiveNumber)->capture_default_str();
  e->add_option("--people", ev.people)->capture_default_str();
  e->add_option("--per-person", ev.per_person)->capture_default_str();
  e->add_option("--probes-per-person", ev.probes_per_person)->capture_default_str();
  e->add_flag("--shuffle-labels", ev.shuffle_labels, "Chance-level control");
  e->add_option("--threshold", ev.threshold, "Verification threshold, or 'auto'")
      ->capture_default_str();
  e->add_option("--max-fp", ev.max_fp, "False-positive bound for --threshold auto")
      ->capture_default_str();
  e->add_flag("--ordered-pairs", ev.ordered_pairs, "Count each pair in both orders");
  e->add_option("--target-clusters", ev.target_clusters)->capture_default_str();
  e->add_option("--distance-threshold", ev.distance_threshold)->capture_default_str();
  e->add_option("--roc-start", ev.roc_start)->capture_default_str();
  e->add_option("--roc-step", ev.roc_step)->capture_default_str();
  e->add_option("--roc-stop", ev.roc_stop)->capture_default_str();
  e->add_flag("--with-cloaked", ev.with_cloaked, "Also emit cloaked ROC/embeddings");
  e->add_option("--breadths", ev.breadths)->capture_default_str();
  e->add_option("--depths", ev.depths)->capture_default_str();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*s) cmd_synth(synth, g, out);
    if (*t) cmd_train(tr, g, out, err);
    if (*c) cmd_cloak(ck, g, out, err);
    if (*e) cmd_eval(ev, g, out, err);
    return kExitOk;
  } catch (const ConfigError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitConfig;
  } catch (const StateError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitConfig;
  } catch (const StrategyInfeasibleError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitConfig;
  } catch (const FormatError& ex) {
    err << "data error: " << ex.what() << '\n';
    return kExitData;
  } catch (const StructuralError& ex) {
    err << "data error: " << ex.what() << '\n';
    return kExitData;
  } catch (const NumericError& ex) {
    err << "numeric error: " << ex.what() << '\n';
    return kExitNumeric;
  } catch (const fs::filesystem_error& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& ex) {
    err << "internal error: " << ex.what() << '\n';
    return 1;
  }
}

}  // namespace facecloak
