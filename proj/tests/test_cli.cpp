#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <sstream>

#include "facecloak/cli.hpp"
#include "facecloak/corpus.hpp"
#include "facecloak/embedder.hpp"
#include "support.hpp"

using namespace facecloak;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = 0;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  Run r;
  r.code = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::size_t count_lines(const std::string& text, const std::string& prefix) {
  std::size_t n = 0;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) n += line.rfind(prefix, 0) == 0;
  return n;
}

// A 4x6 synthetic corpus and a model trained on it for two epochs, created
// once per test binary.
struct Workspace {
  testing::TempDir dir{"cli"};
  fs::path corpus = dir.path() / "corpus";
  fs::path manifest = corpus / "manifest.tsv";
  fs::path model = dir.path() / "model.cfw";

  Workspace() {
    REQUIRE(run({"--seed", "0", "--quiet", "synth", "--identities", "4", "--per-identity", "6",
                 "--out", corpus.string()})
                .code == kExitOk);
    REQUIRE(run({"--seed", "1", "--quiet", "train", "--manifest", manifest.string(), "--epochs",
                 "2", "--out", model.string()})
                .code == kExitOk);
  }
};

Workspace& workspace() {
  static Workspace w;
  return w;
}

}  // namespace

TEST_CASE("seed is required and bad flags are configuration errors") {
  testing::TempDir dir("cli_flags");
  CHECK(run({"synth", "--out", dir.path().string()}).code == kExitConfig);
  CHECK(run({"--seed", "0"}).code == kExitConfig);
  CHECK(run({"--seed", "0", "--jobs", "0", "synth", "--out", dir.path().string()}).code ==
        kExitConfig);
  CHECK(run({"--seed", "0", "frobnicate"}).code == kExitConfig);
  CHECK(run({"--help"}).code == kExitOk);
}

TEST_CASE("synth writes the requested corpus reproducibly") {
  testing::TempDir dir("cli_synth");
  const auto a = dir.path() / "a", b = dir.path() / "b";
  const auto r = run({"--seed", "0", "synth", "--identities", "25", "--per-identity", "10",
                      "--out", a.string()});
  REQUIRE(r.code == kExitOk);
  CHECK_FALSE(r.out.empty());
  const auto m = read_manifest(a / "manifest.tsv");
  CHECK(m.entries.size() == 250);
  CHECK(std::distance(fs::directory_iterator(a / "images"), fs::directory_iterator{}) == 250);
  REQUIRE(run({"--seed", "0", "--quiet", "synth", "--identities", "25", "--per-identity", "10",
               "--out", b.string()})
              .code == kExitOk);
  CHECK(read_manifest(b / "manifest.tsv").fingerprint == m.fingerprint);
  CHECK(slurp(a / "manifest.tsv") == slurp(b / "manifest.tsv"));
  CHECK(slurp(a / "run.txt").find("config manifest_fingerprint ") != std::string::npos);
}

TEST_CASE("synth preconditions") {
  testing::TempDir dir("cli_synth_bad");
  const auto r = run({"--seed", "0", "synth", "--identities", "1", "--out", dir.path().string()});
  CHECK(r.code == kExitConfig);
  CHECK_FALSE(r.err.empty());
  CHECK(run({"--seed", "0", "synth", "--per-identity", "4", "--test-per-identity", "3", "--out",
             dir.path().string()})
            .code == kExitConfig);
}

TEST_CASE("synth can tag a test split") {
  testing::TempDir dir("cli_split");
  REQUIRE(run({"--seed", "0", "--quiet", "synth", "--identities", "3", "--per-identity", "5",
               "--test-per-identity", "2", "--out", dir.path().string()})
              .code == kExitOk);
  const auto m = read_manifest(dir.path() / "manifest.tsv");
  CHECK(std::count_if(m.entries.begin(), m.entries.end(),
                      [](const ManifestEntry& e) { return e.split == "test"; }) == 6);
}

TEST_CASE("train is byte-identical for identical flags") {
  auto& w = workspace();
  const auto again = w.dir.path() / "again.cfw";
  REQUIRE(run({"--seed", "1", "--quiet", "--jobs", "2", "train", "--manifest", w.manifest.string(),
               "--epochs", "2", "--out", again.string()})
              .code == kExitOk);
  CHECK(slurp(again) == slurp(w.model));
  CHECK_NOTHROW(load_model(w.model));
  const auto log = slurp(w.model.string() + ".txt");
  CHECK(log.rfind("facecloak-train 1\n", 0) == 0);
  CHECK(count_lines(log, "epoch ") == 2);
  CHECK(count_lines(log, "summary ") == 1);
}

TEST_CASE("train preconditions") {
  testing::TempDir dir("cli_train_bad");
  fs::create_directories(dir.path() / "images");
  Image img(96, 96, 100.0f);
  save_image(img, dir.path() / "images" / "a.ppm");
  save_image(img, dir.path() / "images" / "b.ppm");
  Manifest m;
  m.entries = {{"images/a.ppm", "solo", "train"}, {"images/b.ppm", "solo", "train"}};
  write_manifest(m, dir.path() / "manifest.tsv");
  CHECK(run({"--seed", "0", "train", "--manifest", (dir.path() / "manifest.tsv").string(), "--out",
             (dir.path() / "m.cfw").string()})
            .code == kExitConfig);
  CHECK(run({"--seed", "0", "train", "--manifest", (dir.path() / "none.tsv").string(), "--out",
             (dir.path() / "m.cfw").string()})
            .code == kExitConfig);

  std::ofstream(dir.path() / "bad.tsv") << "images/a.ppm\tsolo\n";
  CHECK(run({"--seed", "0", "train", "--manifest", (dir.path() / "bad.tsv").string(), "--out",
             (dir.path() / "m.cfw").string()})
            .code == kExitData);
}

TEST_CASE("self-target cloaks are identical across margins") {
  auto& w = workspace();
  const auto image = w.corpus / read_manifest(w.manifest).entries[3].path;
  std::vector<std::string> outputs;
  for (const char* margin : {"0.2", "2.0"}) {
    const auto out = w.dir.path() / (std::string("self_") + margin);
    const auto r = run({"--seed", "3", "--quiet", "cloak", "--model", w.model.string(), "--image",
                        image.string(), "--gallery", w.manifest.string(), "--strategy",
                        "self-target", "--margin", margin, "--max-iterations", "10", "--out",
                        out.string()});
    REQUIRE(r.code == kExitOk);
    outputs.push_back(slurp(out / image.filename()));
    CHECK_FALSE(outputs.back().empty());
  }
  CHECK(outputs[0] == outputs[1]);
}

TEST_CASE("cloak over a manifest writes images, traces and a summary") {
  auto& w = workspace();
  const auto out = w.dir.path() / "cloak_farthest";
  const auto r = run({"--seed", "3", "cloak", "--model", w.model.string(), "--manifest",
                      w.manifest.string(), "--strategy", "farthest", "--max-iterations", "4",
                      "--out", out.string()});
  REQUIRE(r.code == kExitOk);
  const auto summary = slurp(out / "summary.txt");
  CHECK(summary.rfind("facecloak-cloak 1\n", 0) == 0);
  CHECK(count_lines(summary, "image ") == 24);
  CHECK(summary.find("summary images 24 cloaked 24 infeasible 0\n") != std::string::npos);
  CHECK(count_lines(summary, "summary dssim ") == 1);
  CHECK(count_lines(summary, "summary iterations ") == 1);
  const auto cloaked = read_manifest(out / "manifest.tsv");
  REQUIRE(cloaked.entries.size() == 24);
  const auto trace = slurp(out / "traces" / fs::path(cloaked.entries[0].path).replace_extension(".tsv"));
  CHECK(trace.rfind("triplet\titeration\tloss\tdistance_to_original\tdistance_to_negative\t"
                    "mask_mean_abs\thalt\n",
                    0) == 0);
  CHECK_FALSE(r.out.empty());

  const auto quiet = w.dir.path() / "cloak_quiet";
  const auto q = run({"--seed", "3", "--quiet", "--jobs", "2", "cloak", "--model",
                      w.model.string(), "--manifest", w.manifest.string(), "--strategy",
                      "farthest", "--max-iterations", "4", "--out", quiet.string()});
  REQUIRE(q.code == kExitOk);
  CHECK(q.out.empty());
  CHECK(slurp(quiet / "summary.txt") == summary);
  CHECK(slurp(quiet / cloaked.entries[5].path) == slurp(out / cloaked.entries[5].path));
}

TEST_CASE("cloak preconditions and damaged inputs") {
  auto& w = workspace();
  const auto out = w.dir.path() / "cloak_bad";
  CHECK(run({"--seed", "0", "cloak", "--model", (w.dir.path() / "missing.cfw").string(),
             "--manifest", w.manifest.string(), "--out", out.string()})
            .code == kExitConfig);
  CHECK(run({"--seed", "0", "cloak", "--model", w.model.string(), "--out", out.string()}).code ==
        kExitConfig);
  CHECK(run({"--seed", "0", "cloak", "--model", w.model.string(), "--manifest",
             w.manifest.string(), "--strategy", "closest", "--out", out.string()})
            .code == kExitConfig);

  const auto broken = w.dir.path() / "broken.cfw";
  auto bytes = slurp(w.model);
  bytes.resize(bytes.size() / 3);
  std::ofstream(broken, std::ios::binary) << bytes;
  CHECK(run({"--seed", "0", "cloak", "--model", broken.string(), "--manifest",
             w.manifest.string(), "--out", out.string()})
            .code == kExitData);
}

TEST_CASE("eval roc emits the default 150-row sweep") {
  auto& w = workspace();
  const auto out = w.dir.path() / "eval_roc";
  REQUIRE(run({"--seed", "0", "--quiet", "eval", "--model", w.model.string(), "--manifest",
               w.manifest.string(), "--task", "roc", "--out", out.string()})
              .code == kExitOk);
  const auto csv = slurp(out / "roc_clear.csv");
  CHECK(csv.rfind("threshold,tp_rate,fp_rate\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 151);
}

TEST_CASE("eval identify reports all five methods") {
  auto& w = workspace();
  const auto out = w.dir.path() / "eval_identify";
  const std::vector<std::string> args = {
      "--seed", "0", "--quiet", "eval", "--model", w.model.string(), "--manifest",
      w.manifest.string(), "--task", "identify", "--scenario", "all-cloaked", "--people", "3",
      "--per-person", "3", "--probes-per-person", "2", "--repetitions", "5", "--strategy",
      "self-target", "--max-iterations", "3", "--out", out.string()};
  REQUIRE(run(args).code == kExitOk);
  const auto report = slurp(out / "identify_all-cloaked.txt");
  CHECK(report.rfind("facecloak-report 1\ntask identification\n", 0) == 0);
  CHECK(count_lines(report, "summary ") == 5);
  CHECK(count_lines(report, "rep ") == 25);
  CHECK(report.find("config scenario all-cloaked\n") != std::string::npos);

  auto parallel = args;
  parallel.insert(parallel.begin(), {"--jobs", "3"});
  parallel.back() = (w.dir.path() / "eval_identify_j3").string();
  REQUIRE(run(parallel).code == kExitOk);
  CHECK(slurp(w.dir.path() / "eval_identify_j3" / "identify_all-cloaked.txt") == report);
}

TEST_CASE("eval cluster reports both stop rules") {
  auto& w = workspace();
  const auto out = w.dir.path() / "eval_cluster";
  REQUIRE(run({"--seed", "0", "--quiet", "eval", "--model", w.model.string(), "--manifest",
               w.manifest.string(), "--task", "cluster", "--cloaked-fraction", "0.5", "--people",
               "3", "--per-person", "4", "--target-clusters", "3", "--repetitions", "3",
               "--strategy", "self-target", "--max-iterations", "3", "--out", out.string()})
              .code == kExitOk);
  const auto report = slurp(out / "cluster_f0.5.txt");
  CHECK(report.find("methods target-count-3 distance-threshold-1.242\n") != std::string::npos);
  CHECK(count_lines(report, "summary ") == 2);
}

TEST_CASE("eval verify and precondition failures") {
  auto& w = workspace();
  const auto out = w.dir.path() / "eval_verify";
  REQUIRE(run({"--seed", "0", "--quiet", "eval", "--model", w.model.string(), "--manifest",
               w.manifest.string(), "--task", "verify", "--threshold", "auto", "--strategy",
               "self-target", "--max-iterations", "3", "--out", out.string()})
              .code == kExitOk);
  const auto report = slurp(out / "verify.txt");
  CHECK(count_lines(report, "before ") == 1);
  CHECK(count_lines(report, "after ") == 1);
  CHECK(run({"--seed", "0", "eval", "--model", w.model.string(), "--manifest",
             w.manifest.string(), "--task", "identify", "--out", out.string()})
            .code == kExitConfig);
  CHECK(run({"--seed", "0", "eval", "--model", w.model.string(), "--manifest",
             w.manifest.string(), "--task", "dance", "--out", out.string()})
            .code == kExitConfig);
}
