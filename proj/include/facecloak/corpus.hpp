#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "facecloak/embedding.hpp"
#include "facecloak/image.hpp"

namespace facecloak {

struct ManifestEntry {
  std::string path;   // relative to the manifest's directory
  std::string label;
  std::string split;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

// Line-oriented `path<TAB>label<TAB>split`, UTF-8, LF endings.
struct Manifest {
  std::vector<ManifestEntry> entries;
  // FNV-1a over every entry's fields and the bytes of the file it names.
  std::uint64_t fingerprint = 0;
};

Manifest parse_manifest(const std::string& text);
std::string format_manifest(const Manifest& manifest);
Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);

// Images with integer labels. Label ids index `label_names`, which is sorted.
struct Corpus {
  std::vector<Image> images;
  std::vector<Label> labels;
  std::vector<std::string> label_names;
  std::vector<std::string> sources;
  Manifest manifest;

  std::size_t size() const noexcept { return images.size(); }
  std::size_t identity_count() const noexcept { return label_names.size(); }
  // Indices of images carrying `label`, in corpus order.
  std::vector<std::size_t> indices_of(Label label) const;
};

// Procedural face-like stand-ins. Identity i's base geometry depends on
// (seed, i) only and image j's jitter on (seed, i, j), so a corpus with more
// images per identity extends a smaller one with the same seed.
Image synthesize_face(std::uint64_t seed, std::size_t identity,
                      std::size_t index);
Corpus synthesize_corpus(std::size_t identities, std::size_t per_identity,
                         std::uint64_t seed);

// Writes `<dir>/images/idNNN_MMM.ppm` and `<dir>/manifest.tsv`; returns the
// manifest path and refreshes `corpus.manifest` (including fingerprint).
std::filesystem::path write_corpus(Corpus& corpus,
                                   const std::filesystem::path& dir);

// Loads every manifest entry; images not already 96x96 are center-cropped
// and resized. Entries whose split is in `exclude_splits` are skipped.
Corpus load_corpus(const std::filesystem::path& manifest_path,
                   std::vector<std::string>* warnings = nullptr,
                   const std::vector<std::string>& exclude_splits = {});

// Subset view helpers used by the experiment drivers.
Corpus subset(const Corpus& corpus, const std::vector<std::size_t>& indices);

}  // namespace facecloak
