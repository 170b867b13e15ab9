#include "facecloak/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "facecloak/error.hpp"
#include "facecloak/hash.hpp"
#include "facecloak/random.hpp"

namespace facecloak {

// ---------------------------------------------------------------------------
// Manifest

Manifest parse_manifest(const std::string& text) {
  Manifest m;
  std::set<std::string> seen;
  std::size_t offset = 0;
  while (offset < text.size()) {
    std::size_t end = text.find('\n', offset);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(offset, end - offset);
    if (!line.empty()) {
      if (line.back() == '\r') {
        throw FormatError("manifest lines must end with LF only", end - 1);
      }
      const auto t1 = line.find('\t');
      const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
      if (t1 == std::string::npos || t2 == std::string::npos ||
          line.find('\t', t2 + 1) != std::string::npos) {
        throw FormatError("manifest line must have exactly three tab-separated fields",
                          offset);
      }
      ManifestEntry e{line.substr(0, t1), line.substr(t1 + 1, t2 - t1 - 1),
                      line.substr(t2 + 1)};
      if (e.path.empty()) throw FormatError("empty path in manifest", offset);
      if (e.label.empty()) throw FormatError("empty label in manifest", offset + t1 + 1);
      if (!seen.insert(e.path).second) {
        throw FormatError("duplicate manifest path: " + e.path, offset);
      }
      m.entries.push_back(std::move(e));
    }
    offset = end + 1;
  }
  return m;
}

std::string format_manifest(const Manifest& manifest) {
  std::string out;
  for (const auto& e : manifest.entries) {
    out += e.path + '\t' + e.label + '\t' + e.split + '\n';
  }
  return out;
}

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open file: " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

std::uint64_t chain_entry(std::uint64_t state, const ManifestEntry& e,
                          std::span<const unsigned char> bytes) {
  state = fnv1a64(e.path + '\t' + e.label + '\t' + e.split + '\n', state);
  return fnv1a64(bytes, state);
}

std::span<const unsigned char> as_bytes(const std::string& s) {
  return {reinterpret_cast<const unsigned char*>(s.data()), s.size()};
}

}  // namespace

Manifest read_manifest(const std::filesystem::path& path) {
  Manifest m = parse_manifest(read_file(path));
  std::uint64_t state = kFnvOffset;
  const auto dir = path.parent_path();
  for (const auto& e : m.entries) {
    const std::string bytes = read_file(dir / e.path);
    state = chain_entry(state, e, as_bytes(bytes));
  }
  m.fingerprint = state;
  return m;
}

void write_manifest(const Manifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write manifest: " + path.string());
  out << format_manifest(manifest);
}

std::vector<std::size_t> Corpus::indices_of(Label label) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == label) out.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic faces

namespace {

struct Rgb {
  double r, g, b;
};

Rgb random_color(Rng& rng, double lo, double hi) {
  return {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)};
}

Rgb mix(const Rgb& a, const Rgb& b, double t) {
  return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

// Coverage of a pixel by a shape whose signed distance (pixels, negative
// inside) is `d`: a one-pixel linear ramp.
double coverage(double d) { return std::clamp(0.5 - d, 0.0, 1.0); }

double ellipse_distance(double x, double y, double cx, double cy, double a,
                        double b) {
  const double dx = (x - cx) / a;
  const double dy = (y - cy) / b;
  return (std::sqrt(dx * dx + dy * dy) - 1.0) * std::min(a, b);
}

double segment_distance(double x, double y, double x0, double y0, double x1,
                        double y1) {
  const double vx = x1 - x0, vy = y1 - y0;
  const double t = std::clamp(((x - x0) * vx + (y - y0) * vy) /
                                  (vx * vx + vy * vy), 0.0, 1.0);
  const double px = x0 + t * vx - x, py = y0 + t * vy - y;
  return std::sqrt(px * px + py * py);
}

// Smooth random field: unit-variance normals on a square lattice, bilinearly
// interpolated. Covers canonical coordinates [-24, 120).
class ValueNoise {
 public:
  ValueNoise(Rng& rng, double cell) : cell_(cell), side_(static_cast<std::size_t>(144 / cell) + 2) {
    values_.resize(side_ * side_);
    for (double& v : values_) v = rng.normal();
  }

  double operator()(double x, double y) const {
    const double gx = std::clamp((x + 24.0) / cell_, 0.0, side_ - 1.001);
    const double gy = std::clamp((y + 24.0) / cell_, 0.0, side_ - 1.001);
    const auto ix = static_cast<std::size_t>(gx), iy = static_cast<std::size_t>(gy);
    const double fx = gx - ix, fy = gy - iy;
    const auto at = [&](std::size_t a, std::size_t b) { return values_[b * side_ + a]; };
    return (at(ix, iy) * (1 - fx) + at(ix + 1, iy) * fx) * (1 - fy) +
           (at(ix, iy + 1) * (1 - fx) + at(ix + 1, iy + 1) * fx) * fy;
  }

 private:
  double cell_;
  std::size_t side_;
  std::vector<double> values_;
};

struct IdentityTraits {
  Rgb skin, hair, iris, lips, brow;
  double face_a, face_b, face_dy;
  double hairline;     // fraction of the face half-height covered by hair
  double hair_volume;  // extra radius of the hair mass
  double eye_y, eye_dx, eye_w, eye_h, iris_r;
  double brow_gap, brow_tilt, brow_thick;
  double nose_len, nose_w;
  double mouth_y, mouth_w, mouth_h;
  double strand_freq;  // hair texture, radians per pixel
  bool glasses, beard;
  struct Mark {
    double x, y, r;
  };
  std::vector<Mark> marks;
};

IdentityTraits identity_traits(std::uint64_t seed, std::size_t identity) {
  Rng rng(derive_seed(seed, 0x1D000000ull + identity));
  IdentityTraits t;
  const double tone = rng.uniform(0.0, 1.0);
  t.skin = mix({235, 200, 170}, {110, 70, 45}, tone);
  t.skin.r += rng.uniform(-12, 12);
  t.skin.g += rng.uniform(-12, 12);
  static constexpr Rgb kHairPalette[] = {
      {25, 20, 18}, {70, 45, 30}, {120, 80, 45}, {200, 165, 100}, {150, 60, 30}, {160, 160, 160}};
  t.hair = kHairPalette[rng.below(std::size(kHairPalette))];
  t.hair = mix(t.hair, random_color(rng, 20, 200), rng.uniform(0.0, 0.3));
  t.brow = mix(t.hair, {20, 15, 10}, 0.4);
  t.iris = random_color(rng, 30, 170);
  t.lips = mix(t.skin, {170, 40, 60}, rng.uniform(0.35, 0.8));
  t.face_a = rng.uniform(24, 33);
  t.face_b = rng.uniform(31, 40);
  t.face_dy = rng.uniform(-2, 6);
  t.hairline = rng.uniform(0.25, 0.7);
  t.hair_volume = rng.uniform(1, 9);
  t.eye_y = rng.uniform(-14, -4);
  t.eye_dx = rng.uniform(8, 15);
  t.eye_w = rng.uniform(4, 7);
  t.eye_h = rng.uniform(2, 4);
  t.iris_r = rng.uniform(1.5, 2.6);
  t.brow_gap = rng.uniform(4, 8);
  t.brow_tilt = rng.uniform(-3, 3);
  t.brow_thick = rng.uniform(1, 3);
  t.nose_len = rng.uniform(6, 14);
  t.nose_w = rng.uniform(2, 5);
  t.mouth_y = rng.uniform(12, 22);
  t.mouth_w = rng.uniform(7, 15);
  t.mouth_h = rng.uniform(1.5, 4);
  t.strand_freq = rng.uniform(0.9, 2.2);
  t.glasses = rng.uniform() < 0.3;
  t.beard = rng.uniform() < 0.25;
  const std::size_t marks = rng.below(4);
  for (std::size_t k = 0; k < marks; ++k) {
    t.marks.push_back({rng.uniform(-18, 18), rng.uniform(-6, 20), rng.uniform(1.0, 2.2)});
  }
  return t;
}

}  // namespace

Image synthesize_face(std::uint64_t seed, std::size_t identity,
                      std::size_t index) {
  const IdentityTraits t = identity_traits(seed, identity);
  Rng rng(derive_seed(derive_seed(seed, 0x1A000000ull + identity), index));

  // Per-image nuisance: pose, expression, lighting, background, sensor noise.
  const double tx = rng.uniform(-4, 4), ty = rng.uniform(-4, 4);
  const double scale = rng.uniform(0.93, 1.07);
  const double angle = rng.uniform(-5, 5) * std::numbers::pi / 180.0;
  const double gain = rng.uniform(0.82, 1.18);
  const double bias = rng.uniform(-12, 12);
  const Rgb cast{rng.uniform(-8, 8), rng.uniform(-8, 8), rng.uniform(-8, 8)};
  const double light_x = rng.uniform(-0.25, 0.25);
  const double light_y = rng.uniform(-0.15, 0.15);
  const Rgb bg_top = random_color(rng, 40, 210);
  const Rgb bg_bottom = mix(bg_top, random_color(rng, 40, 210), 0.6);
  const double smile = rng.uniform(-1.5, 2.5);
  const double mouth_open = rng.uniform(0.8, 1.3);
  const double gaze = rng.uniform(-1.2, 1.2);
  const double noise = 8.0;
  const double strand_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const ValueNoise clutter(rng, 7.0);
  const ValueNoise clutter_fine(rng, 2.5);
  const ValueNoise grain(rng, 2.0);
  const ValueNoise strand_warp(rng, 9.0);

  const double cx = 48.0, cy = 50.0 + t.face_dy;
  const double ca = std::cos(angle), sa = std::sin(angle);

  Image img(kImageSide, kImageSide);
  for (std::size_t py = 0; py < kImageSide; ++py) {
    for (std::size_t px = 0; px < kImageSide; ++px) {
      // Map the output pixel back into the canonical face frame.
      const double ux = (px + 0.5 - 48.0 - tx) / scale;
      const double uy = (py + 0.5 - 48.0 - ty) / scale;
      const double x = ca * ux + sa * uy + 48.0;
      const double y = -sa * ux + ca * uy + 48.0;

      Rgb c = mix(bg_top, bg_bottom, y / 96.0);
      const double clutter_v = 20.0 * clutter(x, y) + 10.0 * clutter_fine(x, y);
      c = {c.r + clutter_v, c.g + 0.8 * clutter_v, c.b + 0.6 * clutter_v};
      const double strands =
          1.0 + 0.18 * std::sin(t.strand_freq * x + 2.5 * strand_warp(x, y) + strand_phase);
      const Rgb hair{t.hair.r * strands, t.hair.g * strands, t.hair.b * strands};

      // Neck.
      const double neck = std::max(std::fabs(x - cx) - t.face_a * 0.45,
                                   cy + t.face_b * 0.6 - y);
      c = mix(c, mix(t.skin, {0, 0, 0}, 0.15), coverage(neck));

      // Hair mass behind the face.
      const double hair_back = ellipse_distance(x, y, cx, cy - 3, t.face_a + t.hair_volume,
                                                t.face_b + t.hair_volume * 0.6);
      const double hair_cut = y - (cy - t.face_b * (1.0 - t.hairline) + 8);
      c = mix(c, hair, coverage(std::max(hair_back, hair_cut)));

      // Face with directional shading.
      const double face = ellipse_distance(x, y, cx, cy, t.face_a, t.face_b);
      const double shade = 1.0 + light_x * (x - cx) / t.face_a +
                           light_y * (y - cy) / t.face_b + 0.06 * grain(x, y);
      const Rgb skin{t.skin.r * shade, t.skin.g * shade, t.skin.b * shade};
      c = mix(c, skin, coverage(face));

      // Hairline over the forehead.
      const double fringe = std::max(face, y - (cy - t.face_b * (1.0 - t.hairline)));
      c = mix(c, hair, coverage(fringe));

      if (t.beard) {
        const double beard = std::max(face, (cy + t.mouth_y - 4) - y);
        c = mix(c, hair, 0.85 * coverage(beard));
      }

      for (const auto& m : t.marks) {
        const double d = ellipse_distance(x, y, cx + m.x, cy + m.y, m.r, m.r);
        c = mix(c, mix(t.skin, {60, 35, 20}, 0.7), coverage(d));
      }

      for (int side : {-1, 1}) {
        const double ex = cx + side * t.eye_dx;
        const double ey = cy + t.eye_y;
        const double white = ellipse_distance(x, y, ex, ey, t.eye_w, t.eye_h);
        c = mix(c, {240, 240, 235}, coverage(white));
        const double iris = std::max(
            ellipse_distance(x, y, ex + gaze, ey, t.iris_r, t.iris_r), white);
        c = mix(c, t.iris, coverage(iris));
        const double pupil = std::max(
            ellipse_distance(x, y, ex + gaze, ey, t.iris_r * 0.45, t.iris_r * 0.45), white);
        c = mix(c, {10, 10, 10}, coverage(pupil));

        const double by = ey - t.eye_h - t.brow_gap;
        const double brow =
            segment_distance(x, y, ex - t.eye_w, by + side * t.brow_tilt * 0.5,
                             ex + t.eye_w, by - side * t.brow_tilt * 0.5) -
            t.brow_thick;
        c = mix(c, t.brow, coverage(brow));

        if (t.glasses) {
          const double rim = std::fabs(ellipse_distance(x, y, ex, ey, t.eye_w + 3,
                                                        t.eye_h + 4)) - 0.8;
          c = mix(c, {25, 25, 30}, coverage(rim));
        }
      }
      if (t.glasses) {
        const double bridge =
            segment_distance(x, y, cx - t.eye_dx + t.eye_w + 3, cy + t.eye_y,
                             cx + t.eye_dx - t.eye_w - 3, cy + t.eye_y) - 0.8;
        c = mix(c, {25, 25, 30}, coverage(bridge));
      }

      // Nose: a shaded wedge below the eyes.
      const double nose_top = cy + t.eye_y + 3;
      const double nose =
          segment_distance(x, y, cx, nose_top, cx, nose_top + t.nose_len) -
          t.nose_w * std::clamp((y - nose_top) / t.nose_len, 0.2, 1.0);
      c = mix(c, mix(skin, {0, 0, 0}, 0.22), 0.7 * coverage(nose));

      // Mouth: an ellipse bent by the smile term.
      const double my = cy + t.mouth_y - smile * (1.0 - std::pow((x - cx) / t.mouth_w, 2));
      const double mouth = ellipse_distance(x, y, cx, my, t.mouth_w, t.mouth_h * mouth_open);
      c = mix(c, t.lips, coverage(mouth));

      // Exposure and colour cast.
      const double vals[3] = {c.r * gain + bias + cast.r, c.g * gain + bias + cast.g,
                              c.b * gain + bias + cast.b};
      for (std::size_t ch = 0; ch < 3; ++ch) {
        img.at(ch, py, px) = static_cast<float>(vals[ch] + noise * rng.normal());
      }
    }
  }
  return img.quantized();
}

Corpus synthesize_corpus(std::size_t identities, std::size_t per_identity,
                         std::uint64_t seed) {
  if (identities < 2) throw ConfigError("synthetic corpus needs at least 2 identities");
  if (per_identity < 2) throw ConfigError("synthetic corpus needs at least 2 images per identity");
  Corpus corpus;
  std::uint64_t state = kFnvOffset;
  for (std::size_t i = 0; i < identities; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "id%03zu", i);
    corpus.label_names.emplace_back(name);
    for (std::size_t j = 0; j < per_identity; ++j) {
      char file[64];
      std::snprintf(file, sizeof file, "images/id%03zu_%03zu.ppm", i, j);
      corpus.images.push_back(synthesize_face(seed, i, j));
      corpus.labels.push_back(static_cast<Label>(i));
      corpus.sources.push_back(file);
      ManifestEntry e{file, name, "dev"};
      state = chain_entry(state, e, encode_ppm(corpus.images.back()));
      corpus.manifest.entries.push_back(std::move(e));
    }
  }
  corpus.manifest.fingerprint = state;
  return corpus;
}

std::filesystem::path write_corpus(Corpus& corpus, const std::filesystem::path& dir) {
  if (corpus.manifest.entries.size() != corpus.images.size()) {
    throw StructuralError("corpus manifest and image list differ in length");
  }
  std::filesystem::create_directories(dir);
  std::uint64_t state = kFnvOffset;
  for (std::size_t i = 0; i < corpus.images.size(); ++i) {
    const auto& e = corpus.manifest.entries[i];
    const auto target = dir / e.path;
    std::filesystem::create_directories(target.parent_path());
    save_image(corpus.images[i], target);
    state = chain_entry(state, e, encode_ppm(corpus.images[i]));
  }
  corpus.manifest.fingerprint = state;
  const auto manifest_path = dir / "manifest.tsv";
  write_manifest(corpus.manifest, manifest_path);
  return manifest_path;
}

Corpus load_corpus(const std::filesystem::path& manifest_path,
                   std::vector<std::string>* warnings,
                   const std::vector<std::string>& exclude_splits) {
  const Manifest full = read_manifest(manifest_path);
  Corpus corpus;
  corpus.manifest.fingerprint = full.fingerprint;
  const auto kept = [&](const ManifestEntry& e) {
    return std::find(exclude_splits.begin(), exclude_splits.end(), e.split) ==
           exclude_splits.end();
  };
  std::set<std::string> names;
  for (const auto& e : full.entries) {
    if (kept(e)) names.insert(e.label);
  }
  corpus.label_names.assign(names.begin(), names.end());
  std::map<std::string, Label> ids;
  for (std::size_t i = 0; i < corpus.label_names.size(); ++i) {
    ids[corpus.label_names[i]] = static_cast<Label>(i);
  }
  const auto dir = manifest_path.parent_path();
  for (const auto& e : full.entries) {
    if (!kept(e)) continue;
    Image img = load_image(dir / e.path, warnings);
    if (img.height() != kImageSide || img.width() != kImageSide) {
      img = preprocess(img);
    }
    corpus.images.push_back(std::move(img));
    corpus.labels.push_back(ids[e.label]);
    corpus.sources.push_back(e.path);
    corpus.manifest.entries.push_back(e);
  }
  return corpus;
}

Corpus subset(const Corpus& corpus, const std::vector<std::size_t>& indices) {
  Corpus out;
  out.label_names = corpus.label_names;
  out.manifest.fingerprint = corpus.manifest.fingerprint;
  for (auto i : indices) {
    out.images.push_back(corpus.images.at(i));
    out.labels.push_back(corpus.labels.at(i));
    out.sources.push_back(corpus.sources.at(i));
    if (i < corpus.manifest.entries.size()) {
      out.manifest.entries.push_back(corpus.manifest.entries[i]);
    }
  }
  return out;
}

}  // namespace facecloak
