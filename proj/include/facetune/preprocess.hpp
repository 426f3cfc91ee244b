#pragma once

// Dataset ingestion, five-point similarity alignment and the seeded
// per-identity train/test split.
//
// Coordinates follow the pixel-centre convention: pixel (i, j) covers
// [i - 0.5, i + 0.5) x [j - 0.5, j + 0.5), so landmark (x, y) addresses the
// same location in pixel buffers and in transform space.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "facetune/config.hpp"
#include "facetune/core.hpp"
#include "facetune/rng.hpp"

namespace facetune {

inline constexpr int kAlignedSize = 224;

struct Point2 {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point2&, const Point2&) = default;
};

/// Left eye, right eye, nose tip, left mouth corner, right mouth corner.
struct Landmarks5 {
  std::array<Point2, 5> points{};

  void validate(int width, int height) const {
    for (const auto& p : points) {
      if (!std::isfinite(p.x) || !std::isfinite(p.y)) {
        throw DegenerateLandmarksError("non-finite landmark coordinate");
      }
      if (p.x < -0.5 || p.y < -0.5 || p.x > width - 0.5 || p.y > height - 0.5) {
        throw DegenerateLandmarksError("landmark outside image bounds");
      }
    }
  }
};

/// Canonical five-point template in 224x224 output space: the common
/// 112x112 face-recognition alignment template scaled by two.
inline Landmarks5 canonical_template() {
  return Landmarks5{{{{2 * 38.2946, 2 * 51.6963},
                      {2 * 73.5318, 2 * 51.5014},
                      {2 * 56.0252, 2 * 71.7366},
                      {2 * 41.5493, 2 * 92.3655},
                      {2 * 70.7299, 2 * 92.2041}}}};
}

/// Interleaved 8-bit pixels. Colour images are stored in RGB order.
struct FaceImage {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;
  std::string source;
  // Who is in the picture: the name of the directory the file came from.
  std::string subject;
  std::optional<IdentityLabel> label;  // nullopt means Unknown

  std::uint8_t at(int x, int y, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t& at(int x, int y, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

/// p -> scale * R p + t, with R a proper rotation.
struct SimilarityTransform {
  double scale = 1.0;
  std::array<std::array<double, 2>, 2> rotation{{{1.0, 0.0}, {0.0, 1.0}}};
  Point2 translation{};
  double residual_rms = 0.0;  // fit quality when produced by estimation

  Point2 apply(Point2 p) const {
    return {scale * (rotation[0][0] * p.x + rotation[0][1] * p.y) + translation.x,
            scale * (rotation[1][0] * p.x + rotation[1][1] * p.y) + translation.y};
  }

  SimilarityTransform inverse() const {
    SimilarityTransform inv;
    inv.scale = 1.0 / scale;
    inv.rotation = {{{rotation[0][0], rotation[1][0]}, {rotation[0][1], rotation[1][1]}}};
    const Point2 rt{inv.rotation[0][0] * translation.x + inv.rotation[0][1] * translation.y,
                    inv.rotation[1][0] * translation.x + inv.rotation[1][1] * translation.y};
    inv.translation = {-inv.scale * rt.x, -inv.scale * rt.y};
    return inv;
  }

  static SimilarityTransform from_angle(double scale, double radians, Point2 t) {
    SimilarityTransform s;
    s.scale = scale;
    const double c = std::cos(radians), sn = std::sin(radians);
    s.rotation = {{{c, -sn}, {sn, c}}};
    s.translation = t;
    return s;
  }
};

inline Landmarks5 apply(const SimilarityTransform& tf, const Landmarks5& lm) {
  Landmarks5 out;
  for (std::size_t i = 0; i < lm.points.size(); ++i) out.points[i] = tf.apply(lm.points[i]);
  return out;
}

/// Least-squares similarity (Umeyama) taking `src` onto `dst`. In 2-D the
/// optimal proper rotation has the closed form theta = atan2(b, a) with
/// a = sum <p_i, q_i>, b = sum p_i x q_i over centred points, and
/// scale = sqrt(a^2 + b^2) / sum |p_i|^2.
inline SimilarityTransform estimate_similarity_transform(const Landmarks5& src, const Landmarks5& dst) {
  constexpr double n = 5.0;
  Point2 mu_p, mu_q;
  for (std::size_t i = 0; i < 5; ++i) {
    mu_p.x += src.points[i].x;
    mu_p.y += src.points[i].y;
    mu_q.x += dst.points[i].x;
    mu_q.y += dst.points[i].y;
  }
  mu_p = {mu_p.x / n, mu_p.y / n};
  mu_q = {mu_q.x / n, mu_q.y / n};

  double var_p = 0.0, a = 0.0, b = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    const double px = src.points[i].x - mu_p.x, py = src.points[i].y - mu_p.y;
    const double qx = dst.points[i].x - mu_q.x, qy = dst.points[i].y - mu_q.y;
    var_p += px * px + py * py;
    a += px * qx + py * qy;
    b += px * qy - py * qx;
  }
  if (!std::isfinite(var_p) || var_p < 1e-9) {
    throw DegenerateLandmarksError("source landmarks have no spread");
  }
  const double norm_ab = std::hypot(a, b);
  if (!(norm_ab > 1e-12 * var_p)) {
    throw DegenerateLandmarksError("no similarity with positive scale fits the landmarks");
  }

  SimilarityTransform tf;
  const double c = a / norm_ab, s = b / norm_ab;
  tf.rotation = {{{c, -s}, {s, c}}};
  tf.scale = norm_ab / var_p;
  tf.translation = {mu_q.x - tf.scale * (c * mu_p.x - s * mu_p.y),
                    mu_q.y - tf.scale * (s * mu_p.x + c * mu_p.y)};

  double sq = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    const Point2 w = tf.apply(src.points[i]);
    sq += (w.x - dst.points[i].x) * (w.x - dst.points[i].x) + (w.y - dst.points[i].y) * (w.y - dst.points[i].y);
  }
  tf.residual_rms = std::sqrt(sq / n);
  return tf;
}

/// Renders `out_size` x `out_size` x 3 by inverse-mapping each output pixel
/// through `src_to_dst` and sampling bilinearly. Samples outside the
/// source's pixel area are black.
inline FaceImage warp_similarity(const FaceImage& img, const SimilarityTransform& src_to_dst,
                                 int out_size = kAlignedSize) {
  if (img.width <= 0 || img.height <= 0 || (img.channels != 1 && img.channels != 3)) {
    throw ShapeError("cannot warp an image with shape " + std::to_string(img.width) + "x" +
                     std::to_string(img.height) + "x" + std::to_string(img.channels));
  }
  const SimilarityTransform inv = src_to_dst.inverse();
  FaceImage out;
  out.width = out.height = out_size;
  out.channels = 3;
  out.pixels.assign(static_cast<std::size_t>(out_size) * out_size * 3, 0);
  out.source = img.source;
  out.subject = img.subject;
  out.label = img.label;

  const double max_x = img.width - 1, max_y = img.height - 1;
  for (int y = 0; y < out_size; ++y) {
    for (int x = 0; x < out_size; ++x) {
      const Point2 s = inv.apply({static_cast<double>(x), static_cast<double>(y)});
      if (!(s.x >= -0.5 && s.y >= -0.5 && s.x < img.width - 0.5 && s.y < img.height - 0.5)) continue;
      const double cx = std::clamp(s.x, 0.0, max_x), cy = std::clamp(s.y, 0.0, max_y);
      const int x0 = static_cast<int>(std::floor(cx)), y0 = static_cast<int>(std::floor(cy));
      const int x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
      const double fx = cx - x0, fy = cy - y0;
      for (int c = 0; c < 3; ++c) {
        const int ic = img.channels == 1 ? 0 : c;
        const double top = img.at(x0, y0, ic) * (1.0 - fx) + img.at(x1, y0, ic) * fx;
        const double bottom = img.at(x0, y1, ic) * (1.0 - fx) + img.at(x1, y1, ic) * fx;
        const double v = top * (1.0 - fy) + bottom * fy;
        out.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return out;
}

/// Aligns a face so its landmarks land on `tmpl` in 224x224 output space.
inline FaceImage align_face(const FaceImage& image, const Landmarks5& lm,
                            const Landmarks5& tmpl = canonical_template()) {
  lm.validate(image.width, image.height);
  return warp_similarity(image, estimate_similarity_transform(lm, tmpl));
}

/// Fallback when no landmarks are available: largest centred square,
/// resized to 224x224.
inline FaceImage center_crop_resize(const FaceImage& image, int out_size = kAlignedSize) {
  const int side = std::min(image.width, image.height);
  if (side <= 0) throw ShapeError("empty image");
  const double x0 = (image.width - side) / 2.0, y0 = (image.height - side) / 2.0;
  const double s = static_cast<double>(out_size) / side;
  SimilarityTransform tf;
  tf.scale = s;
  tf.translation = {(0.5 - x0) * s - 0.5, (0.5 - y0) * s - 0.5};
  return warp_similarity(image, tf, out_size);
}

/// Reads a `.lm5` sidecar: five lines of "x y".
inline Landmarks5 read_landmarks(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open landmarks file " + path.string());
  Landmarks5 lm;
  for (auto& p : lm.points) {
    if (!(in >> p.x >> p.y)) throw FormatError(path.string() + ": expected 5 lines of \"x y\"");
  }
  std::string rest;
  if (in >> rest) throw FormatError(path.string() + ": trailing data after 5 landmarks");
  return lm;
}

inline void write_landmarks(const std::filesystem::path& path, const Landmarks5& lm) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  for (const auto& p : lm.points) out << format_double(p.x) << ' ' << format_double(p.y) << '\n';
}

inline std::filesystem::path landmarks_path_for(const std::filesystem::path& image_path) {
  auto p = image_path;
  p.replace_extension(".lm5");
  return p;
}

// ---------------------------------------------------------------------------
// Dataset index

enum class Split : std::uint8_t { unassigned = 0, train = 1, test = 2 };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::test: return "test";
    default: return "none";
  }
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  if (s == "none") return Split::unassigned;
  throw FormatError("unknown split tag `" + std::string(s) + "`");
}

struct Warning {
  std::string path;
  std::string reason;

  /// "WARN <path> <reason>"
  std::string line() const { return "WARN " + path + " " + reason; }
};

struct IndexEntry {
  std::string path;  // relative to the dataset root, '/' separated
  IdentityLabel label;
  Split split = Split::unassigned;

  friend bool operator==(const IndexEntry&, const IndexEntry&) = default;
};

struct DatasetIndex {
  std::string root;
  std::vector<IdentityLabel> labels;
  std::vector<IndexEntry> entries;  // grouped by identity id, then sorted by path
  std::uint64_t seed = 0;
  double ratio = 0.0;

  std::size_t num_classes() const noexcept { return labels.size(); }

  std::size_t count(Split s) const {
    return static_cast<std::size_t>(
        std::count_if(entries.begin(), entries.end(), [s](const IndexEntry& e) { return e.split == s; }));
  }

  /// Text form, also the fingerprint input. Format:
  ///   facetune-index v1
  ///   root <path>
  ///   seed <u64>
  ///   ratio <real>
  ///   classes <C>
  ///   label <id>\t<name>          (C lines)
  ///   entry <id>\t<split>\t<path> (one per image)
  std::string serialize() const {
    std::ostringstream os;
    os << "facetune-index v1\n";
    os << "root " << root << '\n';
    os << body();
    return os.str();
  }

  /// Hash of everything except the root location.
  std::uint64_t fingerprint() const { return fnv1a64(body()); }

  static DatasetIndex parse(std::string_view text) {
    DatasetIndex idx;
    std::istringstream in{std::string(text)};
    std::string line;
    auto fail = [](const std::string& why) -> void { throw FormatError("dataset index: " + why); };
    if (!std::getline(in, line) || line != "facetune-index v1") fail("missing header");
    auto field = [&](std::string_view key) {
      if (!std::getline(in, line) || line.rfind(std::string(key) + " ", 0) != 0) {
        fail("expected `" + std::string(key) + "`");
      }
      return line.substr(key.size() + 1);
    };
    idx.root = field("root");
    idx.seed = parse_number<std::uint64_t>("seed", field("seed"));
    idx.ratio = parse_number<double>("ratio", field("ratio"));
    const auto classes = parse_number<std::size_t>("classes", field("classes"));
    for (std::size_t c = 0; c < classes; ++c) {
      const std::string rest = field("label");
      const auto tab = rest.find('\t');
      if (tab == std::string::npos) fail("malformed label line");
      IdentityLabel l{rest.substr(tab + 1), parse_number<int>("label id", rest.substr(0, tab))};
      if (l.id != static_cast<int>(c) || l.name.empty()) fail("label ids must be dense");
      idx.labels.push_back(std::move(l));
    }
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (line.rfind("entry ", 0) != 0) fail("expected `entry`");
      const std::string rest = line.substr(6);
      const auto t1 = rest.find('\t');
      const auto t2 = t1 == std::string::npos ? t1 : rest.find('\t', t1 + 1);
      if (t2 == std::string::npos) fail("malformed entry line");
      const int id = parse_number<int>("entry id", rest.substr(0, t1));
      if (id < 0 || static_cast<std::size_t>(id) >= idx.labels.size()) fail("entry label out of range");
      idx.entries.push_back({rest.substr(t2 + 1), idx.labels[static_cast<std::size_t>(id)],
                             parse_split(rest.substr(t1 + 1, t2 - t1 - 1))});
    }
    return idx;
  }

 private:
  std::string body() const {
    std::ostringstream os;
    os << "seed " << seed << '\n';
    os << "ratio " << format_double(ratio) << '\n';
    os << "classes " << labels.size() << '\n';
    for (const auto& l : labels) os << "label " << l.id << '\t' << l.name << '\n';
    for (const auto& e : entries) os << "entry " << e.label.id << '\t' << to_string(e.split) << '\t' << e.path << '\n';
    return os.str();
  }
};

inline bool has_image_extension(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp" || ext == ".ppm" ||
         ext == ".pgm" || ext == ".pnm";
}

/// Checks that the file opens and starts with a known image signature.
/// Returns an empty string when readable, else the reason.
inline std::string probe_image_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return "unreadable";
  unsigned char head[8] = {};
  in.read(reinterpret_cast<char*>(head), sizeof head);
  const auto got = in.gcount();
  if (got >= 8 && head[0] == 0x89 && head[1] == 'P' && head[2] == 'N' && head[3] == 'G') return {};
  if (got >= 3 && head[0] == 0xFF && head[1] == 0xD8 && head[2] == 0xFF) return {};
  if (got >= 2 && head[0] == 'B' && head[1] == 'M') return {};
  if (got >= 2 && head[0] == 'P' && head[1] >= '1' && head[1] <= '6') return {};
  return got == 0 ? "empty-file" : "unrecognized-image-format";
}

struct IngestResult {
  DatasetIndex index;
  std::vector<Warning> warnings;
};

/// Indexes root/<identity>/<image files>. Identities receive dense ids in
/// sorted-name order; images within an identity are sorted by path.
inline IngestResult ingest_dataset(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(root, ec)) {
    throw EmptyDatasetError("dataset root " + root.string() + " does not exist or is not a directory");
  }
  IngestResult result;
  std::map<std::string, std::vector<std::string>> by_identity;
  std::vector<fs::path> identity_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) {
      identity_dirs.push_back(entry.path());
    } else if (has_image_extension(entry.path())) {
      result.warnings.push_back({entry.path().generic_string(), "image-outside-identity-directory"});
    }
  }
  if (identity_dirs.empty()) throw EmptyDatasetError("dataset root " + root.string() + " has no identity directories");

  for (const auto& dir : identity_dirs) {
    const std::string name = dir.filename().string();
    std::vector<std::string> files;
    for (const auto& f : fs::directory_iterator(dir)) {
      if (!f.is_regular_file() || !has_image_extension(f.path())) continue;
      if (auto why = probe_image_file(f.path()); !why.empty()) {
        result.warnings.push_back({f.path().generic_string(), why});
        continue;
      }
      files.push_back((fs::path(name) / f.path().filename()).generic_string());
    }
    if (files.empty()) {
      result.warnings.push_back({dir.generic_string(), "identity-has-no-readable-images"});
      continue;
    }
    std::sort(files.begin(), files.end());
    by_identity.emplace(name, std::move(files));
  }
  if (by_identity.empty()) throw EmptyDatasetError("no readable images under " + root.string());

  auto& idx = result.index;
  idx.root = root.generic_string();
  for (auto& [name, files] : by_identity) {
    IdentityLabel label{name, static_cast<int>(idx.labels.size())};
    idx.labels.push_back(label);
    for (auto& f : files) idx.entries.push_back({std::move(f), label, Split::unassigned});
  }
  std::sort(result.warnings.begin(), result.warnings.end(),
            [](const Warning& a, const Warning& b) { return a.path < b.path; });
  return result;
}

struct SplitResult {
  DatasetIndex index;
  std::vector<Warning> warnings;
};

/// Stratified split: each identity with n images sends round(ratio * n) of
/// them to train (clamped to [1, n - 1] when n >= 2). Which images go is a
/// Fisher-Yates shuffle seeded by hash_combine(seed, fnv1a64(name)).
inline SplitResult split_dataset(const DatasetIndex& index, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split ratio must lie in (0, 1)");
  SplitResult result{index, {}};
  auto& idx = result.index;
  idx.seed = seed;
  idx.ratio = ratio;

  std::size_t begin = 0;
  while (begin < idx.entries.size()) {
    std::size_t end = begin;
    const int id = idx.entries[begin].label.id;
    while (end < idx.entries.size() && idx.entries[end].label.id == id) ++end;
    const std::size_t n = end - begin;

    if (n == 1) {
      idx.entries[begin].split = Split::train;
      result.warnings.push_back({idx.entries[begin].path, "identity-has-single-image-assigned-to-train"});
    } else {
      const auto wanted = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
      const std::size_t n_train = std::clamp<std::size_t>(wanted, 1, n - 1);
      std::vector<std::size_t> order(n);
      for (std::size_t i = 0; i < n; ++i) order[i] = i;
      SplitMix64 rng(hash_combine(seed, fnv1a64(idx.entries[begin].label.name)));
      shuffle(std::span<std::size_t>(order), rng);
      for (std::size_t k = 0; k < n; ++k) {
        idx.entries[begin + order[k]].split = k < n_train ? Split::train : Split::test;
      }
    }
    begin = end;
  }
  return result;
}

}  // namespace facetune
