#pragma once

// Frozen image encoders, the on-disk embedding cache and embedding-space
// diagnostics.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "facetune/binary_io.hpp"
#include "facetune/config.hpp"
#include "facetune/core.hpp"
#include "facetune/preprocess.hpp"
#include "facetune/rng.hpp"

namespace facetune {

/// A frozen image encoder. `encode` must be a pure function of the pixels
/// and safe to call concurrently.
class EncoderBackend {
 public:
  virtual ~EncoderBackend() = default;
  virtual std::string name() const = 0;
  virtual std::size_t dim() const = 0;
  /// Raw, un-normalized output for a 224x224x3 RGB image.
  virtual std::vector<double> encode(const FaceImage& img) const = 0;
};

inline void require_aligned_shape(const FaceImage& img) {
  if (img.width != kAlignedSize || img.height != kAlignedSize || img.channels != 3 ||
      img.pixels.size() != static_cast<std::size_t>(kAlignedSize) * kAlignedSize * 3) {
    throw ShapeError("encoder input must be 224x224x3, got " + std::to_string(img.width) + "x" +
                     std::to_string(img.height) + "x" + std::to_string(img.channels));
  }
}

inline std::vector<double> embed_image_raw(const EncoderBackend& backend, const FaceImage& img) {
  require_aligned_shape(img);
  auto raw = backend.encode(img);
  if (raw.size() != backend.dim()) {
    throw DimensionError("backend " + backend.name() + " returned " + std::to_string(raw.size()) +
                         " values, expected " + std::to_string(backend.dim()));
  }
  return raw;
}

inline Embedding embed_image(const EncoderBackend& backend, const FaceImage& img) {
  return l2_normalize(embed_image_raw(backend, img));
}

// ---------------------------------------------------------------------------
// Mock backend

inline std::vector<double> random_unit_vector(std::size_t dim, SplitMix64& rng) {
  std::vector<double> v(dim);
  for (;;) {
    for (auto& x : v) x = rng.normal();
    const double n = l2_norm(v);
    if (n > 1e-12) {
      for (auto& x : v) x /= n;
      return v;
    }
  }
}

/// Removes the component of `v` along unit `u`.
inline void reject_from(std::vector<double>& v, std::span<const double> u) {
  const double d = dot(v, u);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= d * u[i];
}

/// `count` unit vectors whose pairwise angles all equal `separation_deg`
/// (0 < separation <= 90). Built as cos(phi) a + sin(phi) e_k over an
/// orthonormal set {a, e_1..e_count}, with cos^2(phi) = cos(separation).
/// Requires dim > count.
inline std::vector<std::vector<double>> equiangular_centers(std::size_t count, std::size_t dim,
                                                            double separation_deg, std::uint64_t seed) {
  if (dim <= count) throw DimensionError("equiangular centers need dim > count");
  if (!(separation_deg > 0.0 && separation_deg <= 90.0)) {
    throw ConfigError("center separation must lie in (0, 90] degrees");
  }
  SplitMix64 rng(hash_combine(seed, 0xC3E7E55ULL));
  std::vector<std::vector<double>> basis;
  while (basis.size() < count + 1) {
    auto v = random_unit_vector(dim, rng);
    for (const auto& b : basis) reject_from(v, b);
    const double n = l2_norm(v);
    if (n < 1e-6) continue;
    for (auto& x : v) x /= n;
    basis.push_back(std::move(v));
  }
  const double cos_sep = std::cos(separation_deg * std::numbers::pi / 180.0);
  const double cphi = std::sqrt(std::max(cos_sep, 0.0));
  const double sphi = std::sqrt(1.0 - cphi * cphi);
  std::vector<std::vector<double>> centers(count, std::vector<double>(dim));
  for (std::size_t k = 0; k < count; ++k) {
    for (std::size_t i = 0; i < dim; ++i) centers[k][i] = cphi * basis[0][i] + sphi * basis[k + 1][i];
  }
  return centers;
}

/// Identity structure for the mock encoder. Images of subject s map to
/// centers[s] rotated by a random angle alpha = |N(0, 1)| * noise_deg
/// towards a random tangent direction. Subjects without an explicit
/// center get one when auto_separation_deg is set: cos(phi) a + sin(phi) e
/// with e taken from a seeded orthonormal basis. Listed known_subjects take
/// basis slots in order; other subjects hash into up to 64 further slots, so
/// subjects in distinct slots are exactly that angle apart. Without free
/// slots a random e is used and the angle is only approximate.
/// Subjects with no center map to an unstructured pixel hash.
struct MockGeometry {
  std::map<std::string, std::vector<double>> centers;
  double noise_deg = 0.0;
  std::optional<double> auto_separation_deg;
  std::vector<std::string> known_subjects;
};

/// Deterministic stand-in for a frozen encoder, keyed on (seed, pixels,
/// subject). Outputs have a pixel-dependent norm in [2, 3) so callers must
/// normalize.
class MockBackend final : public EncoderBackend {
 public:
  MockBackend(std::uint64_t seed, std::size_t dim, std::optional<MockGeometry> geometry = std::nullopt)
      : seed_(seed), dim_(dim), geometry_(std::move(geometry)) {
    if (dim_ < 2) throw DimensionError("mock backend needs dim >= 2");
    if (geometry_) {
      for (auto& [name, c] : geometry_->centers) {
        if (c.size() != dim_) throw DimensionError("mock center for " + name + " has wrong dimension");
        const auto unit = l2_normalize(c);
        c.assign(unit.values().begin(), unit.values().end());
      }
      if (geometry_->noise_deg < 0.0) throw ConfigError("mock noise must be non-negative");
      if (geometry_->auto_separation_deg) {
        const double sep = *geometry_->auto_separation_deg;
        if (!(sep > 0.0 && sep <= 90.0)) throw ConfigError("mock separation must lie in (0, 90]");
        SplitMix64 rng(hash_combine(seed_, 0xA7C408ULL));
        const std::size_t wanted = std::min(dim_, 1 + geometry_->known_subjects.size() + kVisitorSlots);
        while (basis_.size() < wanted) {
          auto v = random_unit_vector(dim_, rng);
          for (const auto& b : basis_) reject_from(v, b);
          const double n = l2_norm(v);
          if (n < 1e-6) continue;
          for (auto& x : v) x /= n;
          basis_.push_back(std::move(v));
        }
        for (std::size_t i = 0; i < geometry_->known_subjects.size() && i + 1 < basis_.size(); ++i) {
          slots_.emplace(geometry_->known_subjects[i], i + 1);
        }
      }
    }
  }

  std::string name() const override {
    std::ostringstream os;
    os << "mock(seed=" << seed_ << ",dim=" << dim_;
    if (geometry_) {
      if (!geometry_->centers.empty()) os << ",centers=" << geometry_->centers.size();
      if (geometry_->auto_separation_deg) os << ",separation=" << format_double(*geometry_->auto_separation_deg);
      os << ",noise=" << format_double(geometry_->noise_deg);
    }
    os << ")";
    return os.str();
  }

  std::size_t dim() const override { return dim_; }

  std::vector<double> encode(const FaceImage& img) const override {
    const std::uint64_t pixel_hash = fnv1a64(std::span<const unsigned char>(img.pixels));
    const std::uint64_t subject_hash = fnv1a64(img.subject);
    SplitMix64 rng(hash_combine(hash_combine(seed_, subject_hash), pixel_hash));
    const double magnitude = 2.0 + rng.uniform();

    std::vector<double> v;
    if (auto center = center_for(img.subject)) {
      const double alpha = std::abs(rng.normal()) * geometry_->noise_deg * std::numbers::pi / 180.0;
      auto tangent = random_unit_vector(dim_, rng);
      reject_from(tangent, *center);
      const double tn = l2_norm(tangent);
      v.assign(dim_, 0.0);
      for (std::size_t i = 0; i < dim_; ++i) {
        v[i] = std::cos(alpha) * (*center)[i] + (tn > 0.0 ? std::sin(alpha) * tangent[i] / tn : 0.0);
      }
    } else {
      v = random_unit_vector(dim_, rng);
    }
    for (auto& x : v) x *= magnitude;
    return v;
  }

  /// Unit center used for `subject`, if any.
  std::optional<std::vector<double>> center_for(const std::string& subject) const {
    if (!geometry_) return std::nullopt;
    if (auto it = geometry_->centers.find(subject); it != geometry_->centers.end()) return it->second;
    if (!geometry_->auto_separation_deg) return std::nullopt;
    const auto& anchor = basis_[0];
    std::vector<double> e;
    const std::size_t reserved = slots_.size() + 1;
    if (auto it = slots_.find(subject); it != slots_.end()) {
      e = basis_[it->second];
    } else if (reserved < basis_.size()) {
      e = basis_[reserved + fnv1a64(subject) % (basis_.size() - reserved)];
    } else {
      SplitMix64 rng(hash_combine(seed_, fnv1a64(subject)));
      e = random_unit_vector(dim_, rng);
      reject_from(e, anchor);
      const double en = l2_norm(e);
      for (auto& x : e) x /= en;
    }
    const double cos_sep = std::cos(*geometry_->auto_separation_deg * std::numbers::pi / 180.0);
    const double cphi = std::sqrt(std::max(cos_sep, 0.0));
    const double sphi = std::sqrt(1.0 - cphi * cphi);
    std::vector<double> c(dim_);
    for (std::size_t i = 0; i < dim_; ++i) c[i] = cphi * anchor[i] + sphi * e[i];
    return c;
  }

 private:
  std::uint64_t seed_;
  std::size_t dim_;
  std::optional<MockGeometry> geometry_;
  static constexpr std::size_t kVisitorSlots = 64;

  std::vector<std::vector<double>> basis_;
  std::map<std::string, std::size_t> slots_;
};

// ---------------------------------------------------------------------------
// Backend manifest

/// Key/value manifest describing an exported encoder:
///   model = <file, relative to the manifest>
///   dim = <D>
///   channel_order = RGB | BGR
///   mean = <r> <g> <b>     (applied to pixel / 255)
///   std = <r> <g> <b>
///   source = <checkpoint identifier>   (optional)
struct BackendManifest {
  std::filesystem::path model_path;
  std::size_t dim = 0;
  std::string channel_order = "RGB";
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> stddev{1.0, 1.0, 1.0};
  std::string source;

  static BackendManifest parse(const KeyValues& kv, const std::filesystem::path& base_dir) {
    auto get = [&](const char* key) -> const std::string& {
      const auto it = kv.find(std::string_view(key));
      if (it == kv.end()) throw BackendLoadError(std::string("manifest missing `") + key + "`");
      return it->second;
    };
    auto triple = [&](const char* key) {
      std::istringstream in(get(key));
      std::array<double, 3> out{};
      for (auto& x : out) {
        if (!(in >> x)) throw BackendLoadError(std::string("manifest `") + key + "` needs three numbers");
      }
      return out;
    };
    BackendManifest m;
    m.model_path = base_dir / get("model");
    try {
      m.dim = parse_number<std::size_t>("dim", get("dim"));
    } catch (const ConfigError& e) {
      throw BackendLoadError(e.what());
    }
    if (m.dim == 0) throw BackendLoadError("manifest dim must be positive");
    m.channel_order = get("channel_order");
    if (m.channel_order != "RGB" && m.channel_order != "BGR") {
      throw BackendLoadError("channel_order must be RGB or BGR");
    }
    m.mean = triple("mean");
    m.stddev = triple("std");
    for (double s : m.stddev) {
      if (!(s > 0.0)) throw BackendLoadError("manifest std entries must be positive");
    }
    if (auto it = kv.find(std::string_view("source")); it != kv.end()) m.source = it->second;
    return m;
  }

  static BackendManifest load(const std::filesystem::path& path) {
    KeyValues kv;
    try {
      kv = load_key_values(path);
    } catch (const ConfigError& e) {
      throw BackendLoadError(e.what());
    }
    return parse(kv, path.parent_path());
  }
};

/// NCHW float tensor for a 224x224x3 RGB image per the manifest's channel
/// order and normalization constants.
inline std::vector<float> to_input_tensor(const FaceImage& img, const BackendManifest& m) {
  require_aligned_shape(img);
  const std::size_t plane = static_cast<std::size_t>(kAlignedSize) * kAlignedSize;
  std::vector<float> t(3 * plane);
  for (int c = 0; c < 3; ++c) {
    const int src_c = m.channel_order == "RGB" ? c : 2 - c;
    for (int y = 0; y < kAlignedSize; ++y) {
      for (int x = 0; x < kAlignedSize; ++x) {
        const double v = img.at(x, y, src_c) / 255.0;
        t[c * plane + static_cast<std::size_t>(y) * kAlignedSize + x] =
            static_cast<float>((v - m.mean[c]) / m.stddev[c]);
      }
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Embedding cache

struct CacheRecord {
  std::string path;
  int label_id = 0;
  Split split = Split::unassigned;
  std::vector<double> raw;

  friend bool operator==(const CacheRecord&, const CacheRecord&) = default;
};

/// Raw encoder outputs for an indexed dataset.
///
/// File layout (little-endian):
///   "EMB1"
///   u32 D, u64 count, u64 dataset fingerprint
///   str backend name
///   u32 C, then C x str label name (label id = position)
///   count x { str path, i32 label id, u8 split (0 none, 1 train, 2 test), D x f64 raw }
/// where str = u32 byte length + UTF-8 bytes.
struct EmbeddingCache {
  std::uint32_t dim = 0;
  std::string backend;
  std::uint64_t fingerprint = 0;
  std::vector<IdentityLabel> labels;
  std::vector<CacheRecord> records;

  std::size_t num_classes() const noexcept { return labels.size(); }

  Embedding embedding(std::size_t i) const { return l2_normalize(records.at(i).raw); }

  /// Record indices in `split` (all records for Split::unassigned).
  std::vector<std::size_t> select(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (split == Split::unassigned || records[i].split == split) out.push_back(i);
    }
    return out;
  }

  /// Unit-normalized rows for the given records.
  Matrix unit_matrix(std::span<const std::size_t> which) const {
    Matrix m(which.size(), dim);
    for (std::size_t r = 0; r < which.size(); ++r) {
      const auto e = embedding(which[r]);
      std::copy(e.values().begin(), e.values().end(), m.row(r).begin());
    }
    return m;
  }

  std::vector<int> label_ids(std::span<const std::size_t> which) const {
    std::vector<int> out;
    out.reserve(which.size());
    for (auto i : which) out.push_back(records[i].label_id);
    return out;
  }

  ByteWriter serialize() const {
    ByteWriter w;
    w.magic("EMB1");
    w.u32(dim);
    w.u64(records.size());
    w.u64(fingerprint);
    w.str(backend);
    w.u32(static_cast<std::uint32_t>(labels.size()));
    for (const auto& l : labels) w.str(l.name);
    for (const auto& r : records) {
      w.str(r.path);
      w.i32(r.label_id);
      w.u8(static_cast<std::uint8_t>(r.split));
      for (double x : r.raw) w.f64(x);
    }
    return w;
  }

  void save(const std::filesystem::path& path) const { serialize().write_file(path); }

  static EmbeddingCache deserialize(ByteReader& r) {
    EmbeddingCache c;
    r.expect_magic("EMB1");
    c.dim = r.u32();
    if (c.dim == 0) throw FormatError(r.source() + ": zero embedding dimension");
    const auto count = r.u64();
    c.fingerprint = r.u64();
    c.backend = r.str();
    const auto classes = r.u32();
    for (std::uint32_t i = 0; i < classes; ++i) c.labels.push_back({r.str(), static_cast<int>(i)});
    for (std::uint64_t i = 0; i < count; ++i) {
      CacheRecord rec;
      rec.path = r.str();
      rec.label_id = r.i32();
      const auto split = r.u8();
      if (split > 2) throw FormatError(r.source() + ": bad split tag");
      rec.split = static_cast<Split>(split);
      if (rec.label_id < 0 || static_cast<std::uint32_t>(rec.label_id) >= classes) {
        throw FormatError(r.source() + ": record label out of range");
      }
      rec.raw.resize(c.dim);
      for (auto& x : rec.raw) x = r.f64();
      c.records.push_back(std::move(rec));
    }
    r.expect_end();
    for (std::size_t i = 0; i < c.records.size(); ++i) (void)c.embedding(i);  // rejects zero vectors
    return c;
  }

  static EmbeddingCache load(const std::filesystem::path& path) {
    auto r = ByteReader::from_file(path);
    return deserialize(r);
  }

  friend bool operator==(const EmbeddingCache&, const EmbeddingCache&) = default;
};

struct EmbedResult {
  EmbeddingCache cache;
  std::vector<Warning> failures;
};

using ImageLoader = std::function<FaceImage(const std::filesystem::path&, std::vector<Warning>*)>;

/// Embeds every indexed image. Per-image failures are reported, not fatal.
/// Work is spread over `threads` workers; output order follows the index.
inline EmbedResult embed_dataset(const EncoderBackend& backend, const DatasetIndex& index,
                                 const ImageLoader& loader, unsigned threads = 0) {
  if (index.entries.empty()) throw EmptyDatasetError("dataset index has no entries");
  const std::size_t n = index.entries.size();
  std::vector<std::optional<std::vector<double>>> outputs(n);
  std::vector<std::vector<Warning>> notes(n);

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      const auto& e = index.entries[i];
      const auto path = std::filesystem::path(index.root) / e.path;
      try {
        FaceImage img = loader(path, &notes[i]);
        img.label = e.label;
        outputs[i] = embed_image_raw(backend, img);
      } catch (const std::exception& ex) {
        notes[i].push_back({path.generic_string(), std::string("embedding-failed: ") + ex.what()});
      }
    }
  };
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, n));
  {
    std::vector<std::jthread> pool;
    for (unsigned t = 1; t < threads; ++t) pool.emplace_back(worker);
    worker();
  }

  EmbedResult result;
  auto& cache = result.cache;
  cache.dim = static_cast<std::uint32_t>(backend.dim());
  cache.backend = backend.name();
  cache.fingerprint = index.fingerprint();
  cache.labels = index.labels;
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& w : notes[i]) result.failures.push_back(std::move(w));
    if (!outputs[i]) continue;
    const auto& e = index.entries[i];
    cache.records.push_back({e.path, e.label.id, e.split, std::move(*outputs[i])});
  }
  if (cache.records.empty()) throw EmptyDatasetError("no image could be embedded");
  return result;
}

// ---------------------------------------------------------------------------
// Diagnostics

struct SimilaritySummary {
  std::size_t pairs = 0;
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
  std::vector<std::size_t> histogram;  // equal-width bins over [-1, 1]
};

struct CosineStats {
  SimilaritySummary cross_identity;
  SimilaritySummary all_pairs;
  SimilaritySummary within_identity;
};

/// Cosine similarity statistics over unordered record pairs, split by
/// whether the two records share an identity.
inline CosineStats pairwise_cosine_stats(const EmbeddingCache& cache, std::size_t bins = 20) {
  {
    std::vector<bool> seen(cache.num_classes(), false);
    std::size_t distinct = 0;
    for (const auto& r : cache.records) {
      if (!seen[static_cast<std::size_t>(r.label_id)]) {
        seen[static_cast<std::size_t>(r.label_id)] = true;
        ++distinct;
      }
    }
    if (distinct < 2) throw InsufficientClassesError("cosine statistics need at least two identities");
  }
  if (bins == 0) bins = 1;
  std::vector<Embedding> units;
  units.reserve(cache.records.size());
  for (std::size_t i = 0; i < cache.records.size(); ++i) units.push_back(cache.embedding(i));

  struct Acc {
    SimilaritySummary s;
    double sum = 0.0;
    void add(double v, std::size_t bins) {
      if (s.pairs == 0) {
        s.min = s.max = v;
        s.histogram.assign(bins, 0);
      }
      ++s.pairs;
      sum += v;
      s.min = std::min(s.min, v);
      s.max = std::max(s.max, v);
      const auto b = static_cast<std::size_t>(std::floor((v + 1.0) / 2.0 * static_cast<double>(bins)));
      ++s.histogram[std::min(b, bins - 1)];
    }
    SimilaritySummary done() {
      s.mean = s.pairs ? sum / static_cast<double>(s.pairs) : 0.0;
      return s;
    }
  } cross, all, within;

  for (std::size_t i = 0; i < units.size(); ++i) {
    for (std::size_t j = i + 1; j < units.size(); ++j) {
      const double c = cosine_similarity(units[i], units[j]);
      all.add(c, bins);
      (cache.records[i].label_id == cache.records[j].label_id ? within : cross).add(c, bins);
    }
  }
  return {cross.done(), all.done(), within.done()};
}

}  // namespace facetune
