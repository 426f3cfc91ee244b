#pragma once

// Synthetic face-shaped data for encoder-free runs: smooth seeded pixel
// patterns with landmarks placed by a random similarity of the canonical
// template. Content is irrelevant to the mock encoder beyond its hash; the
// point is to drive the real ingestion, alignment and file paths.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "facetune/image_io.hpp"
#include "facetune/preprocess.hpp"
#include "facetune/rng.hpp"

namespace facetune {

struct SyntheticFace {
  FaceImage image;
  Landmarks5 landmarks;
};

/// A `size` x `size` RGB image of three seeded sinusoids per channel, plus
/// landmarks for a face scaled by [0.45, 0.6] x size/224, rotated within
/// +-15 degrees and centred with a few pixels of jitter.
inline SyntheticFace synthetic_face(std::uint64_t seed, int size = 128) {
  SplitMix64 rng(seed);
  SyntheticFace out;
  auto& img = out.image;
  img.width = img.height = size;
  img.channels = 3;
  img.pixels.resize(static_cast<std::size_t>(size) * size * 3);
  double fx[3][3], fy[3][3], ph[3][3];
  for (int c = 0; c < 3; ++c) {
    for (int k = 0; k < 3; ++k) {
      fx[c][k] = (rng.uniform() - 0.5) * 0.3;
      fy[c][k] = (rng.uniform() - 0.5) * 0.3;
      ph[c][k] = rng.uniform() * 2.0 * std::numbers::pi;
    }
  }
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      for (int c = 0; c < 3; ++c) {
        double v = 0.0;
        for (int k = 0; k < 3; ++k) v += std::sin(fx[c][k] * x + fy[c][k] * y + ph[c][k]);
        img.at(x, y, c) = static_cast<std::uint8_t>(std::lround(127.5 + 127.5 * v / 3.0));
      }
    }
  }
  const double scale = (0.45 + 0.15 * rng.uniform()) * size / kAlignedSize * 2.0;
  const double angle = (rng.uniform() - 0.5) * (30.0 * std::numbers::pi / 180.0);
  const double half = kAlignedSize / 2.0;
  // Map the template centre onto the image centre (plus jitter).
  auto tf = SimilarityTransform::from_angle(scale, angle, {0.0, 0.0});
  const Point2 c = tf.apply({half, half});
  tf.translation = {size / 2.0 - c.x + (rng.uniform() - 0.5) * 4.0, size / 2.0 - c.y + (rng.uniform() - 0.5) * 4.0};
  out.landmarks = apply(tf, canonical_template());
  return out;
}

struct SyntheticLayout {
  int identities = 10;
  int images_per_identity = 30;
  int unknown_participants = 2;
  int frames_per_session = 5;
  int image_size = 128;
};

inline std::string synthetic_identity_name(int k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "person_%02d", k);
  return buf;
}

inline std::string synthetic_visitor_name(int k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "visitor_%02d", k);
  return buf;
}

/// Writes <out>/dataset/<person_XX>/img_YYY.png (+ .lm5 sidecars) and
/// <out>/sessions/<name>/frame_ZZZ.png (+ .lm5) for every enrolled person
/// and each unknown visitor.
inline void write_synthetic_dataset(const std::filesystem::path& out, const SyntheticLayout& layout, std::uint64_t seed) {
  namespace fs = std::filesystem;
  auto emit = [&](const fs::path& dir, const std::string& stem, std::uint64_t s) {
    fs::create_directories(dir);
    const auto face = synthetic_face(s, layout.image_size);
    save_png(dir / (stem + ".png"), face.image);
    write_landmarks(dir / (stem + ".lm5"), face.landmarks);
  };
  char stem[32];
  for (int k = 0; k < layout.identities; ++k) {
    const auto name = synthetic_identity_name(k);
    for (int i = 0; i < layout.images_per_identity; ++i) {
      std::snprintf(stem, sizeof stem, "img_%03d", i);
      emit(out / "dataset" / name, stem, hash_combine(hash_combine(seed, fnv1a64(name)), static_cast<std::uint64_t>(i)));
    }
  }
  auto session = [&](const std::string& name) {
    for (int f = 0; f < layout.frames_per_session; ++f) {
      std::snprintf(stem, sizeof stem, "frame_%03d", f);
      emit(out / "sessions" / name, stem,
           hash_combine(hash_combine(seed ^ 0x5E55107ULL, fnv1a64(name)), static_cast<std::uint64_t>(f)));
    }
  };
  for (int k = 0; k < layout.identities; ++k) session(synthetic_identity_name(k));
  for (int k = 0; k < layout.unknown_participants; ++k) session(synthetic_visitor_name(k));
}

}  // namespace facetune
