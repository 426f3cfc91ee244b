#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <thread>

#include "facetune/encoder.hpp"
#include "facetune/image_io.hpp"
#include "facetune/onnx_backend.hpp"
#include "facetune/synthetic.hpp"
#include "test_support.hpp"

namespace facetune {
namespace {

namespace fs = std::filesystem;
using testing::TempDir;

FaceImage aligned_image(std::uint8_t fill, const std::string& subject = "s") {
  FaceImage img;
  img.width = img.height = kAlignedSize;
  img.channels = 3;
  img.pixels.assign(std::size_t(kAlignedSize) * kAlignedSize * 3, fill);
  img.subject = subject;
  return img;
}

FaceImage variant(const std::string& subject, std::size_t i) {
  auto img = aligned_image(0, subject);
  img.pixels[0] = std::uint8_t(i);
  img.pixels[1] = std::uint8_t(i >> 8);
  return img;
}

TEST(MockBackend, DeterministicAndUnitAfterEmbedding) {
  const MockBackend a(7, 64), b(7, 64);
  const auto img = aligned_image(9);
  EXPECT_EQ(a.name(), b.name());
  EXPECT_EQ(embed_image(a, img), embed_image(b, img));
  EXPECT_EQ(embed_image(a, img), embed_image(a, img));
  const auto e = embed_image(a, img);
  EXPECT_EQ(e.dim(), 64u);
  EXPECT_NEAR(l2_norm(e.values()), 1.0, 1e-12);
  const double raw = l2_norm(embed_image_raw(a, img));
  EXPECT_GE(raw, 2.0);
  EXPECT_LT(raw, 3.0);
  EXPECT_NE(embed_image(MockBackend(8, 64), img), e);
}

TEST(MockBackend, WrongShapeThrows) {
  const MockBackend m(7, 8);
  FaceImage img;
  img.width = img.height = 100;
  img.channels = 3;
  img.pixels.assign(100 * 100 * 3, 0);
  EXPECT_THROW(embed_image(m, img), ShapeError);
  EXPECT_THROW(MockBackend(1, 1), DimensionError);
}

TEST(MockBackend, OrthogonalCentersZeroNoise) {
  MockGeometry geo;
  const auto centers = equiangular_centers(2, 16, 90.0, 3);
  geo.centers = {{"a", centers[0]}, {"b", centers[1]}};
  const MockBackend m(3, 16, geo);
  const auto a1 = embed_image(m, variant("a", 1)), a2 = embed_image(m, variant("a", 2));
  const auto b1 = embed_image(m, variant("b", 1));
  EXPECT_NEAR(cosine_similarity(a1, a2), 1.0, 1e-12);
  EXPECT_NEAR(cosine_similarity(a1, b1), 0.0, 1e-12);
}

TEST(EquiangularCenters, PairwiseAngle) {
  for (double sep : {10.0, 45.0, 60.0, 90.0}) {
    const auto c = equiangular_centers(12, 64, sep, 9);
    ASSERT_EQ(c.size(), 12u);
    for (std::size_t i = 0; i < c.size(); ++i) {
      EXPECT_NEAR(l2_norm(c[i]), 1.0, 1e-12);
      for (std::size_t j = i + 1; j < c.size(); ++j) {
        EXPECT_NEAR(dot(c[i], c[j]), std::cos(sep * std::numbers::pi / 180.0), 1e-12);
      }
    }
  }
}

TEST(MockBackend, AutoSeparationIsApproximatelyHonoured) {
  MockGeometry geo;
  geo.auto_separation_deg = 60.0;
  const MockBackend m(4, 256, geo);
  const auto a = *m.center_for("alice"), b = *m.center_for("bob");
  EXPECT_NEAR(dot(a, b), 0.5, 0.1);
  EXPECT_EQ(*m.center_for("alice"), a);
}

TEST(MockBackend, KnownSubjectsAreExactlySeparated) {
  MockGeometry geo;
  geo.auto_separation_deg = 60.0;
  for (int k = 0; k < 10; ++k) geo.known_subjects.push_back("p" + std::to_string(k));
  const MockBackend m(4, 64, geo);
  std::vector<std::vector<double>> c;
  for (const auto& s : geo.known_subjects) c.push_back(*m.center_for(s));
  for (const char* visitor : {"visitor_00", "visitor_01", "stranger"}) {
    const auto v = *m.center_for(visitor);
    EXPECT_NEAR(dot(v, v), 1.0, 1e-12);
    for (const auto& k : c) EXPECT_NEAR(dot(v, k), 0.5, 1e-12) << visitor;
  }
  for (std::size_t i = 0; i < c.size(); ++i) {
    for (std::size_t j = i + 1; j < c.size(); ++j) EXPECT_NEAR(dot(c[i], c[j]), 0.5, 1e-12);
  }
}

// Independent sampler of the noise model: rotate each centre by |N(0,1)| *
// sigma towards a uniformly random tangent direction.
std::vector<double> sample_noisy(const std::vector<double>& c, double sigma_rad, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> t(c.size());
  for (auto& x : t) x = nd(rng);
  double tc = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) tc += t[i] * c[i];
  double tn = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) tn += (t[i] -= tc * c[i]) * t[i];
  tn = std::sqrt(tn);
  const double alpha = std::abs(nd(rng)) * sigma_rad;
  std::vector<double> v(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) v[i] = std::cos(alpha) * c[i] + std::sin(alpha) * t[i] / tn;
  return v;
}

TEST(MockBackend, CrossIdentityMeanMatchesMonteCarlo) {
  const std::size_t dim = 32;
  const double sep = 60.0, noise = 15.0;
  const auto centers = equiangular_centers(2, dim, sep, 21);
  MockGeometry geo;
  geo.centers = {{"a", centers[0]}, {"b", centers[1]}};
  geo.noise_deg = noise;
  const MockBackend m(21, dim, geo);

  EmbeddingCache cache;
  cache.dim = dim;
  cache.labels = {{"a", 0}, {"b", 1}};
  for (int id = 0; id < 2; ++id) {
    for (std::size_t i = 0; i < 200; ++i) {
      cache.records.push_back({"", id, Split::train, m.encode(variant(cache.labels[id].name, i))});
    }
  }
  const auto stats = pairwise_cosine_stats(cache);
  EXPECT_EQ(stats.cross_identity.pairs, 200u * 200u);

  std::mt19937_64 rng(99);
  double sum = 0.0;
  const int samples = 10000;
  for (int s = 0; s < samples; ++s) {
    const auto va = sample_noisy(centers[0], noise * std::numbers::pi / 180.0, rng);
    const auto vb = sample_noisy(centers[1], noise * std::numbers::pi / 180.0, rng);
    double d = 0.0;
    for (std::size_t i = 0; i < dim; ++i) d += va[i] * vb[i];
    sum += d;
  }
  EXPECT_NEAR(stats.cross_identity.mean, sum / samples, 0.02);
}

EmbeddingCache two_point_cache(std::vector<double> a, std::vector<double> b) {
  EmbeddingCache cache;
  cache.dim = std::uint32_t(a.size());
  cache.labels = {{"a", 0}, {"b", 1}};
  cache.records = {{"a/1", 0, Split::train, std::move(a)}, {"b/1", 1, Split::train, std::move(b)}};
  return cache;
}

TEST(CosineStats, IdenticalAndOrthogonal) {
  EXPECT_NEAR(pairwise_cosine_stats(two_point_cache({1, 2, 3}, {2, 4, 6})).cross_identity.mean, 1.0, 1e-15);
  EXPECT_EQ(pairwise_cosine_stats(two_point_cache({1, 0}, {0, 5})).cross_identity.mean, 0.0);
}

TEST(CosineStats, SingleIdentityThrows) {
  auto cache = two_point_cache({1, 0}, {0, 1});
  cache.records[1].label_id = 0;
  EXPECT_THROW(pairwise_cosine_stats(cache), InsufficientClassesError);
}

TEST(CosineStats, ClustersAtKnownAnglesMatchBruteForce) {
  const auto centers = equiangular_centers(4, 12, 50.0, 5);
  std::mt19937_64 rng(6);
  EmbeddingCache cache;
  cache.dim = 12;
  for (int c = 0; c < 4; ++c) {
    cache.labels.push_back({"c" + std::to_string(c), c});
    for (int i = 0; i < 5; ++i) {
      auto v = sample_noisy(centers[std::size_t(c)], 0.2, rng);
      for (auto& x : v) x *= 1.0 + i;
      cache.records.push_back({"", c, Split::train, v});
    }
  }
  const auto stats = pairwise_cosine_stats(cache, 10);
  long double cross = 0.0L, within = 0.0L;
  std::size_t nc = 0, nw = 0;
  double lo = 2.0, hi = -2.0;
  for (std::size_t i = 0; i < cache.records.size(); ++i) {
    for (std::size_t j = i + 1; j < cache.records.size(); ++j) {
      const auto& a = cache.records[i].raw;
      const auto& b = cache.records[j].raw;
      long double ab = 0, aa = 0, bb = 0;
      for (std::size_t d = 0; d < 12; ++d) {
        ab += (long double)a[d] * b[d];
        aa += (long double)a[d] * a[d];
        bb += (long double)b[d] * b[d];
      }
      const long double c = ab / std::sqrt(aa * bb);
      if (cache.records[i].label_id == cache.records[j].label_id) {
        within += c;
        ++nw;
      } else {
        cross += c;
        ++nc;
        lo = std::min(lo, double(c));
        hi = std::max(hi, double(c));
      }
    }
  }
  EXPECT_EQ(stats.cross_identity.pairs, nc);
  EXPECT_EQ(stats.within_identity.pairs, nw);
  EXPECT_EQ(stats.all_pairs.pairs, nc + nw);
  EXPECT_NEAR(stats.cross_identity.mean, double(cross / nc), 1e-12);
  EXPECT_NEAR(stats.within_identity.mean, double(within / nw), 1e-12);
  EXPECT_NEAR(stats.all_pairs.mean, double((cross + within) / (nc + nw)), 1e-12);
  EXPECT_NEAR(stats.cross_identity.min, lo, 1e-12);
  EXPECT_NEAR(stats.cross_identity.max, hi, 1e-12);
  std::size_t total = 0;
  for (auto h : stats.cross_identity.histogram) total += h;
  EXPECT_EQ(total, nc);
  EXPECT_EQ(stats.cross_identity.histogram.size(), 10u);
}

EmbeddingCache random_cache(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  EmbeddingCache c;
  c.dim = 5;
  c.backend = "mock(seed=1,dim=5)";
  c.fingerprint = rng();
  c.labels = {{"ann", 0}, {"bo", 1}, {"ĉu", 2}};
  for (int i = 0; i < 20; ++i) {
    std::vector<double> v(5);
    for (auto& x : v) x = nd(rng) * 3.0;
    c.records.push_back({"dir/" + std::to_string(i) + ".png", i % 3, Split(i % 3), v});
  }
  return c;
}

TEST(EmbeddingCacheFile, RoundTripIsIdentity) {
  TempDir dir;
  const auto c = random_cache(1);
  c.save(dir.path() / "c.emb");
  const auto back = EmbeddingCache::load(dir.path() / "c.emb");
  EXPECT_EQ(back, c);
  for (std::size_t i = 0; i < back.records.size(); ++i) {
    EXPECT_NEAR(l2_norm(back.embedding(i).values()), 1.0, 1e-6);
  }
  EXPECT_EQ(back.select(Split::train).size(), 7u);
  EXPECT_EQ(back.select(Split::unassigned).size(), 20u);
}

TEST(EmbeddingCacheFile, LayoutHeader) {
  const auto c = random_cache(2);
  ByteReader r(c.serialize().buffer());
  r.expect_magic("EMB1");
  EXPECT_EQ(r.u32(), 5u);
  EXPECT_EQ(r.u64(), 20u);
  EXPECT_EQ(r.u64(), c.fingerprint);
  EXPECT_EQ(r.str(), c.backend);
}

TEST(EmbeddingCacheFile, CorruptionDetected) {
  TempDir dir;
  auto bytes = random_cache(3).serialize().buffer();
  bytes.resize(bytes.size() - 3);
  std::ofstream(dir.path() / "t.emb", std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  EXPECT_THROW(EmbeddingCache::load(dir.path() / "t.emb"), FormatError);
  std::ofstream(dir.path() / "m.emb") << "EMB2";
  EXPECT_THROW(EmbeddingCache::load(dir.path() / "m.emb"), FormatError);
}

TEST(EmbedDataset, OneRecordPerImageAndFailuresReported) {
  TempDir dir;
  const SyntheticLayout layout{10, 30, 0, 0, 48};
  write_synthetic_dataset(dir.path(), layout, 5);
  auto idx = split_dataset(ingest_dataset(dir.path() / "dataset").index, 0.8, 1).index;
  ASSERT_EQ(idx.entries.size(), 300u);
  const MockBackend m(1, 16);
  auto loader = [](const fs::path& p, std::vector<Warning>* w) { return load_face(p, w); };
  const auto r1 = embed_dataset(m, idx, loader, 1);
  const auto r4 = embed_dataset(m, idx, loader, 4);
  EXPECT_EQ(r1.cache.records.size(), 300u);
  EXPECT_TRUE(r1.failures.empty());
  EXPECT_EQ(r1.cache, r4.cache);
  EXPECT_EQ(r1.cache.fingerprint, idx.fingerprint());

  fs::remove(dir.path() / "dataset" / idx.entries[3].path);
  const auto partial = embed_dataset(m, idx, loader, 2);
  EXPECT_EQ(partial.cache.records.size(), 299u);
  ASSERT_EQ(partial.failures.size(), 1u);

  DatasetIndex empty;
  EXPECT_THROW(embed_dataset(m, empty, loader), EmptyDatasetError);
}

TEST(BackendManifestFile, ParseAndErrors) {
  TempDir dir;
  const auto path = dir.path() / "enc.manifest";
  std::ofstream(path) << "model = m.onnx\ndim = 16\nchannel_order = BGR\nmean = 0.1 0.2 0.3\nstd = 1 2 4\n";
  const auto m = BackendManifest::load(path);
  EXPECT_EQ(m.model_path, dir.path() / "m.onnx");
  EXPECT_EQ(m.dim, 16u);
  EXPECT_EQ(m.channel_order, "BGR");
  EXPECT_EQ(m.stddev[2], 4.0);

  auto img = aligned_image(0);
  img.at(0, 0, 0) = 255;  // red
  const auto t = to_input_tensor(img, m);
  const std::size_t plane = std::size_t(kAlignedSize) * kAlignedSize;
  EXPECT_FLOAT_EQ(t[0], float((0.0 - 0.1) / 1.0));           // B plane
  EXPECT_FLOAT_EQ(t[2 * plane], float((1.0 - 0.3) / 4.0));   // R plane last

  std::ofstream(path) << "model = m.onnx\ndim = 16\nchannel_order = XYZ\nmean = 0 0 0\nstd = 1 1 1\n";
  EXPECT_THROW(BackendManifest::load(path), BackendLoadError);
  std::ofstream(path) << "model = m.onnx\n";
  EXPECT_THROW(BackendManifest::load(path), BackendLoadError);
  EXPECT_THROW(BackendManifest::load(dir.path() / "absent"), BackendLoadError);
}

fs::path write_fixture_manifest(const fs::path& dir, std::size_t dim, const fs::path& model) {
  const auto path = dir / "tiny.manifest";
  std::ofstream(path) << "model = " << model.string() << "\ndim = " << dim
                      << "\nchannel_order = RGB\nmean = 0.5 0.5 0.5\nstd = 1 1 1\nsource = fixture\n";
  return path;
}

TEST(OnnxBackend, FixtureOutputMatchesReference) {
  TempDir dir;
  const auto backend = OnnxBackend::from_manifest(
      write_fixture_manifest(dir.path(), 16, fs::path(FACETUNE_TEST_DATA_DIR) / "tiny_encoder.onnx"));
  EXPECT_EQ(backend->dim(), 16u);
  // pixels of 255 with mean 0.5 and std 1 feed 0.5 everywhere
  const auto out = embed_image_raw(*backend, aligned_image(255));
  const std::vector<double> want{-0.2328269, -0.0883887, 0.0107958, -0.0800672, 0.3722921, -0.0563448,
                                 -0.3858959, -0.1375384, -0.3169524, 0.3588062, -0.0896096, -0.2440440,
                                 -0.0438958, -0.2269270, -0.1903329, 0.3120117};
  ASSERT_EQ(out.size(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(out[i], want[i], 1e-4) << i;
}

TEST(OnnxBackend, ConcurrentCallsAgree) {
  TempDir dir;
  const auto backend = OnnxBackend::from_manifest(
      write_fixture_manifest(dir.path(), 16, fs::path(FACETUNE_TEST_DATA_DIR) / "tiny_encoder.onnx"));
  const auto img = synthetic_face(3, kAlignedSize).image;
  const auto ref = backend->encode(img);
  std::vector<std::vector<double>> outs(4);
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < outs.size(); ++t) pool.emplace_back([&, t] { outs[t] = backend->encode(img); });
  }
  for (const auto& o : outs) EXPECT_EQ(o, ref);
}

TEST(OnnxBackend, LoadFailures) {
  TempDir dir;
  std::ofstream(dir.path() / "bad.onnx") << "this is not a model";
  EXPECT_THROW(OnnxBackend::from_manifest(write_fixture_manifest(dir.path(), 16, dir.path() / "bad.onnx")),
               BackendLoadError);
  EXPECT_THROW(OnnxBackend::from_manifest(write_fixture_manifest(dir.path(), 16, dir.path() / "none.onnx")),
               BackendLoadError);
  EXPECT_THROW(OnnxBackend::from_manifest(
                   write_fixture_manifest(dir.path(), 8, fs::path(FACETUNE_TEST_DATA_DIR) / "tiny_encoder.onnx")),
               BackendLoadError);
}

}  // namespace
}  // namespace facetune
