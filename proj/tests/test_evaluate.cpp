#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <random>

#include "facetune/evaluate.hpp"
#include "test_support.hpp"

namespace facetune {
namespace {

namespace fs = std::filesystem;
using testing::random_unit_rows;
using testing::TempDir;

Gallery basis_gallery(std::size_t c, double scale = 100.0) {
  Gallery g;
  g.class_embeddings = Matrix(c, c + 1);
  for (std::size_t i = 0; i < c; ++i) {
    g.class_embeddings(i, i) = 1.0;
    g.labels.push_back({"p" + std::to_string(i), int(i)});
    g.prompts.push_back(g.labels.back().name);
  }
  g.logit_scale = scale;
  return g;
}

// Frame that basis_gallery identifies as class k with confidence ~1.
Embedding frame_for(std::size_t k, std::size_t c) {
  std::vector<double> v(c + 1, 0.0);
  v[k] = 1.0;
  return l2_normalize(v);
}

// Frame orthogonal to every class: uniform probabilities, so Unknown.
Embedding unknown_frame(std::size_t c) {
  std::vector<double> v(c + 1, 0.0);
  v[c] = 1.0;
  return l2_normalize(v);
}

TEST(DecideSession, Unanimous) {
  const auto g = basis_gallery(3);
  Session s{"a", g.labels[0], std::vector<Embedding>(5, frame_for(0, 3))};
  const auto d = decide_session(s, g, 0.8);
  EXPECT_TRUE(d.identified);
  EXPECT_EQ(d.label.id, 0);
  EXPECT_NEAR(d.confidence, 1.0, 1e-12);
}

TEST(DecideSession, PluralityWithoutMajorityIsUnknown) {
  const auto g = basis_gallery(3);
  Session s{"a", g.labels[0],
            {frame_for(0, 3), frame_for(0, 3), unknown_frame(3), unknown_frame(3), frame_for(1, 3)}};
  EXPECT_FALSE(decide_session(s, g, 0.8).identified);
}

TEST(DecideSession, StrictMajorityWins) {
  const auto g = basis_gallery(3);
  Session s{"a", g.labels[0],
            {frame_for(0, 3), unknown_frame(3), frame_for(0, 3), frame_for(2, 3), frame_for(0, 3)}};
  const auto d = decide_session(s, g, 0.8);
  EXPECT_TRUE(d.identified);
  EXPECT_EQ(d.label.id, 0);
  EXPECT_NEAR(d.confidence, 1.0, 1e-12);  // mean over the three winning frames
}

TEST(DecideSession, EvenSplitIsUnknown) {
  const auto g = basis_gallery(2);
  Session s{"a", g.labels[0], {frame_for(0, 2), frame_for(0, 2), frame_for(1, 2), frame_for(1, 2)}};
  EXPECT_FALSE(decide_session(s, g, 0.8).identified);
  Session empty{"e", std::nullopt, {}};
  EXPECT_THROW(decide_session(empty, g, 0.8), EmptyDatasetError);
}

TEST(ScoreSessions, PerfectRunAtProtocolScale) {
  const auto g = basis_gallery(10);
  std::vector<Session> sessions;
  for (std::size_t k = 0; k < 10; ++k) sessions.push_back({g.labels[k].name, g.labels[k], std::vector<Embedding>(5, frame_for(k, 10))});
  for (int u = 0; u < 2; ++u) sessions.push_back({"v" + std::to_string(u), std::nullopt, std::vector<Embedding>(5, unknown_frame(10))});
  const auto c = score_sessions(sessions, g, 0.8);
  EXPECT_EQ(c, (ConfusionCounts{10, 2, 0, 0}));
  EXPECT_EQ(accuracy(c), 100.0);
  EXPECT_EQ(fpr(c), 0.0);
  EXPECT_EQ(fnr(c), 0.0);
}

TEST(ScoreSessions, MisidentificationIsFalsePositive) {
  const auto g = basis_gallery(3);
  std::vector<Session> sessions{{"a", g.labels[0], std::vector<Embedding>(5, frame_for(1, 3))}};
  EXPECT_EQ(score_sessions(sessions, g, 0.8), (ConfusionCounts{0, 0, 1, 0}));
  sessions[0].truth = std::nullopt;
  EXPECT_EQ(score_sessions(sessions, g, 0.8), (ConfusionCounts{0, 0, 1, 0}));
  sessions[0].frames.assign(5, unknown_frame(3));
  EXPECT_EQ(score_sessions(sessions, g, 0.8), (ConfusionCounts{0, 1, 0, 0}));
  sessions[0].truth = g.labels[2];
  EXPECT_EQ(score_sessions(sessions, g, 0.8), (ConfusionCounts{0, 0, 0, 1}));
}

struct RandomWorld {
  Gallery gallery;
  std::vector<Session> sessions;
};

RandomWorld random_world(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  RandomWorld w;
  const std::size_t c = 4, d = 6;
  w.gallery.class_embeddings = random_unit_rows(rng, c, d);
  for (std::size_t i = 0; i < c; ++i) {
    w.gallery.labels.push_back({"p" + std::to_string(i), int(i)});
    w.gallery.prompts.push_back("x");
  }
  w.gallery.logit_scale = 8.0;
  std::normal_distribution<double> nd(0.0, 0.35);
  for (int s = 0; s < 30; ++s) {
    Session sess;
    sess.name = "s" + std::to_string(s);
    const bool known = s % 4 != 3;
    std::vector<double> base(d);
    if (known) {
      sess.truth = w.gallery.labels[std::size_t(s) % c];
      const auto r = w.gallery.class_embeddings.row(std::size_t(s) % c);
      base.assign(r.begin(), r.end());
    } else {
      const auto m = random_unit_rows(rng, 1, d);
      base.assign(m.row(0).begin(), m.row(0).end());
    }
    const int frames = 1 + s % 6;
    for (int f = 0; f < frames; ++f) {
      auto v = base;
      for (auto& x : v) x += nd(rng);
      sess.frames.push_back(l2_normalize(v));
    }
    w.sessions.push_back(std::move(sess));
  }
  return w;
}

// Independent tally: per-frame softmax and threshold, strict majority, then
// the counting rule, written without the library's decision types.
ConfusionCounts naive_counts(const RandomWorld& w, double threshold) {
  ConfusionCounts c;
  for (const auto& s : w.sessions) {
    std::map<int, int> votes;
    for (const auto& f : s.frames) {
      std::vector<long double> x;
      for (std::size_t k = 0; k < w.gallery.num_classes(); ++k) {
        long double dotv = 0;
        for (std::size_t j = 0; j < f.dim(); ++j) dotv += (long double)f.values()[j] * w.gallery.class_embeddings(k, j);
        x.push_back(w.gallery.logit_scale * dotv);
      }
      long double z = 0;
      for (auto v : x) z += std::exp(v);
      int best = 0;
      for (std::size_t k = 1; k < x.size(); ++k) if (x[k] > x[std::size_t(best)]) best = int(k);
      const bool ok = std::exp(x[std::size_t(best)]) / z >= threshold;
      ++votes[ok ? best : -1];
    }
    int winner = -1;
    for (auto [k, n] : votes) if (2 * n > int(s.frames.size())) winner = k;
    if (!s.truth) {
      (winner >= 0 ? c.fp : c.tn)++;
    } else if (winner < 0) {
      c.fn++;
    } else {
      (winner == s.truth->id ? c.tp : c.fp)++;
    }
  }
  return c;
}

TEST(ScoreSessions, MatchesBruteForceTally) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto w = random_world(seed);
    for (double t : {0.3, 0.5, 0.8, 0.95}) {
      const auto c = score_sessions(w.sessions, w.gallery, t);
      EXPECT_EQ(c, naive_counts(w, t)) << "seed " << seed << " threshold " << t;
      EXPECT_EQ(c.total(), std::int64_t(w.sessions.size()));
    }
  }
}

TEST(ScoreSessions, ThresholdSweepIsMonotoneSessionWise) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto w = random_world(seed);
    std::vector<SessionResult> prev;
    for (double t = 0.3; t < 1.0; t += 0.05) {
      const auto cur = run_sessions(w.sessions, w.gallery, t);
      if (!prev.empty()) {
        for (std::size_t i = 0; i < cur.size(); ++i) {
          if (!cur[i].truth) {
            EXPECT_FALSE(cur[i].outcome == Outcome::fp && prev[i].outcome == Outcome::tn);
          } else {
            EXPECT_FALSE(prev[i].outcome == Outcome::fn && cur[i].outcome != Outcome::fn);
          }
        }
      }
      prev = cur;
    }
  }
}

TEST(Metrics, AccuracyExamples) {
  EXPECT_NEAR(accuracy({3, 1, 1, 1}), 66.67, 0.005);
  EXPECT_EQ(accuracy({9, 0, 2, 1}), 75.0);
  EXPECT_EQ(accuracy({4, 3, 0, 0}), 100.0);
  EXPECT_THROW(accuracy({}), UndefinedMetricError);
}

TEST(Metrics, FprExamples) {
  EXPECT_EQ(fpr({0, 4, 1, 0}), 20.0);
  EXPECT_EQ(fpr({0, 5, 0, 0}), 0.0);
  EXPECT_EQ(fpr({0, 1, 9, 0}), 90.0);
  EXPECT_THROW(fpr({10, 0, 0, 2}), UndefinedMetricError);
}

TEST(Metrics, FnrExamples) {
  EXPECT_EQ(fnr({1, 0, 0, 1}), 50.0);
  EXPECT_EQ(fnr({7, 0, 0, 0}), 0.0);
  EXPECT_EQ(fnr({0, 0, 0, 2}), 100.0);
  EXPECT_THROW(fnr({0, 3, 1, 0}), UndefinedMetricError);
}

// r is the correctly rounded value of num / den: |r den - num| <= ulp(r) den / 2,
// evaluated exactly in long double (64-bit significand).
bool correctly_rounded(double r, std::int64_t num, std::int64_t den) {
  const long double err = std::abs((long double)r * den - (long double)num);
  const double ulp = std::nextafter(r, INFINITY) - r;
  return err <= (long double)ulp * den / 2;
}

TEST(Metrics, AgreeWithExactRationals) {
  std::mt19937_64 rng(41);
  std::uniform_int_distribution<std::int64_t> u(0, 1000);
  for (int trial = 0; trial < 10000; ++trial) {
    const ConfusionCounts c{u(rng), u(rng), u(rng), u(rng)};
    if (c.total() > 0) {
      const double a = accuracy(c);
      EXPECT_TRUE(correctly_rounded(a, 100 * (c.tp + c.tn), c.total()));
      EXPECT_GE(a, 0.0);
      EXPECT_LE(a, 100.0);
    }
    if (c.fp + c.tn > 0) {
      EXPECT_TRUE(correctly_rounded(fpr(c), 100 * c.fp, c.fp + c.tn));
    }
    if (c.fn + c.tp > 0) {
      EXPECT_TRUE(correctly_rounded(fnr(c), 100 * c.fn, c.fn + c.tp));
    }
  }
}

TEST(Metrics, NoUnknownsNoMisidentificationMeansUndefinedFpr) {
  const auto g = basis_gallery(3);
  std::vector<Session> sessions{{"a", g.labels[0], std::vector<Embedding>(3, frame_for(0, 3))},
                                {"b", g.labels[1], std::vector<Embedding>(3, unknown_frame(3))}};
  const auto c = score_sessions(sessions, g, 0.8);
  EXPECT_THROW(fpr(c), UndefinedMetricError);
  auto report = evaluate_sessions("m", sessions, g, 0.8);
  EXPECT_FALSE(report.fpr.has_value());
  EXPECT_EQ(report.fnr, 50.0);
}

EmbeddingCache cache_with_test(const std::vector<std::pair<std::vector<double>, int>>& items, std::size_t c) {
  EmbeddingCache cache;
  cache.dim = std::uint32_t(items.front().first.size());
  for (std::size_t i = 0; i < c; ++i) cache.labels.push_back({"p" + std::to_string(i), int(i)});
  for (const auto& [v, id] : items) cache.records.push_back({"", id, Split::test, v});
  return cache;
}

TEST(TrainingAccuracy, SeparableIsPerfect) {
  const auto g = basis_gallery(3);
  const auto cache = cache_with_test({{{1, 0.1, 0, 0}, 0}, {{0, 2, 0, 0.3}, 1}, {{0.2, 0, 5, 0}, 2}}, 3);
  EXPECT_EQ(training_accuracy(cache, g), 100.0);
}

TEST(TrainingAccuracy, EqualRowsTieToClassZero) {
  auto g = basis_gallery(3);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t j = 0; j < 4; ++j) g.class_embeddings(r, j) = j == 0 ? 1.0 : 0.0;
  }
  const auto cache = cache_with_test({{{1, 0, 0, 0}, 0}, {{0, 1, 0, 0}, 1}, {{0, 0, 1, 0}, 2}, {{1, 1, 0, 0}, 0}}, 3);
  EXPECT_EQ(training_accuracy(cache, g), 50.0);
}

TEST(TrainingAccuracy, MatchesBruteForceArgmax) {
  std::mt19937_64 rng(42);
  Gallery g;
  g.class_embeddings = random_unit_rows(rng, 5, 7);
  for (int i = 0; i < 5; ++i) {
    g.labels.push_back({"p" + std::to_string(i), i});
    g.prompts.push_back("x");
  }
  std::vector<std::pair<std::vector<double>, int>> items;
  std::normal_distribution<double> nd(0.0, 0.6);
  for (int i = 0; i < 200; ++i) {
    const int id = i % 5;
    std::vector<double> v(g.class_embeddings.row(std::size_t(id)).begin(), g.class_embeddings.row(std::size_t(id)).end());
    for (auto& x : v) x += nd(rng);
    items.push_back({v, id});
  }
  const auto cache = cache_with_test(items, 5);
  int correct = 0;
  for (const auto& [v, id] : items) {
    int best = 0;
    double bv = -INFINITY;
    for (int c = 0; c < 5; ++c) {
      double s = 0;
      for (std::size_t j = 0; j < 7; ++j) s += v[j] * g.class_embeddings(std::size_t(c), j);
      if (s > bv) bv = s, best = c;
    }
    correct += best == id;
  }
  EXPECT_EQ(training_accuracy(cache, g), 100.0 * correct / 200.0);
  auto empty = cache;
  for (auto& r : empty.records) r.split = Split::train;
  EXPECT_THROW(training_accuracy(empty, g), EmptyDatasetError);
}

EvaluationReport make_report(const std::string& model, ConfusionCounts c, double train) {
  EvaluationReport r;
  r.model = model;
  r.counts = c;
  r.training_accuracy = train;
  r.compute_rates();
  return r;
}

TEST(RenderReport, SingleReportAllBest) {
  const std::vector<EvaluationReport> reports{make_report("base", {9, 0, 2, 1}, 98.5)};
  const auto out = render_report(reports);
  ASSERT_EQ(out.rows.size(), 1u);
  for (bool b : out.rows[0].best) EXPECT_TRUE(b);
  EXPECT_NE(out.text.find("75.00*"), std::string::npos);
  EXPECT_NE(out.text.find("Deployment Accuracy"), std::string::npos);
}

TEST(RenderReport, LowerRatesAreBest) {
  const std::vector<EvaluationReport> reports{make_report("a", {8, 4, 1, 1}, 90.0),
                                              make_report("b", {9, 1, 1, 1}, 95.0)};
  const auto out = render_report(reports);
  EXPECT_TRUE(out.rows[0].best[2]);   // FPR 20 < 50
  EXPECT_FALSE(out.rows[1].best[2]);
  EXPECT_TRUE(out.rows[1].best[0]);   // higher training accuracy
  EXPECT_TRUE(out.rows[0].best[1]);   // deployment 85.71 > 83.33
  EXPECT_TRUE(out.rows[1].best[3]);   // FNR 10 < 11.1
}

TEST(RenderReport, CsvRoundTrip) {
  auto odd = make_report("name, with \"quotes\"", {1, 2, 0, 0}, 100.0 / 3.0);
  odd.fpr.reset();
  const std::vector<EvaluationReport> reports{make_report("base", {9, 0, 2, 1}, 98.5), odd};
  const auto out = render_report(reports);
  const auto rows = parse_report_csv(out.csv);
  EXPECT_EQ(rows, out.rows);
  std::vector<EvaluationReport> again;
  for (const auto& r : rows) again.push_back(report_from_row(r));
  EXPECT_EQ(render_report(again).csv, out.csv);
  EXPECT_THROW(parse_report_csv("bad header\n"), FormatError);
}

TEST(SessionSources, ManifestAndDirectory) {
  TempDir dir;
  const auto manifest = parse_session_manifest("# header\np0 a.png b.png\nUNKNOWN /abs/c.png\n\n", dir.path());
  ASSERT_EQ(manifest.size(), 2u);
  EXPECT_EQ(manifest[0].name, "2:p0");
  EXPECT_EQ(manifest[0].frames[1], dir.path() / "b.png");
  EXPECT_EQ(manifest[1].frames[0], fs::path("/abs/c.png"));
  EXPECT_THROW(parse_session_manifest("p0\n", dir.path()), FormatError);
  EXPECT_THROW(parse_session_manifest("# nothing\n", dir.path()), EmptyDatasetError);

  const std::vector<IdentityLabel> labels{{"p0", 0}, {"p1", 1}};
  EXPECT_EQ(resolve_identity(manifest[0], labels)->id, 0);
  EXPECT_FALSE(resolve_identity(manifest[1], labels).has_value());
  SessionSpec stranger{"x", "nobody", {}};
  EXPECT_THROW(resolve_identity(stranger, labels), FormatError);

  for (const char* name : {"p1", "guest"}) {
    fs::create_directories(dir.path() / "s" / name);
    for (const char* f : {"frame_001.png", "frame_000.png", "other.png"}) std::ofstream(dir.path() / "s" / name / f) << "x";
  }
  const auto scanned = scan_session_dir(dir.path() / "s", labels);
  ASSERT_EQ(scanned.size(), 2u);
  EXPECT_EQ(scanned[0].name, "guest");
  EXPECT_EQ(scanned[0].identity, "UNKNOWN");
  EXPECT_EQ(scanned[1].identity, "p1");
  ASSERT_EQ(scanned[1].frames.size(), 2u);
  EXPECT_EQ(scanned[1].frames[0].filename(), "frame_000.png");
  EXPECT_THROW(scan_session_dir(dir.path() / "missing", labels), EmptyDatasetError);
}

TEST(DecisionsText, OneLinePerSession) {
  const auto g = basis_gallery(2);
  std::vector<Session> sessions{{"p0", g.labels[0], std::vector<Embedding>(3, frame_for(0, 2))},
                                {"guest", std::nullopt, std::vector<Embedding>(3, unknown_frame(2))}};
  const auto r = evaluate_sessions("m", sessions, g, 0.8);
  EXPECT_EQ(session_decisions_text(r), "p0 p0 p0 1.0000 TP\nguest UNKNOWN UNKNOWN 0.5000 TN\n");
}

}  // namespace
}  // namespace facetune
