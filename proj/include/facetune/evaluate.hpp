#pragma once

// Deployment-protocol scoring: per-session decisions, confusion counts,
// accuracy / FPR / FNR and the comparison table.
//
// Counting rule, one count per session:
//   known participant   correct identity -> TP, Unknown -> FN, wrong identity -> FP
//   unknown participant Unknown -> TN, any identity -> FP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "facetune/config.hpp"
#include "facetune/core.hpp"
#include "facetune/encoder.hpp"
#include "facetune/recognize.hpp"

namespace facetune {

struct Session {
  std::string name;
  std::optional<IdentityLabel> truth;  // nullopt: participant not enrolled
  std::vector<Embedding> frames;
  double duration_seconds = 5.0;
};

/// Per-frame prediction followed by a strict-majority vote. A label (or
/// Unknown) wins only with more than half of the frames; anything else is
/// Unknown. Confidence is the mean confidence of the winning frames, or of
/// all frames when no option has a majority. Probabilities are the mean of
/// the frame probability vectors.
inline RecognitionDecision decide_session(const Session& s, const Gallery& gallery, double threshold) {
  if (s.frames.empty()) throw EmptyDatasetError("session " + s.name + " has no frames");
  std::vector<RecognitionDecision> frames;
  frames.reserve(s.frames.size());
  for (const auto& f : s.frames) frames.push_back(predict(f, gallery, threshold));

  const int unknown_key = -1;
  std::map<int, std::size_t> votes;
  for (const auto& d : frames) ++votes[d.identified ? d.label.id : unknown_key];
  std::optional<int> winner;
  for (const auto& [key, count] : votes) {
    if (2 * count > frames.size()) winner = key;
  }

  RecognitionDecision out;
  out.probabilities.assign(gallery.num_classes(), 0.0);
  for (const auto& d : frames) {
    for (std::size_t c = 0; c < out.probabilities.size(); ++c) out.probabilities[c] += d.probabilities[c];
  }
  for (double& p : out.probabilities) p /= static_cast<double>(frames.size());

  double conf_sum = 0.0;
  std::size_t conf_n = 0;
  for (const auto& d : frames) {
    const int key = d.identified ? d.label.id : unknown_key;
    if (!winner || key == *winner) {
      conf_sum += d.confidence;
      ++conf_n;
    }
  }
  out.confidence = conf_sum / static_cast<double>(conf_n);
  if (winner && *winner != unknown_key) {
    out.identified = true;
    out.label = gallery.labels.at(static_cast<std::size_t>(*winner));
  } else {
    out.identified = false;
    out.label = gallery.labels.at(argmax(out.probabilities));
  }
  return out;
}

enum class Outcome { tp, tn, fp, fn };

inline std::string_view to_string(Outcome o) {
  switch (o) {
    case Outcome::tp: return "TP";
    case Outcome::tn: return "TN";
    case Outcome::fp: return "FP";
    default: return "FN";
  }
}

inline Outcome classify_outcome(const std::optional<IdentityLabel>& truth, const RecognitionDecision& d) {
  if (!truth) return d.identified ? Outcome::fp : Outcome::tn;
  if (!d.identified) return Outcome::fn;
  return d.label.id == truth->id ? Outcome::tp : Outcome::fp;
}

inline ConfusionCounts& tally(ConfusionCounts& c, Outcome o) {
  switch (o) {
    case Outcome::tp: ++c.tp; break;
    case Outcome::tn: ++c.tn; break;
    case Outcome::fp: ++c.fp; break;
    case Outcome::fn: ++c.fn; break;
  }
  return c;
}

struct SessionResult {
  std::string name;
  std::optional<IdentityLabel> truth;
  RecognitionDecision decision;
  Outcome outcome = Outcome::tn;
};

inline std::vector<SessionResult> run_sessions(std::span<const Session> sessions, const Gallery& gallery,
                                               double threshold) {
  if (sessions.empty()) throw EmptyDatasetError("no sessions to score");
  std::vector<SessionResult> out;
  out.reserve(sessions.size());
  for (const auto& s : sessions) {
    auto d = decide_session(s, gallery, threshold);
    const auto o = classify_outcome(s.truth, d);
    out.push_back({s.name, s.truth, std::move(d), o});
  }
  return out;
}

inline ConfusionCounts count_outcomes(std::span<const SessionResult> results) {
  ConfusionCounts c;
  for (const auto& r : results) tally(c, r.outcome);
  return c;
}

inline ConfusionCounts score_sessions(std::span<const Session> sessions, const Gallery& gallery, double threshold) {
  const auto results = run_sessions(sessions, gallery, threshold);
  return count_outcomes(results);
}

/// 100 (TP + TN) / (TP + TN + FP + FN)
inline double accuracy(const ConfusionCounts& c) {
  if (c.tp < 0 || c.tn < 0 || c.fp < 0 || c.fn < 0) throw UndefinedMetricError("negative counts");
  if (c.total() == 0) throw UndefinedMetricError("accuracy of zero sessions");
  return static_cast<double>(100 * (c.tp + c.tn)) / static_cast<double>(c.total());
}

/// 100 FP / (FP + TN)
inline double fpr(const ConfusionCounts& c) {
  if (c.fp < 0 || c.tn < 0) throw UndefinedMetricError("negative counts");
  if (c.fp + c.tn == 0) throw UndefinedMetricError("FPR needs FP + TN > 0");
  return static_cast<double>(100 * c.fp) / static_cast<double>(c.fp + c.tn);
}

/// 100 FN / (FN + TP)
inline double fnr(const ConfusionCounts& c) {
  if (c.fn < 0 || c.tp < 0) throw UndefinedMetricError("negative counts");
  if (c.fn + c.tp == 0) throw UndefinedMetricError("FNR needs FN + TP > 0");
  return static_cast<double>(100 * c.fn) / static_cast<double>(c.fn + c.tp);
}

/// Closed-set argmax accuracy (percent) over the cache's test split.
inline double training_accuracy(const EmbeddingCache& cache, const Gallery& gallery) {
  const auto test = cache.select(Split::test);
  if (test.empty()) throw EmptyDatasetError("test split is empty");
  const Logits logits = compute_logits(cache.unit_matrix(test), gallery);
  std::size_t correct = 0;
  for (std::size_t n = 0; n < test.size(); ++n) {
    if (argmax(logits.values.row(n)) == static_cast<std::size_t>(cache.records[test[n]].label_id)) ++correct;
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(test.size());
}

template <typename F>
std::optional<double> defined_or_empty(F&& metric) {
  try {
    return metric();
  } catch (const UndefinedMetricError&) {
    return std::nullopt;
  }
}

struct EvaluationReport {
  std::string model;
  std::vector<SessionResult> sessions;
  ConfusionCounts counts;
  std::optional<double> training_accuracy;
  std::optional<double> accuracy;
  std::optional<double> fpr;
  std::optional<double> fnr;
  std::vector<std::pair<std::string, std::string>> config;

  /// Fills the rates from `counts`; undefined rates stay empty.
  void compute_rates() {
    accuracy = defined_or_empty([&] { return facetune::accuracy(counts); });
    fpr = defined_or_empty([&] { return facetune::fpr(counts); });
    fnr = defined_or_empty([&] { return facetune::fnr(counts); });
  }
};

inline EvaluationReport evaluate_sessions(std::string model, std::span<const Session> sessions,
                                          const Gallery& gallery, double threshold) {
  EvaluationReport r;
  r.model = std::move(model);
  r.sessions = run_sessions(sessions, gallery, threshold);
  r.counts = count_outcomes(r.sessions);
  r.compute_rates();
  r.config.emplace_back("threshold", format_double(threshold));
  r.config.emplace_back("logit_scale", format_double(gallery.logit_scale));
  r.config.emplace_back("classes", std::to_string(gallery.num_classes()));
  return r;
}

/// One line per session: "<name> <truth|UNKNOWN> <decision line> <outcome>".
inline std::string session_decisions_text(const EvaluationReport& r) {
  std::string out;
  for (const auto& s : r.sessions) {
    out += s.name + ' ' + (s.truth ? s.truth->name : std::string("UNKNOWN")) + ' ' + s.decision.line() + ' ' +
           std::string(to_string(s.outcome)) + '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Comparison table

struct ReportRow {
  std::string model;
  std::optional<double> training_accuracy;
  std::optional<double> deployment_accuracy;
  std::optional<double> fpr;
  std::optional<double> fnr;
  ConfusionCounts counts;
  std::array<bool, 4> best{};  // per metric column, in table order

  friend bool operator==(const ReportRow&, const ReportRow&) = default;
};

struct RenderedReport {
  std::string text;
  std::string csv;
  std::vector<ReportRow> rows;
};

inline ReportRow to_row(const EvaluationReport& r) {
  return {r.model, r.training_accuracy, r.accuracy, r.fpr, r.fnr, r.counts, {}};
}

namespace detail {

inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + '"';
}

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        out.back() += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.emplace_back();
    } else {
      out.back() += ch;
    }
  }
  return out;
}

inline std::string percent2(const std::optional<double>& v) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", *v);
  return buf;
}

}  // namespace detail

inline constexpr const char* kReportCsvHeader =
    "model,training_accuracy,deployment_accuracy,fpr,fnr,tp,tn,fp,fn,"
    "best_training_accuracy,best_deployment_accuracy,best_fpr,best_fnr";

/// Model | Training Accuracy | Deployment Accuracy | FPR | FNR. The best
/// value of each column (highest accuracy, lowest FPR/FNR) is flagged;
/// ties flag every tied row. In the text table a flagged cell ends in '*'.
inline RenderedReport render_report(std::span<const EvaluationReport> reports) {
  if (reports.empty()) throw EmptyDatasetError("no reports to render");
  RenderedReport out;
  for (const auto& r : reports) out.rows.push_back(to_row(r));

  auto column = [](ReportRow& row, int k) -> std::optional<double>& {
    switch (k) {
      case 0: return row.training_accuracy;
      case 1: return row.deployment_accuracy;
      case 2: return row.fpr;
      default: return row.fnr;
    }
  };
  for (int k = 0; k < 4; ++k) {
    const bool higher_better = k < 2;
    std::optional<double> best;
    for (auto& row : out.rows) {
      const auto& v = column(row, k);
      if (v && (!best || (higher_better ? *v > *best : *v < *best))) best = v;
    }
    for (auto& row : out.rows) {
      const auto& v = column(row, k);
      row.best[static_cast<std::size_t>(k)] = v && best && *v == *best;
    }
  }

  const std::array<std::string, 5> header = {"Model", "Training Accuracy (%)", "Deployment Accuracy (%)", "FPR (%)",
                                             "FNR (%)"};
  std::vector<std::array<std::string, 5>> cells;
  for (auto& row : out.rows) {
    std::array<std::string, 5> c;
    c[0] = row.model;
    for (int k = 0; k < 4; ++k) {
      c[static_cast<std::size_t>(k) + 1] =
          detail::percent2(column(row, k)) + (row.best[static_cast<std::size_t>(k)] ? "*" : "");
    }
    cells.push_back(std::move(c));
  }
  std::array<std::size_t, 5> width{};
  for (std::size_t j = 0; j < 5; ++j) {
    width[j] = header[j].size();
    for (const auto& c : cells) width[j] = std::max(width[j], c[j].size());
  }
  auto emit = [&](const std::array<std::string, 5>& c) {
    std::string line;
    for (std::size_t j = 0; j < 5; ++j) {
      std::string cell = c[j];
      const std::string pad(width[j] - cell.size(), ' ');
      cell = j == 0 ? cell + pad : pad + cell;
      line += (j ? " | " : "") + cell;
    }
    out.text += line + '\n';
  };
  emit(header);
  std::string rule;
  for (std::size_t j = 0; j < 5; ++j) rule += (j ? "-+-" : "") + std::string(width[j], '-');
  out.text += rule + '\n';
  for (const auto& c : cells) emit(c);

  out.csv = std::string(kReportCsvHeader) + '\n';
  auto num = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  for (auto& row : out.rows) {
    out.csv += detail::csv_field(row.model) + ',' + num(row.training_accuracy) + ',' + num(row.deployment_accuracy) +
               ',' + num(row.fpr) + ',' + num(row.fnr) + ',' + std::to_string(row.counts.tp) + ',' +
               std::to_string(row.counts.tn) + ',' + std::to_string(row.counts.fp) + ',' +
               std::to_string(row.counts.fn);
    for (bool b : row.best) out.csv += b ? ",1" : ",0";
    out.csv += '\n';
  }
  return out;
}

inline std::vector<ReportRow> parse_report_csv(std::string_view text) {
  std::vector<ReportRow> rows;
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != kReportCsvHeader) throw FormatError("report CSV: unexpected header");
  auto opt = [](const std::string& s) -> std::optional<double> {
    if (s.empty()) return std::nullopt;
    return parse_number<double>("report value", s);
  };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 13) throw FormatError("report CSV: expected 13 fields");
    ReportRow r;
    r.model = f[0];
    r.training_accuracy = opt(f[1]);
    r.deployment_accuracy = opt(f[2]);
    r.fpr = opt(f[3]);
    r.fnr = opt(f[4]);
    r.counts = {parse_number<std::int64_t>("tp", f[5]), parse_number<std::int64_t>("tn", f[6]),
                parse_number<std::int64_t>("fp", f[7]), parse_number<std::int64_t>("fn", f[8])};
    for (std::size_t k = 0; k < 4; ++k) r.best[k] = f[9 + k] == "1";
    rows.push_back(std::move(r));
  }
  return rows;
}

/// Rebuilds an EvaluationReport (without per-session detail) from a table row.
inline EvaluationReport report_from_row(const ReportRow& row) {
  EvaluationReport r;
  r.model = row.model;
  r.counts = row.counts;
  r.training_accuracy = row.training_accuracy;
  r.accuracy = row.deployment_accuracy;
  r.fpr = row.fpr;
  r.fnr = row.fnr;
  return r;
}

// ---------------------------------------------------------------------------
// Session sources

struct SessionSpec {
  std::string name;
  std::string identity;  // "UNKNOWN" for non-enrolled participants
  std::vector<std::filesystem::path> frames;
};

/// Manifest lines "<identity|UNKNOWN> <frame path> [<frame path>...]";
/// relative paths resolve against `base_dir`. '#' starts a comment.
/// Sessions are named "<line number>:<identity>".
inline std::vector<SessionSpec> parse_session_manifest(std::string_view text, const std::filesystem::path& base_dir) {
  std::vector<SessionSpec> out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream words(line);
    SessionSpec s;
    if (!(words >> s.identity)) continue;
    std::string path;
    while (words >> path) {
      std::filesystem::path p(path);
      s.frames.push_back(p.is_absolute() ? p : base_dir / p);
    }
    if (s.frames.empty()) throw FormatError("session manifest line " + std::to_string(line_no) + " has no frames");
    s.name = std::to_string(line_no) + ":" + s.identity;
    out.push_back(std::move(s));
  }
  if (out.empty()) throw EmptyDatasetError("session manifest lists no sessions");
  return out;
}

/// Directory convention sessions/<name>/frame_*.<image>. A session whose
/// name matches an enrolled label is a known participant; any other name
/// is UNKNOWN.
inline std::vector<SessionSpec> scan_session_dir(const std::filesystem::path& dir,
                                                 std::span<const IdentityLabel> enrolled) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw EmptyDatasetError("session directory " + dir.string() + " does not exist");
  std::vector<SessionSpec> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_directory()) continue;
    SessionSpec s;
    s.name = entry.path().filename().string();
    const bool known = std::any_of(enrolled.begin(), enrolled.end(),
                                   [&](const IdentityLabel& l) { return l.name == s.name; });
    s.identity = known ? s.name : "UNKNOWN";
    for (const auto& f : fs::directory_iterator(entry.path())) {
      const auto fname = f.path().filename().string();
      if (f.is_regular_file() && fname.rfind("frame_", 0) == 0 && has_image_extension(f.path())) {
        s.frames.push_back(f.path());
      }
    }
    if (s.frames.empty()) continue;
    std::sort(s.frames.begin(), s.frames.end());
    out.push_back(std::move(s));
  }
  std::sort(out.begin(), out.end(), [](const SessionSpec& a, const SessionSpec& b) { return a.name < b.name; });
  if (out.empty()) throw EmptyDatasetError("no sessions under " + dir.string());
  return out;
}

/// Looks up a session's identity among the gallery labels.
inline std::optional<IdentityLabel> resolve_identity(const SessionSpec& spec, std::span<const IdentityLabel> labels) {
  if (spec.identity == "UNKNOWN") return std::nullopt;
  for (const auto& l : labels) {
    if (l.name == spec.identity) return l;
  }
  throw FormatError("session identity `" + spec.identity + "` is not enrolled in the gallery");
}

}  // namespace facetune
