#include "facetune_cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "facetune/config.hpp"
#include "facetune/encoder.hpp"
#include "facetune/evaluate.hpp"
#include "facetune/finetune.hpp"
#include "facetune/image_io.hpp"
#include "facetune/onnx_backend.hpp"
#include "facetune/preprocess.hpp"
#include "facetune/recognize.hpp"
#include "facetune/synthetic.hpp"

namespace facetune::cli {
namespace {

namespace fs = std::filesystem;

struct GlobalOptions {
  std::string config;
  std::uint64_t seed = 42;
  bool verbose = false;
};

struct BackendOptions {
  std::string manifest;
  bool mock = false;
  std::size_t mock_dim = 64;
  double mock_separation = 60.0;
  double mock_noise = 5.0;

  void add_to(CLI::App* cmd) {
    auto* m = cmd->add_option("--manifest", manifest, "Encoder backend manifest");
    auto* k = cmd->add_flag("--mock", mock, "Use the deterministic mock encoder (seeded by --seed)");
    m->excludes(k);
    cmd->add_option("--mock-dim", mock_dim, "Mock embedding dimension")->capture_default_str();
    cmd->add_option("--mock-separation", mock_separation, "Mock angle between identity centers, degrees")
        ->capture_default_str();
    cmd->add_option("--mock-noise", mock_noise, "Mock angular noise scale, degrees")->capture_default_str();
  }

  std::unique_ptr<EncoderBackend> make(std::uint64_t seed, const std::vector<IdentityLabel>& known) const {
    if (mock) {
      MockGeometry geo;
      geo.noise_deg = mock_noise;
      geo.auto_separation_deg = mock_separation;
      for (const auto& l : known) geo.known_subjects.push_back(l.name);
      return std::make_unique<MockBackend>(seed, mock_dim, geo);
    }
    if (manifest.empty()) throw ConfigError("one of --manifest or --mock is required");
    return OnnxBackend::from_manifest(manifest);
  }
};

// Hyperparameter flags; unset flags leave the config/default value alone.
struct HyperParamFlags {
  std::optional<double> lr, weight_decay, lr_min, logit_scale, beta1, beta2, epsilon;
  std::optional<int> batch_size, epochs;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--lr", lr, "Initial learning rate (default 5e-6)");
    cmd->add_option("--weight-decay", weight_decay, "AdamW decoupled weight decay (default 1e-3)");
    cmd->add_option("--lr-min", lr_min, "Cosine schedule floor (default 0)");
    cmd->add_option("--logit-scale", logit_scale, "Cosine logit multiplier (default 100)");
    cmd->add_option("--beta1", beta1, "Adam beta1 (default 0.9)");
    cmd->add_option("--beta2", beta2, "Adam beta2 (default 0.999)");
    cmd->add_option("--epsilon", epsilon, "Adam epsilon (default 1e-8)");
    cmd->add_option("--batch-size", batch_size, "Minibatch size (default 16)");
    cmd->add_option("--epochs", epochs, "Passes over the training split (default 1)");
  }

  void apply(HyperParams& hp) const {
    if (lr) hp.learning_rate_initial = *lr;
    if (weight_decay) hp.weight_decay = *weight_decay;
    if (lr_min) hp.lr_min = *lr_min;
    if (logit_scale) hp.logit_scale = *logit_scale;
    if (beta1) hp.beta1 = *beta1;
    if (beta2) hp.beta2 = *beta2;
    if (epsilon) hp.epsilon = *epsilon;
    if (batch_size) hp.batch_size = *batch_size;
    if (epochs) hp.epochs = *epochs;
  }
};

HyperParams base_hyperparams(const GlobalOptions& g) {
  if (g.config.empty()) return HyperParams{};
  return hyperparams_from_config(load_key_values(g.config));
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
}

void report_warnings(const std::vector<Warning>& warnings, std::ostream& err, const std::string& file) {
  std::string text;
  for (const auto& w : warnings) text += w.line() + '\n';
  err << text;
  if (!file.empty()) write_text(file, text);
}

// ---------------------------------------------------------------------------

struct IngestOptions {
  std::string root, out, warnings;
  double ratio = 0.8;
};

int cmd_ingest(const GlobalOptions& g, const IngestOptions& o, std::ostream& out, std::ostream& err) {
  std::error_code ec;
  if (!fs::exists(o.root, ec)) {
    err << EmptyDatasetError("dataset root " + o.root + " does not exist").what() << '\n';
    return kExitUsage;
  }
  auto ingested = ingest_dataset(o.root);
  auto split = split_dataset(ingested.index, o.ratio, g.seed);
  auto warnings = std::move(ingested.warnings);
  warnings.insert(warnings.end(), split.warnings.begin(), split.warnings.end());
  report_warnings(warnings, err, o.warnings);

  const auto& idx = split.index;
  write_text(o.out, idx.serialize());
  for (const auto& l : idx.labels) {
    std::size_t train = 0, test = 0;
    for (const auto& e : idx.entries) {
      if (e.label.id != l.id) continue;
      (e.split == Split::train ? train : test) += 1;
    }
    out << "  " << l.name << ": " << train + test << " images (" << train << " train / " << test << " test)\n";
  }
  out << idx.num_classes() << " identities, " << idx.entries.size() << " images, " << idx.count(Split::train)
      << " train / " << idx.count(Split::test) << " test\n";
  return kExitOk;
}

struct EmbedOptions {
  std::string index, out, warnings;
  unsigned threads = 0;
  BackendOptions backend;
};

int cmd_embed(const GlobalOptions& g, const EmbedOptions& o, std::ostream& out, std::ostream& err) {
  const auto index = DatasetIndex::parse(read_text_file(o.index));
  const auto backend = o.backend.make(g.seed, index.labels);
  auto result = embed_dataset(*backend, index,
                              [](const fs::path& p, std::vector<Warning>* w) { return load_face(p, w); }, o.threads);
  report_warnings(result.failures, err, o.warnings);
  result.cache.save(o.out);
  out << "embedded " << result.cache.records.size() << " of " << index.entries.size() << " images with "
      << backend->name() << " (D = " << result.cache.dim << ")\n";
  return kExitOk;
}

struct FinetuneOptions {
  std::string cache, out, history, init_prompts;
  std::string prompt_template{kDefaultPromptTemplate};
  HyperParamFlags hp;
};

int cmd_finetune(const GlobalOptions& g, const FinetuneOptions& o, std::ostream& out, std::ostream& err) {
  HyperParams hp = base_hyperparams(g);
  o.hp.apply(hp);
  hp.validate();
  const auto cache = EmbeddingCache::load(o.cache);
  auto prompts = build_prompts(cache.labels, o.prompt_template);

  GalleryInit init = RandomInit{g.seed};
  if (!o.init_prompts.empty()) {
    auto pem = PromptEmbeddingFile::load(o.init_prompts);
    if (g.verbose && pem.template_text != o.prompt_template) {
      err << "note: prompt embeddings were exported with template \"" << pem.template_text << "\"\n";
    }
    init = std::move(pem);
  }
  const Gallery start = init_gallery(cache.labels, std::move(prompts), init, cache.dim, hp.logit_scale);
  const auto result = finetune_single_shot(cache, start, hp, g.seed);

  save_gallery(o.out, result.gallery);
  const std::string history_path = o.history.empty() ? fs::path(o.out).replace_extension(".history.csv").string()
                                                      : o.history;
  write_text(history_path, result.history.to_csv());
  const auto& steps = result.history.steps;
  out << "trained " << result.gallery.num_classes() << " class embeddings for " << steps.size() << " steps";
  if (!steps.empty()) {
    out << "; loss " << std::setprecision(6) << steps.front().loss << " -> " << steps.back().loss
        << ", last batch accuracy " << std::setprecision(4) << 100.0 * steps.back().batch_accuracy << "%";
  }
  out << '\n';
  if (g.verbose) {
    for (const auto& s : steps) {
      err << "step " << s.step << " lr " << s.lr << " loss " << s.loss << " acc " << s.batch_accuracy << '\n';
    }
  }
  return kExitOk;
}

struct EvaluateOptions {
  std::string gallery, sessions, session_manifest, cache, out, decisions, warnings;
  std::string model = "facetune";
  std::optional<double> threshold;
  BackendOptions backend;
};

double resolve_threshold(const GlobalOptions& g, const std::optional<double>& flag) {
  HyperParams hp = base_hyperparams(g);
  if (flag) hp.confidence_threshold = *flag;
  hp.validate();
  return hp.confidence_threshold;
}

int cmd_evaluate(const GlobalOptions& g, const EvaluateOptions& o, std::ostream& out, std::ostream& err) {
  const double threshold = resolve_threshold(g, o.threshold);
  const Gallery gallery = load_gallery(o.gallery);
  std::vector<SessionSpec> specs;
  if (!o.session_manifest.empty()) {
    specs = parse_session_manifest(read_text_file(o.session_manifest), fs::path(o.session_manifest).parent_path());
  } else if (!o.sessions.empty()) {
    specs = scan_session_dir(o.sessions, gallery.labels);
  } else {
    throw ConfigError("one of --sessions or --session-manifest is required");
  }
  const auto backend = o.backend.make(g.seed, gallery.labels);

  std::vector<Warning> warnings;
  std::vector<Session> sessions;
  for (const auto& spec : specs) {
    Session s;
    s.name = spec.name;
    s.truth = resolve_identity(spec, gallery.labels);
    for (const auto& frame : spec.frames) s.frames.push_back(embed_image(*backend, load_face(frame, &warnings)));
    sessions.push_back(std::move(s));
  }
  report_warnings(warnings, err, o.warnings);

  auto report = evaluate_sessions(o.model, sessions, gallery, threshold);
  if (!o.cache.empty()) report.training_accuracy = training_accuracy(EmbeddingCache::load(o.cache), gallery);

  const auto rendered = render_report(std::span(&report, 1));
  out << rendered.text;
  out << "TP=" << report.counts.tp << " TN=" << report.counts.tn << " FP=" << report.counts.fp
      << " FN=" << report.counts.fn << " (threshold " << format_double(threshold) << ")\n";
  if (g.verbose) err << session_decisions_text(report);
  if (!o.out.empty()) write_text(o.out, rendered.csv);
  if (!o.decisions.empty()) write_text(o.decisions, session_decisions_text(report));
  return kExitOk;
}

struct PredictOptions {
  std::string gallery, image;
  std::optional<double> threshold;
  BackendOptions backend;
};

int cmd_predict(const GlobalOptions& g, const PredictOptions& o, std::ostream& out, std::ostream& err) {
  const double threshold = resolve_threshold(g, o.threshold);
  const Gallery gallery = load_gallery(o.gallery);
  const auto backend = o.backend.make(g.seed, gallery.labels);
  std::vector<Warning> warnings;
  const auto emb = embed_image(*backend, load_face(o.image, &warnings));
  report_warnings(warnings, err, {});
  out << predict(emb, gallery, threshold).line() << '\n';
  return kExitOk;
}

struct DiagnoseOptions {
  std::string cache;
  std::size_t bins = 20;
};

void print_summary(std::ostream& out, const char* title, const SimilaritySummary& s) {
  out << title << ": " << s.pairs << " pairs";
  if (s.pairs) {
    out << std::fixed << std::setprecision(4) << ", mean " << s.mean << ", min " << s.min << ", max " << s.max;
    out.unsetf(std::ios::floatfield);
  }
  out << '\n';
}

int cmd_diagnose(const GlobalOptions&, const DiagnoseOptions& o, std::ostream& out, std::ostream&) {
  const auto cache = EmbeddingCache::load(o.cache);
  const auto stats = pairwise_cosine_stats(cache, o.bins);
  print_summary(out, "cross-identity", stats.cross_identity);
  print_summary(out, "within-identity", stats.within_identity);
  print_summary(out, "all pairs", stats.all_pairs);
  out << "cross-identity histogram over [-1, 1]:\n";
  const auto& h = stats.cross_identity.histogram;
  for (std::size_t b = 0; b < h.size(); ++b) {
    const double lo = -1.0 + 2.0 * static_cast<double>(b) / static_cast<double>(h.size());
    const double hi = -1.0 + 2.0 * static_cast<double>(b + 1) / static_cast<double>(h.size());
    out << std::fixed << std::setprecision(2) << "  [" << std::setw(5) << lo << ", " << std::setw(5) << hi << ") "
        << h[b] << '\n';
    out.unsetf(std::ios::floatfield);
  }
  return kExitOk;
}

struct ReportOptions {
  std::vector<std::string> inputs;
  std::string out;
};

int cmd_report(const GlobalOptions&, const ReportOptions& o, std::ostream& out, std::ostream&) {
  std::vector<EvaluationReport> reports;
  for (const auto& path : o.inputs) {
    for (const auto& row : parse_report_csv(read_text_file(path))) reports.push_back(report_from_row(row));
  }
  const auto rendered = render_report(reports);
  out << rendered.text;
  if (!o.out.empty()) write_text(o.out, rendered.csv);
  return kExitOk;
}

struct SynthOptions {
  std::string out;
  SyntheticLayout layout;
};

int cmd_synth(const GlobalOptions& g, const SynthOptions& o, std::ostream& out, std::ostream&) {
  write_synthetic_dataset(o.out, o.layout, g.seed);
  out << "wrote " << o.layout.identities << " identities x " << o.layout.images_per_identity << " images to "
      << (fs::path(o.out) / "dataset").string() << " and " << o.layout.identities + o.layout.unknown_participants
      << " sessions to " << (fs::path(o.out) / "sessions").string() << '\n';
  return kExitOk;
}

int exit_code_for(const Error& e) {
  switch (e.category()) {
    case ErrorCategory::usage: return kExitUsage;
    case ErrorCategory::backend: return kExitBackend;
    default: return kExitData;
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"facetune: fine-tune class embeddings over a frozen image encoder for open-set face recognition"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--config", g.config, "Hyperparameter config file (key = value)");
  app.add_option("--seed", g.seed, "Seed for splitting, shuffling, mock encoder and random init")
      ->capture_default_str();
  app.add_flag("--verbose", g.verbose, "Print per-step and per-session detail to stderr");

  IngestOptions ingest;
  auto* c_ingest = app.add_subcommand("ingest", "Index root/<identity>/<images> and split train/test");
  c_ingest->add_option("--root", ingest.root, "Dataset root")->required();
  c_ingest->add_option("--out", ingest.out, "Index file to write")->required();
  c_ingest->add_option("--ratio", ingest.ratio, "Train fraction per identity")->capture_default_str();
  c_ingest->add_option("--warnings", ingest.warnings, "Also write WARN lines to this file");

  EmbedOptions embed;
  auto* c_embed = app.add_subcommand("embed", "Embed every indexed image with the frozen encoder");
  c_embed->add_option("--index", embed.index, "Index file from `ingest`")->required();
  c_embed->add_option("--out", embed.out, "Embedding cache to write")->required();
  c_embed->add_option("--threads", embed.threads, "Worker threads (0 = hardware concurrency)");
  c_embed->add_option("--warnings", embed.warnings, "Also write WARN lines to this file");
  embed.backend.add_to(c_embed);

  FinetuneOptions ft;
  auto* c_ft = app.add_subcommand("finetune", "Fine-tune the class embeddings on the training split");
  c_ft->add_option("--cache", ft.cache, "Embedding cache from `embed`")->required();
  c_ft->add_option("--out", ft.out, "Gallery checkpoint to write")->required();
  c_ft->add_option("--history", ft.history, "Training history CSV (default <out>.history.csv)");
  c_ft->add_option("--template", ft.prompt_template, "Prompt template with one {} placeholder")
      ->capture_default_str();
  c_ft->add_option("--init-prompts", ft.init_prompts, "Prompt-embedding file (PEM1) for initialization");
  ft.hp.add_to(c_ft);

  EvaluateOptions ev;
  auto* c_ev = app.add_subcommand("evaluate", "Score known/unknown participant sessions");
  c_ev->add_option("--gallery", ev.gallery, "Gallery checkpoint")->required();
  c_ev->add_option("--sessions", ev.sessions, "Directory of sessions/<name>/frame_*.png");
  c_ev->add_option("--session-manifest", ev.session_manifest, "Lines of \"<identity|UNKNOWN> <frames...>\"");
  c_ev->add_option("--cache", ev.cache, "Embedding cache; its test split gives the training accuracy column");
  c_ev->add_option("--threshold", ev.threshold, "Confidence threshold (default 0.8)");
  c_ev->add_option("--model", ev.model, "Model name for the report")->capture_default_str();
  c_ev->add_option("--out", ev.out, "Report CSV to write");
  c_ev->add_option("--decisions", ev.decisions, "Per-session decisions file to write");
  c_ev->add_option("--warnings", ev.warnings, "Also write WARN lines to this file");
  ev.backend.add_to(c_ev);

  PredictOptions pr;
  auto* c_pr = app.add_subcommand("predict", "Recognize a single image");
  c_pr->add_option("--gallery", pr.gallery, "Gallery checkpoint")->required();
  c_pr->add_option("--image", pr.image, "Image file")->required();
  c_pr->add_option("--threshold", pr.threshold, "Confidence threshold (default 0.8)");
  pr.backend.add_to(c_pr);

  DiagnoseOptions dg;
  auto* c_dg = app.add_subcommand("diagnose", "Cosine-similarity statistics of cached embeddings");
  c_dg->add_option("--cache", dg.cache, "Embedding cache")->required();
  c_dg->add_option("--bins", dg.bins, "Histogram bins")->capture_default_str();

  ReportOptions rp;
  auto* c_rp = app.add_subcommand("report", "Merge report CSVs into one comparison table");
  c_rp->add_option("inputs", rp.inputs, "Report CSV files from `evaluate --out`")->required();
  c_rp->add_option("--out", rp.out, "Combined CSV to write");

  SynthOptions sy;
  auto* c_sy = app.add_subcommand("synth", "Write a synthetic dataset and session tree for mock runs");
  c_sy->add_option("--out", sy.out, "Output directory")->required();
  c_sy->add_option("--identities", sy.layout.identities, "Known identities")->capture_default_str();
  c_sy->add_option("--images", sy.layout.images_per_identity, "Images per identity")->capture_default_str();
  c_sy->add_option("--unknowns", sy.layout.unknown_participants, "Unknown visitors with a session each")->capture_default_str();
  c_sy->add_option("--frames", sy.layout.frames_per_session, "Frames per session")->capture_default_str();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*c_ingest) return cmd_ingest(g, ingest, out, err);
    if (*c_embed) return cmd_embed(g, embed, out, err);
    if (*c_ft) return cmd_finetune(g, ft, out, err);
    if (*c_ev) return cmd_evaluate(g, ev, out, err);
    if (*c_pr) return cmd_predict(g, pr, out, err);
    if (*c_dg) return cmd_diagnose(g, dg, out, err);
    if (*c_rp) return cmd_report(g, rp, out, err);
    if (*c_sy) return cmd_synth(g, sy, out, err);
  } catch (const Error& e) {
    err << e.what() << '\n';
    return exit_code_for(e);
  } catch (const fs::filesystem_error& e) {
    err << "FormatError: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace facetune::cli
