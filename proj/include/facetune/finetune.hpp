#pragma once

// Fine-tuning of per-class prompt embeddings against frozen image
// embeddings.
//
// Model: x_{n,c} = logit_scale * <image_n, class_c>.
// Loss (mean-reduced weighted softmax cross-entropy):
//   L = (1/N) sum_n l_n,  l_n = -sum_c w_c y_{n,c} log softmax(x_n)_c
// Gradient with respect to the logits:
//   dL/dx_{n,j} = (1/N) (p_{n,j} sum_c w_c y_{n,c} - w_j y_{n,j})
// which for w = 1 and one-hot y is (1/N)(p - y). By the chain rule
//   dL/dclass = logit_scale * (dL/dx)^T images.
// The optimizer treats class rows as free vectors and projects them back
// onto the unit sphere after every AdamW step.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "facetune/binary_io.hpp"
#include "facetune/config.hpp"
#include "facetune/core.hpp"
#include "facetune/encoder.hpp"
#include "facetune/rng.hpp"

namespace facetune {

inline constexpr std::string_view kDefaultPromptTemplate = "This is the image of a person named {}";

/// Substitutes each label name into `tmpl`, which must contain exactly one "{}".
inline std::vector<std::string> build_prompts(std::span<const IdentityLabel> labels, std::string_view tmpl) {
  const auto pos = tmpl.find("{}");
  if (pos == std::string_view::npos) throw TemplateError("prompt template has no {} placeholder");
  if (tmpl.find("{}", pos + 2) != std::string_view::npos) {
    throw TemplateError("prompt template has more than one {} placeholder");
  }
  std::vector<std::string> prompts;
  prompts.reserve(labels.size());
  for (const auto& l : labels) {
    std::string p(tmpl.substr(0, pos));
    p += l.name;
    p += tmpl.substr(pos + 2);
    prompts.push_back(std::move(p));
  }
  return prompts;
}

/// Text-side embeddings exported for a list of identity prompts.
///
/// File layout (little-endian): "PEM1", u32 C, u32 D, str template,
/// then C x D f32 rows, row c belonging to the identity with dense id c
/// (names in sorted order). str = u32 byte length + UTF-8 bytes.
/// Rows are stored un-normalized.
struct PromptEmbeddingFile {
  std::string template_text;
  Matrix rows;  // C x D

  static PromptEmbeddingFile load(const std::filesystem::path& path) {
    auto r = ByteReader::from_file(path);
    r.expect_magic("PEM1");
    const auto c = r.u32();
    const auto d = r.u32();
    PromptEmbeddingFile f;
    f.template_text = r.str();
    f.rows = Matrix(c, d);
    for (double& x : f.rows.data()) {
      x = r.f32();
      if (!std::isfinite(x)) throw FormatError(path.string() + ": non-finite prompt embedding");
    }
    r.expect_end();
    return f;
  }

  void save(const std::filesystem::path& path) const {
    ByteWriter w;
    w.magic("PEM1");
    w.u32(static_cast<std::uint32_t>(rows.rows()));
    w.u32(static_cast<std::uint32_t>(rows.cols()));
    w.str(template_text);
    for (double x : rows.data()) w.f32(static_cast<float>(x));
    w.write_file(path);
  }
};

struct RandomInit {
  std::uint64_t seed = 42;
};

using GalleryInit = std::variant<PromptEmbeddingFile, RandomInit>;

/// Builds the starting gallery from exported prompt embeddings or from
/// seeded random unit vectors. `dim` is the encoder's output dimension.
inline Gallery init_gallery(std::vector<IdentityLabel> labels, std::vector<std::string> prompts,
                            const GalleryInit& source, std::size_t dim, double logit_scale = 100.0) {
  if (labels.size() != prompts.size()) throw DimensionError("label and prompt counts differ");
  Gallery g;
  g.labels = std::move(labels);
  g.prompts = std::move(prompts);
  g.logit_scale = logit_scale;
  const std::size_t c = g.labels.size();
  if (const auto* file = std::get_if<PromptEmbeddingFile>(&source)) {
    if (file->rows.cols() != dim) {
      throw DimensionError("prompt embeddings have dimension " + std::to_string(file->rows.cols()) +
                           ", encoder has " + std::to_string(dim));
    }
    if (file->rows.rows() != c) {
      throw DimensionError("prompt embeddings have " + std::to_string(file->rows.rows()) + " rows for " +
                           std::to_string(c) + " identities");
    }
    g.class_embeddings = file->rows;
  } else {
    SplitMix64 rng(hash_combine(std::get<RandomInit>(source).seed, 0x6A11E27ULL));
    g.class_embeddings = Matrix(c, dim);
    for (std::size_t r = 0; r < c; ++r) {
      const auto v = random_unit_vector(dim, rng);
      std::copy(v.begin(), v.end(), g.class_embeddings.row(r).begin());
    }
  }
  normalize_rows(g.class_embeddings);
  g.validate();
  return g;
}

/// x = logit_scale * images * classes^T.
inline Logits compute_logits(const Matrix& image_embs, const Gallery& gallery) {
  if (image_embs.cols() != gallery.dim()) {
    throw DimensionError("image embeddings have dimension " + std::to_string(image_embs.cols()) +
                         ", gallery has " + std::to_string(gallery.dim()));
  }
  Logits out{Matrix(image_embs.rows(), gallery.num_classes())};
  for (std::size_t n = 0; n < image_embs.rows(); ++n) {
    for (std::size_t c = 0; c < gallery.num_classes(); ++c) {
      out.values(n, c) = gallery.logit_scale * dot(image_embs.row(n), gallery.class_embeddings.row(c));
    }
  }
  return out;
}

inline void require_finite(std::span<const double> xs, const char* what) {
  for (double x : xs) {
    if (!std::isfinite(x)) throw NumericsError(std::string("non-finite ") + what);
  }
}

/// log sum_i exp(x_i), stabilized by subtracting the maximum.
inline double log_sum_exp(std::span<const double> x) {
  const double m = *std::max_element(x.begin(), x.end());
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

inline void check_loss_shapes(const Logits& logits, const TargetBatch& targets) {
  if (logits.batch() == 0 || logits.classes() == 0) throw DimensionError("empty logits");
  if (targets.y.rows() != logits.batch() || targets.y.cols() != logits.classes() ||
      targets.weights.size() != logits.classes()) {
    throw DimensionError("logits and targets disagree in shape");
  }
  require_finite(logits.values.data(), "logits");
}

inline double cross_entropy_loss(const Logits& logits, const TargetBatch& targets) {
  check_loss_shapes(logits, targets);
  const std::size_t n_rows = logits.batch(), classes = logits.classes();
  double total = 0.0;
  for (std::size_t n = 0; n < n_rows; ++n) {
    const auto x = logits.values.row(n);
    const double lse = log_sum_exp(x);
    double ln = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      const double y = targets.y(n, c);
      if (y != 0.0) ln -= targets.weights[c] * (x[c] - lse) * y;
    }
    total += ln;
  }
  return total / static_cast<double>(n_rows);
}

/// Row-wise softmax of the logits.
inline Matrix softmax_rows(const Logits& logits) {
  Matrix p(logits.batch(), logits.classes());
  for (std::size_t n = 0; n < logits.batch(); ++n) {
    const auto x = logits.values.row(n);
    const double m = *std::max_element(x.begin(), x.end());
    double s = 0.0;
    for (std::size_t c = 0; c < x.size(); ++c) s += (p(n, c) = std::exp(x[c] - m));
    for (std::size_t c = 0; c < x.size(); ++c) p(n, c) /= s;
  }
  return p;
}

/// dL/dx (N x C).
inline Matrix loss_gradient_logits(const Logits& logits, const TargetBatch& targets) {
  check_loss_shapes(logits, targets);
  Matrix g = softmax_rows(logits);
  const double inv_n = 1.0 / static_cast<double>(logits.batch());
  for (std::size_t n = 0; n < logits.batch(); ++n) {
    double wy = 0.0;
    for (std::size_t c = 0; c < logits.classes(); ++c) wy += targets.weights[c] * targets.y(n, c);
    for (std::size_t c = 0; c < logits.classes(); ++c) {
      g(n, c) = (g(n, c) * wy - targets.weights[c] * targets.y(n, c)) * inv_n;
    }
  }
  return g;
}

/// dL/d(class_embeddings), C x D.
inline Matrix loss_gradient(const Logits& logits, const TargetBatch& targets, const Matrix& image_embs,
                            const Gallery& gallery) {
  if (image_embs.rows() != logits.batch() || image_embs.cols() != gallery.dim() ||
      logits.classes() != gallery.num_classes()) {
    throw DimensionError("gradient inputs disagree in shape");
  }
  const Matrix dx = loss_gradient_logits(logits, targets);
  Matrix grad(gallery.num_classes(), gallery.dim());
  for (std::size_t c = 0; c < grad.rows(); ++c) {
    auto row = grad.row(c);
    for (std::size_t n = 0; n < image_embs.rows(); ++n) {
      const double k = gallery.logit_scale * dx(n, c);
      if (k == 0.0) continue;
      const auto img = image_embs.row(n);
      for (std::size_t d = 0; d < row.size(); ++d) row[d] += k * img[d];
    }
  }
  return grad;
}

/// lr = lr_min + (lr0 - lr_min) (1 + cos(pi step / total)) / 2, evaluated
/// as a convex combination so both endpoints are exact.
inline double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr0, double lr_min) {
  if (total_steps < 1) throw ScheduleError("total_steps must be at least 1");
  if (step < 0 || step > total_steps) {
    throw ScheduleError("step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + "]");
  }
  const double w = 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                                         static_cast<double>(total_steps)));
  return lr0 * w + lr_min * (1.0 - w);
}

struct OptimizerState {
  Matrix m;
  Matrix v;
  std::uint64_t t = 0;

  static OptimizerState zeros_like(const Matrix& params) {
    return {Matrix(params.rows(), params.cols()), Matrix(params.rows(), params.cols()), 0};
  }

  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

/// One decoupled-weight-decay Adam update on a flat parameter vector:
///   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
///   m_hat = m / (1 - b1^t),  v_hat = v / (1 - b2^t)
///   theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + wd theta)
/// where t is the step count after incrementing.
inline void adamw_update(std::span<double> params, std::span<const double> grads, std::span<double> m,
                         std::span<double> v, std::uint64_t& t, const HyperParams& hp, double lr) {
  if (grads.size() != params.size() || m.size() != params.size() || v.size() != params.size()) {
    throw DimensionError("optimizer buffers disagree in size");
  }
  require_finite(grads, "gradient");
  ++t;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
    v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
    const double m_hat = m[i] / bc1;
    const double v_hat = v[i] / bc2;
    params[i] -= lr * (m_hat / (std::sqrt(v_hat) + hp.epsilon) + hp.weight_decay * params[i]);
  }
}

/// AdamW step on the gallery followed by projection of every row back to
/// unit length.
inline void adamw_step(Gallery& gallery, const Matrix& grads, OptimizerState& state, const HyperParams& hp,
                       double lr) {
  if (grads.rows() != gallery.num_classes() || grads.cols() != gallery.dim()) {
    throw DimensionError("gradient shape does not match the gallery");
  }
  if (state.m.rows() != grads.rows() || state.m.cols() != grads.cols() || state.v.rows() != grads.rows() ||
      state.v.cols() != grads.cols()) {
    throw DimensionError("optimizer state shape does not match the gallery");
  }
  adamw_update(gallery.class_embeddings.data(), grads.data(), state.m.data(), state.v.data(), state.t, hp, lr);
  normalize_rows(gallery.class_embeddings);
}

struct StepRecord {
  std::int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double batch_accuracy = 0.0;  // fraction in [0, 1], measured before the update

  friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

struct TrainHistory {
  std::vector<StepRecord> steps;

  /// CSV with header step,lr,loss,batch_accuracy; reals in shortest
  /// round-trip form.
  std::string to_csv() const {
    std::string out = "step,lr,loss,batch_accuracy\n";
    for (const auto& s : steps) {
      out += std::to_string(s.step) + ',' + format_double(s.lr) + ',' + format_double(s.loss) + ',' +
             format_double(s.batch_accuracy) + '\n';
    }
    return out;
  }

  friend bool operator==(const TrainHistory&, const TrainHistory&) = default;
};

/// Index of the largest value; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> xs) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < xs.size(); ++i) {
    if (xs[i] > xs[best]) best = i;
  }
  return best;
}

struct FinetuneResult {
  Gallery gallery;
  TrainHistory history;
};

/// Minibatch AdamW over the cache's training split for hp.epochs passes.
/// Each epoch visits the records in a SplitMix64 shuffle seeded by
/// (seed, epoch); the final partial batch is kept. The learning rate at
/// global step s of T = epochs * ceil(N / batch) is cosine_lr(s, T).
inline FinetuneResult finetune_single_shot(const EmbeddingCache& cache, Gallery gallery, const HyperParams& hp,
                                           std::uint64_t seed) {
  hp.validate();
  gallery.validate();
  if (gallery.num_classes() < 2) throw InsufficientClassesError("fine-tuning needs at least two classes");
  if (cache.dim != gallery.dim()) {
    throw DimensionError("cache dimension " + std::to_string(cache.dim) + " differs from gallery dimension " +
                         std::to_string(gallery.dim()));
  }
  if (cache.num_classes() != gallery.num_classes()) {
    throw DimensionError("cache has " + std::to_string(cache.num_classes()) + " identities, gallery has " +
                         std::to_string(gallery.num_classes()));
  }
  const auto train = cache.select(Split::train);
  if (train.empty()) throw EmptyDatasetError("training split is empty");

  const Matrix all_units = cache.unit_matrix(train);
  const auto all_labels = cache.label_ids(train);
  const auto batch = static_cast<std::size_t>(hp.batch_size);
  const auto per_epoch = static_cast<std::int64_t>((train.size() + batch - 1) / batch);
  const std::int64_t total = per_epoch * hp.epochs;

  FinetuneResult result{std::move(gallery), {}};
  auto& g = result.gallery;
  OptimizerState state = OptimizerState::zeros_like(g.class_embeddings);
  const std::vector<double> weights(g.num_classes(), 1.0);

  std::int64_t step = 0;
  std::vector<std::size_t> order(train.size());
  for (int epoch = 0; epoch < hp.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    SplitMix64 rng(hash_combine(seed, static_cast<std::uint64_t>(epoch)));
    shuffle(std::span<std::size_t>(order), rng);

    for (std::size_t begin = 0; begin < order.size(); begin += batch, ++step) {
      const std::size_t n = std::min(batch, order.size() - begin);
      Matrix images(n, g.dim());
      std::vector<int> labels(n);
      for (std::size_t k = 0; k < n; ++k) {
        const auto src = all_units.row(order[begin + k]);
        std::copy(src.begin(), src.end(), images.row(k).begin());
        labels[k] = all_labels[order[begin + k]];
      }
      const auto targets = TargetBatch::from_indices(labels, g.num_classes(), weights);
      const Logits logits = compute_logits(images, g);
      const double loss = cross_entropy_loss(logits, targets);
      std::size_t correct = 0;
      for (std::size_t k = 0; k < n; ++k) {
        if (argmax(logits.values.row(k)) == static_cast<std::size_t>(labels[k])) ++correct;
      }
      const double lr = cosine_lr(step, total, hp.learning_rate_initial, hp.lr_min);
      result.history.steps.push_back({step, lr, loss, static_cast<double>(correct) / static_cast<double>(n)});
      adamw_step(g, loss_gradient(logits, targets, images, g), state, hp, lr);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Gallery checkpoint
//
// Layout (little-endian): "GAL1", u32 C, u32 D, f64 logit_scale,
// C x str label name, C x str prompt, C x D f64 rows.
// str = u32 byte length + UTF-8 bytes; label ids are row positions.

inline ByteWriter serialize_gallery(const Gallery& g) {
  ByteWriter w;
  w.magic("GAL1");
  w.u32(static_cast<std::uint32_t>(g.num_classes()));
  w.u32(static_cast<std::uint32_t>(g.dim()));
  w.f64(g.logit_scale);
  for (const auto& l : g.labels) w.str(l.name);
  for (const auto& p : g.prompts) w.str(p);
  for (double x : g.class_embeddings.data()) w.f64(x);
  return w;
}

inline void save_gallery(const std::filesystem::path& path, const Gallery& g) { serialize_gallery(g).write_file(path); }

inline Gallery load_gallery(const std::filesystem::path& path) {
  auto r = ByteReader::from_file(path);
  r.expect_magic("GAL1");
  const auto c = r.u32();
  const auto d = r.u32();
  Gallery g;
  g.logit_scale = r.f64();
  for (std::uint32_t i = 0; i < c; ++i) g.labels.push_back({r.str(), static_cast<int>(i)});
  for (std::uint32_t i = 0; i < c; ++i) g.prompts.push_back(r.str());
  g.class_embeddings = Matrix(c, d);
  for (double& x : g.class_embeddings.data()) x = r.f64();
  r.expect_end();
  g.validate();
  return g;
}

}  // namespace facetune
