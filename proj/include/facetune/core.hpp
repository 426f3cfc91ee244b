#pragma once

// Shared domain types and numeric primitives.
//
// Every reduction in this library (dot products, row sums) accumulates
// sequentially from index 0 upward so results are bit-reproducible for a
// given input regardless of thread count.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "facetune/errors.hpp"

namespace facetune {

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

struct IdentityLabel {
  std::string name;
  int id = 0;

  friend bool operator==(const IdentityLabel&, const IdentityLabel&) = default;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("dot product of vectors with dimensions " + std::to_string(a.size()) +
                         " and " + std::to_string(b.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

/// An encoder output or class vector. `normalized()` is true only for
/// vectors produced by l2_normalize (or checked to be unit length).
class Embedding {
 public:
  Embedding() = default;

  static Embedding raw(std::vector<double> values) {
    if (values.empty()) throw DimensionError("embedding dimension must be positive");
    Embedding e;
    e.values_ = std::move(values);
    return e;
  }

  std::span<const double> values() const noexcept { return values_; }
  std::size_t dim() const noexcept { return values_.size(); }
  bool normalized() const noexcept { return normalized_; }

  friend bool operator==(const Embedding&, const Embedding&) = default;

 private:
  friend Embedding l2_normalize(std::span<const double> v);

  std::vector<double> values_;
  bool normalized_ = false;
};

/// Scales `v` to unit Euclidean length. Throws NormalizationError on a zero
/// (or non-finite) vector.
inline Embedding l2_normalize(std::span<const double> v) {
  if (v.empty()) throw DimensionError("cannot normalize an empty vector");
  const double n = l2_norm(v);
  if (!(n > 0.0) || !std::isfinite(n)) {
    throw NormalizationError("vector has zero or non-finite norm");
  }
  Embedding e;
  e.values_.reserve(v.size());
  for (double x : v) e.values_.push_back(x / n);
  e.normalized_ = true;
  return e;
}

/// Dot product of two unit embeddings, clamped to [-1, 1].
inline double cosine_similarity(const Embedding& a, const Embedding& b) {
  if (a.dim() != b.dim()) {
    throw DimensionError("cosine similarity between dimensions " + std::to_string(a.dim()) +
                         " and " + std::to_string(b.dim()));
  }
  if (!a.normalized() || !b.normalized()) {
    throw NormalizationError("cosine similarity requires normalized embeddings");
  }
  const double d = dot(a.values(), b.values());
  return d > 1.0 ? 1.0 : (d < -1.0 ? -1.0 : d);
}

/// Normalizes every row of `m` in place.
inline void normalize_rows(Matrix& m) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const double n = l2_norm(row);
    if (!(n > 0.0) || !std::isfinite(n)) {
      throw NormalizationError("row " + std::to_string(r) + " has zero or non-finite norm");
    }
    for (double& x : row) x /= n;
  }
}

/// The trainable object: one unit-norm class vector per enrolled identity.
struct Gallery {
  Matrix class_embeddings;  // C x D
  std::vector<IdentityLabel> labels;
  std::vector<std::string> prompts;
  double logit_scale = 100.0;

  std::size_t num_classes() const noexcept { return class_embeddings.rows(); }
  std::size_t dim() const noexcept { return class_embeddings.cols(); }

  /// Throws when the shape or unit-norm invariants are broken.
  void validate(double tol = 1e-6) const {
    const auto c = class_embeddings.rows();
    if (labels.size() != c || prompts.size() != c) {
      throw DimensionError("gallery has " + std::to_string(c) + " rows, " +
                           std::to_string(labels.size()) + " labels, " +
                           std::to_string(prompts.size()) + " prompts");
    }
    if (!(logit_scale > 0.0)) throw ConfigError("logit_scale must be positive");
    for (std::size_t r = 0; r < c; ++r) {
      if (labels[r].id != static_cast<int>(r) || labels[r].name.empty()) {
        throw FormatError("gallery labels must be dense, ordered and named");
      }
      if (std::abs(l2_norm(class_embeddings.row(r)) - 1.0) > tol) {
        throw NormalizationError("gallery row " + std::to_string(r) + " is not unit-norm");
      }
    }
  }

  friend bool operator==(const Gallery&, const Gallery&) = default;
};

/// N x C matrix of class scores x_{n,c}.
struct Logits {
  Matrix values;

  std::size_t batch() const noexcept { return values.rows(); }
  std::size_t classes() const noexcept { return values.cols(); }
};

/// Soft or one-hot targets plus per-class weights.
struct TargetBatch {
  Matrix y;                     // N x C, rows sum to 1
  std::vector<double> weights;  // length C, all positive

  static TargetBatch from_indices(std::span<const int> classes, std::size_t num_classes,
                                  std::vector<double> weights = {}) {
    TargetBatch t;
    t.y = Matrix(classes.size(), num_classes);
    for (std::size_t n = 0; n < classes.size(); ++n) {
      if (classes[n] < 0 || static_cast<std::size_t>(classes[n]) >= num_classes) {
        throw DimensionError("target class " + std::to_string(classes[n]) + " out of range");
      }
      t.y(n, static_cast<std::size_t>(classes[n])) = 1.0;
    }
    t.weights = weights.empty() ? std::vector<double>(num_classes, 1.0) : std::move(weights);
    t.validate();
    return t;
  }

  void validate() const {
    if (weights.size() != y.cols()) throw DimensionError("class weight count mismatch");
    for (double w : weights) {
      if (!(w > 0.0)) throw ConfigError("class weights must be positive");
    }
    for (std::size_t n = 0; n < y.rows(); ++n) {
      double s = 0.0;
      for (double v : y.row(n)) s += v;
      if (std::abs(s - 1.0) > 1e-12) throw FormatError("target row does not sum to 1");
    }
  }
};

struct ConfusionCounts {
  std::int64_t tp = 0;
  std::int64_t tn = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;

  std::int64_t total() const noexcept { return tp + tn + fp + fn; }

  ConfusionCounts& operator+=(const ConfusionCounts& o) noexcept {
    tp += o.tp;
    tn += o.tn;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  friend ConfusionCounts operator+(ConfusionCounts a, const ConfusionCounts& b) noexcept {
    return a += b;
  }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// Training and decision hyperparameters. Defaults are the published
/// configuration; logit_scale and lr_min are conventions.
struct HyperParams {
  double learning_rate_initial = 5e-6;
  double weight_decay = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int batch_size = 16;
  int epochs = 1;
  double lr_min = 0.0;
  double confidence_threshold = 0.80;
  double logit_scale = 100.0;

  void validate() const {
    auto require = [](bool ok, const char* msg) {
      if (!ok) throw ConfigError(msg);
    };
    require(beta1 > 0.0 && beta1 < 1.0, "beta1 must lie in (0, 1)");
    require(beta2 > 0.0 && beta2 < 1.0, "beta2 must lie in (0, 1)");
    require(learning_rate_initial > 0.0, "learning_rate_initial must be positive");
    require(lr_min >= 0.0, "lr_min must be non-negative");
    require(weight_decay >= 0.0, "weight_decay must be non-negative");
    require(epsilon > 0.0, "epsilon must be positive");
    require(batch_size >= 1, "batch_size must be at least 1");
    require(epochs >= 1, "epochs must be at least 1");
    require(confidence_threshold > 0.0 && confidence_threshold < 1.0,
            "confidence_threshold must lie in (0, 1)");
    require(logit_scale > 0.0, "logit_scale must be positive");
  }

  friend bool operator==(const HyperParams&, const HyperParams&) = default;
};

}  // namespace facetune
