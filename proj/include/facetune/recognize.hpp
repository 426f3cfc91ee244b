#pragma once

// Open-set decisions. Confidence is the largest softmax probability over
// the enrolled classes; a prediction is accepted when confidence >=
// threshold and rejected as Unknown when it is strictly below.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "facetune/core.hpp"
#include "facetune/finetune.hpp"

namespace facetune {

/// Stabilized softmax of one logit row.
inline std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw DimensionError("softmax of an empty row");
  require_finite(logits, "logits");
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] = std::exp(logits[i] - m));
  for (double& v : p) v /= s;
  return p;
}

struct RecognitionDecision {
  bool identified = false;
  // Identified: the accepted label. Unknown: the best-scoring label, kept
  // for diagnostics.
  IdentityLabel label;
  double confidence = 0.0;
  std::vector<double> probabilities;

  /// "<label|UNKNOWN> <confidence with 4 decimals>"
  std::string line() const {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", confidence);
    return (identified ? label.name : std::string("UNKNOWN")) + " " + buf;
  }
};

inline RecognitionDecision decide_from_probabilities(std::vector<double> probs, const Gallery& gallery,
                                                     double threshold) {
  const std::size_t top = argmax(probs);
  RecognitionDecision d;
  d.label = gallery.labels.at(top);
  d.confidence = probs[top];
  d.identified = d.confidence >= threshold;
  d.probabilities = std::move(probs);
  return d;
}

inline RecognitionDecision predict(const Embedding& emb, const Gallery& gallery, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
  if (emb.dim() != gallery.dim()) {
    throw DimensionError("embedding dimension " + std::to_string(emb.dim()) + " differs from gallery dimension " +
                         std::to_string(gallery.dim()));
  }
  std::vector<double> logits(gallery.num_classes());
  for (std::size_t c = 0; c < logits.size(); ++c) {
    logits[c] = gallery.logit_scale * dot(emb.values(), gallery.class_embeddings.row(c));
  }
  return decide_from_probabilities(softmax(logits), gallery, threshold);
}

}  // namespace facetune
