#pragma once

#include <cmath>
#include <iostream>

#include "clustering.hpp"
#include "numeric.hpp"

namespace mor1e {

// Per-instance affinity to each intuition centroid, clamped to [0, 1].
struct IntuitionVector {
  Vector scores;
  int k() const { return scores.dim(); }
};

struct IntuitionDetail {
  IntuitionVector clamped;
  Vector raw;  // unclamped cosines, kept for debug output
};

// Cosine similarity against every centroid, negatives clamped to zero. A
// zero-norm embedding degrades to the uniform vector 1/K with a warning
// instead of aborting.
inline IntuitionDetail compute_intuition_detail(const Vector& e, const CentroidSet& c) {
  c.validate();
  require(e.dim() == c.dim(), "compute_intuition: embedding dim " + std::to_string(e.dim()) +
                                  " does not match centroid dim " + std::to_string(c.dim()));
  IntuitionDetail out;
  out.raw = Vector(c.k());
  out.clamped.scores = Vector(c.k());
  if (norm(e) == 0.0) {
    std::cerr << "warning: zero-norm embedding, substituting uniform intuition 1/" << c.k() << "\n";
    for (int i = 0; i < c.k(); ++i) {
      out.raw[i] = 0.0;
      out.clamped.scores[i] = 1.0 / c.k();
    }
    return out;
  }
  for (int i = 0; i < c.k(); ++i) {
    double s = cosine_similarity(e, c.centroids[static_cast<size_t>(i)]);
    out.raw[i] = s;
    out.clamped.scores[i] = std::clamp(s, 0.0, 1.0);
  }
  return out;
}

inline IntuitionVector compute_intuition(const Vector& e, const CentroidSet& c) {
  return compute_intuition_detail(e, c).clamped;
}

inline IntuitionVector compute_intuition(const Embedding& e, const CentroidSet& c) {
  return compute_intuition(e.vector, c);
}

// Trigonometric encoding of a task-category index; |sin((i+1)c)| lands in [0,1].
inline IntuitionVector task_category_encoding(int category, int n) {
  require(category >= 0, "task_category_encoding: category must be non-negative");
  require(n >= 1, "task_category_encoding: n must be positive");
  IntuitionVector iv;
  iv.scores = Vector(n);
  for (int i = 0; i < n; ++i) iv.scores[i] = std::fabs(std::sin(static_cast<double>(i + 1) * category));
  return iv;
}

// One-hot task intuition, used to isolate routing behavior from clustering quality.
inline IntuitionVector oracle_onehot(int task, int k) {
  require(task >= 0 && task < k, "oracle_onehot: task " + std::to_string(task) + " out of range for k=" +
                                     std::to_string(k));
  IntuitionVector iv;
  iv.scores = Vector(k);
  iv.scores[task] = 1.0;
  return iv;
}

}  // namespace mor1e
