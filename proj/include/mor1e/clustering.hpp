#pragma once

#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "embedder.hpp"
#include "numeric.hpp"

namespace mor1e {

struct CentroidSet {
  std::vector<Vector> centroids;
  std::string embedder_fingerprint;

  int k() const { return static_cast<int>(centroids.size()); }
  int dim() const { return centroids.empty() ? 0 : centroids[0].dim(); }

  void validate() const {
    require(k() >= 2, "CentroidSet: k must be >= 2, got " + std::to_string(k()));
    for (int i = 0; i < k(); ++i) {
      require(centroids[static_cast<size_t>(i)].dim() == dim(),
              "CentroidSet: centroid " + std::to_string(i) + " has dim " +
                  std::to_string(centroids[static_cast<size_t>(i)].dim()) + ", expected " +
                  std::to_string(dim()));
      require(norm(centroids[static_cast<size_t>(i)]) > 0.0,
              "CentroidSet: centroid " + std::to_string(i) + " has zero norm");
    }
  }
};

struct KmeansResult {
  CentroidSet centroids;
  std::vector<int> assignment;   // per input embedding
  std::vector<int> cluster_sizes;
  double objective = 0.0;        // within-cluster sum of squared distances
  int iterations = 0;
};

namespace detail {

inline double sq_dist(const Vector& a, const Vector& b) {
  double s = 0.0;
  for (int i = 0; i < a.dim(); ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// D^2-weighted seeding.
inline std::vector<Vector> kmeanspp_seed(const std::vector<const Vector*>& pts, int k, Rng& rng) {
  std::vector<Vector> centers;
  centers.push_back(*pts[static_cast<size_t>(rng.below(static_cast<int>(pts.size())))]);
  std::vector<double> mind(pts.size(), std::numeric_limits<double>::infinity());
  while (static_cast<int>(centers.size()) < k) {
    double total = 0.0;
    for (size_t j = 0; j < pts.size(); ++j) {
      mind[j] = std::min(mind[j], sq_dist(*pts[j], centers.back()));
      total += mind[j];
    }
    size_t pick = 0;
    if (total > 0.0) {
      double r = rng.uniform() * total;
      double acc = 0.0;
      for (size_t j = 0; j < pts.size(); ++j) {
        acc += mind[j];
        if (acc >= r) {
          pick = j;
          break;
        }
      }
    } else {
      pick = static_cast<size_t>(rng.below(static_cast<int>(pts.size())));
    }
    centers.push_back(*pts[pick]);
  }
  return centers;
}

}  // namespace detail

namespace detail {

// One k-means++ seeding followed by Lloyd's iterations.
inline KmeansResult kmeans_single(const std::vector<const Vector*>& pts, int d, int k, Rng& rng,
                                  int max_iters, double tol) {
  std::vector<Vector> centers = detail::kmeanspp_seed(pts, k, rng);
  std::vector<int> assign(pts.size(), 0);
  double prev_objective = std::numeric_limits<double>::infinity();
  int iter = 0;
  double objective = 0.0;

  for (iter = 1; iter <= max_iters; ++iter) {
    // Assignment step.
    objective = 0.0;
    for (size_t j = 0; j < pts.size(); ++j) {
      double best = std::numeric_limits<double>::infinity();
      int bi = 0;
      for (int c = 0; c < k; ++c) {
        double dd = detail::sq_dist(*pts[j], centers[static_cast<size_t>(c)]);
        if (dd < best) {
          best = dd;
          bi = c;
        }
      }
      assign[j] = bi;
      objective += best;
    }
    if (objective > prev_objective + 1e-9 * (1.0 + prev_objective))
      throw std::logic_error("kmeans: objective increased between iterations");
    prev_objective = objective;

    // Update step.
    std::vector<Vector> sums(static_cast<size_t>(k), Vector(d));
    std::vector<int> counts(static_cast<size_t>(k), 0);
    for (size_t j = 0; j < pts.size(); ++j) {
      axpy(1.0, *pts[j], sums[static_cast<size_t>(assign[j])]);
      counts[static_cast<size_t>(assign[j])]++;
    }
    std::vector<bool> taken(pts.size(), false);
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<size_t>(c)] > 0) continue;
      // Reseed at the point farthest from its assigned centroid.
      double far = -1.0;
      size_t pick = 0;
      for (size_t j = 0; j < pts.size(); ++j) {
        if (taken[j]) continue;
        double dd = detail::sq_dist(*pts[j], centers[static_cast<size_t>(assign[j])]);
        if (dd > far) {
          far = dd;
          pick = j;
        }
      }
      taken[pick] = true;
      sums[static_cast<size_t>(c)] = *pts[pick];
      counts[static_cast<size_t>(c)] = 1;
      // The donor cluster loses the point.
      int old = assign[pick];
      axpy(-1.0, *pts[pick], sums[static_cast<size_t>(old)]);
      counts[static_cast<size_t>(old)]--;
      assign[pick] = c;
      // Reseeding can change the objective arbitrarily; reset the monotonicity baseline.
      prev_objective = std::numeric_limits<double>::infinity();
    }

    double max_shift = 0.0;
    for (int c = 0; c < k; ++c) {
      Vector nc = scale(sums[static_cast<size_t>(c)], 1.0 / counts[static_cast<size_t>(c)]);
      max_shift = std::max(max_shift, std::sqrt(detail::sq_dist(nc, centers[static_cast<size_t>(c)])));
      centers[static_cast<size_t>(c)] = std::move(nc);
    }
    if (max_shift < tol) break;
  }

  KmeansResult res;
  res.centroids.centroids = std::move(centers);
  res.assignment = std::move(assign);
  res.cluster_sizes.assign(static_cast<size_t>(k), 0);
  res.objective = 0.0;
  for (size_t j = 0; j < pts.size(); ++j) {
    // Final assignment against the final centers.
    double best = std::numeric_limits<double>::infinity();
    int bi = 0;
    for (int c = 0; c < k; ++c) {
      double dd = detail::sq_dist(*pts[j], res.centroids.centroids[static_cast<size_t>(c)]);
      if (dd < best) {
        best = dd;
        bi = c;
      }
    }
    res.assignment[j] = bi;
    res.cluster_sizes[static_cast<size_t>(bi)]++;
    res.objective += best;
  }
  res.iterations = std::min(iter, max_iters);
  return res;
}

}  // namespace detail

// Lloyd's iterations with k-means++ seeding and a few seeded restarts, keeping
// the lowest within-cluster sum of squares. Nearest-centroid assignment under
// Euclidean distance, ties to the lowest centroid index. An emptied cluster is
// reseeded at the point farthest from its currently assigned centroid.
inline KmeansResult kmeans(const std::vector<Embedding>& embeddings, int k, Rng& rng,
                           int max_iters = 100, double tol = 1e-9, int restarts = 8) {
  require(k >= 2, "kmeans: k must be >= 2, got " + std::to_string(k));
  require(static_cast<int>(embeddings.size()) >= k,
          "kmeans: need at least k=" + std::to_string(k) + " points, got " +
              std::to_string(embeddings.size()));
  require(max_iters >= 1, "kmeans: max_iters must be >= 1");
  require(tol > 0.0, "kmeans: tol must be positive");
  require(restarts >= 1, "kmeans: restarts must be >= 1");

  const int d = embeddings[0].vector.dim();
  std::vector<const Vector*> pts;
  pts.reserve(embeddings.size());
  for (const auto& e : embeddings) {
    require(e.vector.dim() == d, "kmeans: embedding dim mismatch: " + std::to_string(e.vector.dim()) +
                                     " vs " + std::to_string(d));
    pts.push_back(&e.vector);
  }

  KmeansResult best;
  for (int r = 0; r < restarts; ++r) {
    KmeansResult run = detail::kmeans_single(pts, d, k, rng, max_iters, tol);
    if (r == 0 || run.objective < best.objective) best = std::move(run);
  }
  best.centroids.validate();
  return best;
}

inline void save_centroids(const CentroidSet& c, const std::string& path) {
  c.validate();
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_centroids: cannot open " + path);
  out << c.k() << " " << c.dim() << " " << c.embedder_fingerprint << "\n";
  for (const auto& mu : c.centroids) {
    for (int i = 0; i < mu.dim(); ++i) out << (i ? " " : "") << detail::format_double(mu[i]);
    out << "\n";
  }
  if (!out) throw std::runtime_error("save_centroids: write failed for " + path);
}

inline CentroidSet load_centroids(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_centroids: cannot open " + path);
  std::string header;
  if (!std::getline(in, header))
    throw std::runtime_error("load_centroids: " + path + ": missing header line (k d fingerprint)");
  std::istringstream hs(header);
  int k = 0, d = 0;
  std::string fingerprint;
  if (!(hs >> k >> d)) throw std::runtime_error("load_centroids: " + path + ": malformed header '" + header + "'");
  std::getline(hs, fingerprint);
  if (!fingerprint.empty() && fingerprint[0] == ' ') fingerprint.erase(0, 1);
  if (k < 2 || d < 1)
    throw std::runtime_error("load_centroids: " + path + ": header claims k=" + std::to_string(k) +
                             " d=" + std::to_string(d));
  CentroidSet c;
  c.embedder_fingerprint = fingerprint;
  std::string line;
  for (int row = 0; row < k; ++row) {
    if (!std::getline(in, line))
      throw std::runtime_error("load_centroids: " + path + ": header says k=" + std::to_string(k) +
                               " but centroid row " + std::to_string(row) + " is missing");
    std::istringstream ls(line);
    Vector mu(d);
    for (int i = 0; i < d; ++i) {
      std::string tok;
      if (!(ls >> tok))
        throw std::runtime_error("load_centroids: " + path + ": row " + std::to_string(row) +
                                 " field " + std::to_string(i) + " missing (expected " +
                                 std::to_string(d) + " floats)");
      mu[i] = detail::parse_double(tok, "load_centroids row " + std::to_string(row));
    }
    std::string extra;
    if (ls >> extra)
      throw std::runtime_error("load_centroids: " + path + ": row " + std::to_string(row) +
                               " has more than " + std::to_string(d) + " fields");
    c.centroids.push_back(std::move(mu));
  }
  c.validate();
  return c;
}

// Optional pre-clustering step: scale every embedding to unit length, turning
// Euclidean k-means into its spherical variant. Off by default everywhere.
inline std::vector<Embedding> normalize_embeddings(std::vector<Embedding> embeddings) {
  for (auto& e : embeddings) {
    double n = norm(e.vector);
    require(n > 0.0, "normalize_embeddings: zero-norm embedding (source " + e.source_id + ")");
    e.vector = scale(e.vector, 1.0 / n);
  }
  return embeddings;
}

// Chance-corrected partition agreement.
inline double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  require(a.size() == b.size(), "adjusted_rand_index: label vectors differ in length");
  require(!a.empty(), "adjusted_rand_index: empty labels");
  auto relabel = [](const std::vector<int>& v) {
    std::vector<int> out(v.size());
    std::map<int, int> ids;
    for (size_t i = 0; i < v.size(); ++i) {
      auto [it, inserted] = ids.emplace(v[i], static_cast<int>(ids.size()));
      out[i] = it->second;
    }
    return std::pair(out, static_cast<int>(ids.size()));
  };
  auto [ra, na] = relabel(a);
  auto [rb, nb] = relabel(b);
  std::vector<std::vector<long long>> table(static_cast<size_t>(na),
                                            std::vector<long long>(static_cast<size_t>(nb), 0));
  for (size_t i = 0; i < ra.size(); ++i) table[static_cast<size_t>(ra[i])][static_cast<size_t>(rb[i])]++;
  auto choose2 = [](long long x) { return x * (x - 1) / 2; };
  long long sum_ij = 0, sum_a = 0, sum_b = 0;
  for (int i = 0; i < na; ++i) {
    long long row = 0;
    for (int j = 0; j < nb; ++j) {
      sum_ij += choose2(table[static_cast<size_t>(i)][static_cast<size_t>(j)]);
      row += table[static_cast<size_t>(i)][static_cast<size_t>(j)];
    }
    sum_a += choose2(row);
  }
  for (int j = 0; j < nb; ++j) {
    long long col = 0;
    for (int i = 0; i < na; ++i) col += table[static_cast<size_t>(i)][static_cast<size_t>(j)];
    sum_b += choose2(col);
  }
  double n2 = static_cast<double>(choose2(static_cast<long long>(a.size())));
  double expected = static_cast<double>(sum_a) * static_cast<double>(sum_b) / n2;
  double maximum = 0.5 * (static_cast<double>(sum_a) + static_cast<double>(sum_b));
  if (maximum == expected) return 1.0;  // both partitions trivial
  return (static_cast<double>(sum_ij) - expected) / (maximum - expected);
}

// Top-2 principal components by power iteration; raw 2-D coordinates for
// plotting elsewhere.
inline std::vector<std::pair<double, double>> pca2d(const std::vector<Embedding>& embeddings) {
  require(embeddings.size() >= 2, "pca2d: need at least two embeddings");
  const int d = embeddings[0].vector.dim();
  Vector mean(d);
  for (const auto& e : embeddings) axpy(1.0, e.vector, mean);
  mean = scale(mean, 1.0 / static_cast<double>(embeddings.size()));
  std::vector<Vector> centered;
  centered.reserve(embeddings.size());
  for (const auto& e : embeddings) centered.push_back(sub(e.vector, mean));

  auto cov_apply = [&](const Vector& v) {
    Vector out(d);
    for (const auto& x : centered) axpy(dot(x, v), x, out);
    return scale(out, 1.0 / static_cast<double>(centered.size()));
  };
  auto power = [&](const Vector* deflate) {
    Rng rng(20240515);
    Vector v = gaussian_vector(rng, d);
    if (deflate) axpy(-dot(v, *deflate), *deflate, v);
    double n = norm(v);
    if (n == 0.0) { v = Vector(d); v[0] = 1.0; n = 1.0; }
    v = scale(v, 1.0 / n);
    for (int it = 0; it < 200; ++it) {
      Vector w = cov_apply(v);
      if (deflate) axpy(-dot(w, *deflate), *deflate, w);
      double wn = norm(w);
      if (wn < 1e-14) break;
      v = scale(w, 1.0 / wn);
    }
    return v;
  };
  Vector p1 = power(nullptr);
  Vector p2 = power(&p1);
  std::vector<std::pair<double, double>> out;
  out.reserve(centered.size());
  for (const auto& x : centered) out.emplace_back(dot(x, p1), dot(x, p2));
  return out;
}

}  // namespace mor1e
