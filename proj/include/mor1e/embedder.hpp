#pragma once

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "numeric.hpp"

namespace mor1e {

struct Embedding {
  Vector vector;
  std::string source_id;
};

enum class EmbedderKind { Synthetic, ExternalService };

struct EmbedderSpec {
  EmbedderKind kind = EmbedderKind::Synthetic;
  int dim = 16;

  // Synthetic geometry: orthonormal archetype means + per-text noise.
  int archetypes = 4;
  double noise = 0.25;
  uint64_t seed = 1;

  // External service.
  std::string endpoint;           // e.g. http://localhost:8080/v1/embeddings
  std::string model;              // model name sent in the request body
  std::string api_key_env = "EMBED_API_KEY";
  int timeout_sec = 30;
  int retries = 2;                // attempts after the first
  int parallel = 4;               // max in-flight requests
  int request_batch = 64;         // texts per request

  std::string cache_path;         // empty = no cache

  std::string fingerprint() const {
    std::ostringstream os;
    if (kind == EmbedderKind::Synthetic)
      os << "synthetic:d=" << dim << ":a=" << archetypes << ":noise=" << noise << ":seed=" << seed;
    else
      os << "service:" << model << ":d=" << dim;
    return os.str();
  }
};

// Stable token -> archetype band map shared by the synthetic embedder and the
// synthetic data generator.
inline int token_band(std::string_view token, int archetypes) {
  require(archetypes >= 1, "token_band: archetypes must be positive");
  return static_cast<int>(fnv1a64(token) % static_cast<uint64_t>(archetypes));
}

namespace detail {

// Gram-Schmidt over seeded gaussians: archetype means at mutual cosine 0.
inline std::vector<Vector> archetype_means(int dim, int archetypes, uint64_t seed) {
  require(archetypes <= dim, "synthetic embedder: archetypes (" + std::to_string(archetypes) +
                                 ") must not exceed dim (" + std::to_string(dim) + ")");
  Rng rng(derive_seed(seed, "archetype-means"));
  std::vector<Vector> means;
  while (static_cast<int>(means.size()) < archetypes) {
    Vector v = gaussian_vector(rng, dim);
    for (const Vector& m : means) axpy(-dot(v, m), m, v);
    double n = norm(v);
    if (n < 1e-8) continue;
    means.push_back(scale(v, 1.0 / n));
  }
  return means;
}

inline std::string format_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

inline double parse_double(const std::string& s, const std::string& where) {
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0')
    throw std::runtime_error(where + ": cannot parse float '" + s + "'");
  return v;
}

}  // namespace detail

// Deterministic text embedder: band histogram over archetype means plus
// seeded per-text noise. Means are orthonormal, so texts drawn from one band
// cluster tightly (within-cluster cosine ~ 1/(1+noise^2)).
class SyntheticEmbedder {
 public:
  explicit SyntheticEmbedder(const EmbedderSpec& spec)
      : spec_(spec), means_(detail::archetype_means(spec.dim, spec.archetypes, spec.seed)) {
    require(spec.dim >= 1, "synthetic embedder: dim must be positive");
    require(spec.noise >= 0.0, "synthetic embedder: noise must be non-negative");
  }

  Vector embed(std::string_view text) const {
    Vector e(spec_.dim);
    std::vector<double> hist(static_cast<size_t>(spec_.archetypes), 0.0);
    int count = 0;
    size_t pos = 0;
    while (pos < text.size()) {
      while (pos < text.size() && text[pos] == ' ') ++pos;
      size_t start = pos;
      while (pos < text.size() && text[pos] != ' ') ++pos;
      if (pos > start) {
        hist[static_cast<size_t>(token_band(text.substr(start, pos - start), spec_.archetypes))] += 1.0;
        ++count;
      }
    }
    if (count == 0) {
      hist[static_cast<size_t>(token_band(text, spec_.archetypes))] = 1.0;
      count = 1;
    }
    for (int a = 0; a < spec_.archetypes; ++a)
      axpy(hist[static_cast<size_t>(a)] / count, means_[static_cast<size_t>(a)], e);
    if (spec_.noise > 0.0) {
      Rng rng(derive_seed(spec_.seed, "text-noise") ^ fnv1a64(text));
      Vector n = gaussian_vector(rng, spec_.dim);
      double nn = norm(n);
      if (nn > 0.0) axpy(spec_.noise / nn, n, e);
    }
    if (norm(e) == 0.0) e = means_[0];  // degenerate cancellation, keep nonzero-norm invariant
    return e;
  }

  const std::vector<Vector>& means() const { return means_; }

 private:
  EmbedderSpec spec_;
  std::vector<Vector> means_;
};

// Raised when the external service fails for part of the input.
class EmbedError : public std::runtime_error {
 public:
  EmbedError(const std::string& msg, std::vector<int> indices)
      : std::runtime_error(msg), failed_indices(std::move(indices)) {}
  std::vector<int> failed_indices;
};

namespace detail {

struct EmbeddingCache {
  std::string path;
  std::map<std::string, Vector> entries;
  std::mutex mutex;

  static std::string key(std::string_view model, std::string_view text) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(std::string(model) + "\x1f" + std::string(text))));
    return buf;
  }

  void load(const EmbedderSpec& spec) {
    std::ifstream in(path);
    if (!in) return;  // new cache
    std::string header;
    std::getline(in, header);
    std::istringstream hs(header);
    int dim = 0;
    std::string model;
    hs >> dim >> model;
    if (dim != spec.dim || model != spec.model)
      throw std::runtime_error("embedding cache " + path + ": built for model '" + model + "' dim " +
                               std::to_string(dim) + ", requested '" + spec.model + "' dim " +
                               std::to_string(spec.dim));
    std::string line;
    int lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::istringstream ls(line);
      std::string hash;
      ls >> hash;
      Vector v(spec.dim);
      for (int i = 0; i < spec.dim; ++i) {
        std::string tok;
        if (!(ls >> tok))
          throw std::runtime_error("embedding cache " + path + " line " + std::to_string(lineno) +
                                   ": expected " + std::to_string(spec.dim) + " floats");
        v[i] = parse_double(tok, "embedding cache line " + std::to_string(lineno));
      }
      entries[hash] = v;
    }
  }

  void append(const EmbedderSpec& spec, const std::string& hash, const Vector& v) {
    std::lock_guard<std::mutex> lock(mutex);
    bool fresh = entries.empty() && !std::ifstream(path).good();
    std::ofstream out(path, std::ios::app);
    if (!out) throw std::runtime_error("embedding cache: cannot open " + path + " for append");
    if (fresh) out << spec.dim << " " << spec.model << "\n";
    out << hash;
    for (int i = 0; i < v.dim(); ++i) out << " " << format_double(v[i]);
    out << "\n";
    entries[hash] = v;
  }
};

inline std::vector<Vector> service_request(const EmbedderSpec& spec,
                                           const std::vector<std::string>& texts,
                                           const std::vector<int>& indices) {
  // De-facto embeddings API: POST {"model":..., "input":[...]} ->
  // {"data":[{"embedding":[...]}, ...]} in input order.
  nlohmann::json body;
  body["model"] = spec.model;
  body["input"] = texts;

  httplib::Client client(spec.endpoint);
  client.set_connection_timeout(spec.timeout_sec);
  client.set_read_timeout(spec.timeout_sec);
  httplib::Headers headers;
  if (!spec.api_key_env.empty()) {
    if (const char* key = std::getenv(spec.api_key_env.c_str()); key && *key)
      headers.emplace("Authorization", std::string("Bearer ") + key);
  }

  std::string last_error;
  for (int attempt = 0; attempt <= spec.retries; ++attempt) {
    auto res = client.Post("/v1/embeddings", headers, body.dump(), "application/json");
    if (!res) {
      last_error = "connection error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 500) {
      last_error = "server status " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200)
      throw EmbedError("embedding service returned status " + std::to_string(res->status), indices);
    nlohmann::json reply = nlohmann::json::parse(res->body, nullptr, false);
    if (reply.is_discarded() || !reply.contains("data") || !reply["data"].is_array() ||
        reply["data"].size() != texts.size())
      throw EmbedError("embedding service reply malformed or count mismatch", indices);
    std::vector<Vector> out;
    out.reserve(texts.size());
    for (const auto& item : reply["data"]) {
      const auto& arr = item.at("embedding");
      if (static_cast<int>(arr.size()) != spec.dim)
        throw EmbedError("embedding service dimension drift: got " + std::to_string(arr.size()) +
                             ", spec says " + std::to_string(spec.dim),
                         indices);
      Vector v(spec.dim);
      for (int i = 0; i < spec.dim; ++i) v[i] = arr[static_cast<size_t>(i)].get<double>();
      out.push_back(std::move(v));
    }
    return out;
  }
  throw EmbedError("embedding service failed after " + std::to_string(spec.retries + 1) +
                       " attempts (" + last_error + ")",
                   indices);
}

}  // namespace detail

// Embeds a batch of texts, preserving order. External-service requests run
// with bounded parallelism; the cache (when configured) is consulted first and
// appended under a lock.
inline std::vector<Embedding> embed(const EmbedderSpec& spec, const std::vector<std::string>& texts) {
  require(!texts.empty(), "embed: text list must not be empty");
  std::vector<Embedding> out(texts.size());
  for (size_t i = 0; i < texts.size(); ++i) out[i].source_id = std::to_string(i);

  if (spec.kind == EmbedderKind::Synthetic) {
    SyntheticEmbedder se(spec);
    for (size_t i = 0; i < texts.size(); ++i) out[i].vector = se.embed(texts[i]);
    return out;
  }

  require(!spec.endpoint.empty(), "embed: external service requires an endpoint");
  require(!spec.model.empty(), "embed: external service requires a model name");

  detail::EmbeddingCache cache;
  std::vector<std::string> keys(texts.size());
  std::vector<int> missing;
  if (!spec.cache_path.empty()) {
    cache.path = spec.cache_path;
    cache.load(spec);
  }
  for (size_t i = 0; i < texts.size(); ++i) {
    keys[i] = detail::EmbeddingCache::key(spec.model, texts[i]);
    if (!spec.cache_path.empty()) {
      auto it = cache.entries.find(keys[i]);
      if (it != cache.entries.end()) {
        out[i].vector = it->second;
        continue;
      }
    }
    missing.push_back(static_cast<int>(i));
  }

  if (!missing.empty()) {
    std::vector<std::vector<int>> chunks;
    for (size_t ofs = 0; ofs < missing.size(); ofs += static_cast<size_t>(spec.request_batch))
      chunks.emplace_back(missing.begin() + static_cast<long>(ofs),
                          missing.begin() +
                              static_cast<long>(std::min(ofs + static_cast<size_t>(spec.request_batch),
                                                         missing.size())));
    std::mutex fail_mutex;
    std::exception_ptr first_error;
    size_t next_chunk = 0;
    std::mutex chunk_mutex;
    auto worker = [&]() {
      for (;;) {
        size_t my;
        {
          std::lock_guard<std::mutex> lock(chunk_mutex);
          if (next_chunk >= chunks.size()) return;
          my = next_chunk++;
        }
        const auto& idx = chunks[my];
        std::vector<std::string> batch;
        batch.reserve(idx.size());
        for (int i : idx) batch.push_back(texts[static_cast<size_t>(i)]);
        try {
          auto vecs = detail::service_request(spec, batch, idx);
          for (size_t j = 0; j < idx.size(); ++j) {
            out[static_cast<size_t>(idx[j])].vector = vecs[j];
            if (!spec.cache_path.empty())
              cache.append(spec, keys[static_cast<size_t>(idx[j])], vecs[j]);
          }
        } catch (...) {
          std::lock_guard<std::mutex> lock(fail_mutex);
          if (!first_error) first_error = std::current_exception();
          return;
        }
      }
    };
    int nthreads = std::max(1, std::min<int>(spec.parallel, static_cast<int>(chunks.size())));
    std::vector<std::thread> pool;
    for (int t = 0; t < nthreads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
  }

  for (auto& e : out) {
    ensure_finite(e.vector, "embed");
    if (norm(e.vector) == 0.0) throw std::runtime_error("embed: service returned a zero-norm embedding");
  }
  return out;
}

}  // namespace mor1e
