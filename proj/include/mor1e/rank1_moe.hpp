#pragma once

#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "intuition.hpp"
#include "numeric.hpp"

namespace mor1e {

enum class FusionMode { None, TaskCategory, Intuition };
enum class RoutingMode { Diagonal, Full };

inline std::string to_string(FusionMode m) {
  switch (m) {
    case FusionMode::None: return "none";
    case FusionMode::TaskCategory: return "taskcat";
    case FusionMode::Intuition: return "intuition";
  }
  return "none";
}

inline std::string to_string(RoutingMode m) {
  return m == RoutingMode::Diagonal ? "diag" : "full";
}

inline FusionMode parse_fusion_mode(const std::string& s) {
  if (s == "none") return FusionMode::None;
  if (s == "taskcat") return FusionMode::TaskCategory;
  if (s == "intuition") return FusionMode::Intuition;
  throw std::invalid_argument("unknown fusion mode '" + s + "' (expected none|taskcat|intuition)");
}

inline RoutingMode parse_routing_mode(const std::string& s) {
  if (s == "diag") return RoutingMode::Diagonal;
  if (s == "full") return RoutingMode::Full;
  throw std::invalid_argument("unknown routing mode '" + s + "' (expected diag|full)");
}

// Softmax gate. Diagonal mode emits N logits; Full (mix-and-match) mode emits
// N^2 logits, one per (u_i, v_j) pairing.
struct Router {
  Matrix a;  // N x n, or N^2 x n in Full mode
  Vector b;  // N, or N^2
  int experts = 0;
  RoutingMode mode = RoutingMode::Diagonal;

  int logits() const { return mode == RoutingMode::Diagonal ? experts : experts * experts; }
};

struct GateValues {
  RoutingMode mode = RoutingMode::Diagonal;
  int experts = 0;
  Vector values;  // length N (Diagonal) or N^2 row-major (Full)

  double at(int i, int j) const { return values[i * experts + j]; }
  double& at(int i, int j) { return values[i * experts + j]; }
};

inline Router make_router(int experts, int input_dim, RoutingMode mode, Rng& rng) {
  require(experts >= 1, "make_router: experts must be >= 1");
  Router r;
  r.experts = experts;
  r.mode = mode;
  int rows = mode == RoutingMode::Diagonal ? experts : experts * experts;
  double bound = 1.0 / std::sqrt(static_cast<double>(input_dim));
  r.a = Matrix(rows, input_dim);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < input_dim; ++j) r.a(i, j) = rng.uniform(-bound, bound);
  r.b = Vector(rows);
  return r;
}

inline GateValues gate(const Router& router, const Vector& x) {
  require(x.dim() == router.a.cols(), "gate: input dim " + std::to_string(x.dim()) +
                                          " does not match router input dim " +
                                          std::to_string(router.a.cols()));
  Vector logits = matvec(router.a, x);
  for (int i = 0; i < logits.dim(); ++i) logits[i] += router.b[i];
  GateValues g;
  g.mode = router.mode;
  g.experts = router.experts;
  g.values = softmax(logits);
  return g;
}

// g(x) (+) reference. Diagonal: element-wise addition per Algorithm 2, no
// renormalization unless asked. Full: the reference enters as the outer
// product ref ref^T scaled by 1/K.
inline GateValues fuse(const GateValues& g, const IntuitionVector& ref, FusionMode mode,
                       bool renormalize = false) {
  if (mode == FusionMode::None) return g;
  GateValues out = g;
  if (g.mode == RoutingMode::Diagonal) {
    require(ref.k() == g.experts, "fuse: reference length " + std::to_string(ref.k()) +
                                      " does not match expert count " + std::to_string(g.experts));
    for (int i = 0; i < g.experts; ++i) out.values[i] += ref.scores[i];
  } else {
    require(ref.k() == g.experts, "fuse: reference length " + std::to_string(ref.k()) +
                                      " does not match expert count " + std::to_string(g.experts));
    double inv_k = 1.0 / static_cast<double>(ref.k());
    for (int i = 0; i < g.experts; ++i)
      for (int j = 0; j < g.experts; ++j) out.at(i, j) += inv_k * ref.scores[i] * ref.scores[j];
  }
  if (renormalize) {
    double total = 0.0;
    for (int i = 0; i < out.values.dim(); ++i) total += out.values[i];
    for (int i = 0; i < out.values.dim(); ++i) out.values[i] /= total;
  }
  return out;
}

// Keeps the k largest gate entries (ties to the lowest expert index), zeroes
// the rest, renormalizes the kept mass to 1.
inline GateValues topk_mask(const GateValues& g, int k) {
  require(g.mode == RoutingMode::Diagonal, "topk_mask: Diagonal mode only");
  require(k >= 1 && k <= g.experts, "topk_mask: k=" + std::to_string(k) + " out of range [1, " +
                                        std::to_string(g.experts) + "]");
  std::vector<int> order(static_cast<size_t>(g.experts));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (g.values[a] != g.values[b]) return g.values[a] > g.values[b];
    return a < b;
  });
  GateValues out = g;
  for (int i = 0; i < g.experts; ++i) out.values[i] = 0.0;
  double kept = 0.0;
  for (int i = 0; i < k; ++i) kept += g.values[order[static_cast<size_t>(i)]];
  for (int i = 0; i < k; ++i) {
    int idx = order[static_cast<size_t>(i)];
    out.values[idx] = g.values[idx] / kept;
  }
  return out;
}

// f_i(x) = u (v^T x), O(m+n), never materializing the outer product.
inline Vector expert_apply(const Vector& u, const Vector& v, const Vector& x) {
  require(v.dim() == x.dim(), "expert_apply: v dim " + std::to_string(v.dim()) +
                                  " does not match x dim " + std::to_string(x.dim()));
  return scale(u, dot(v, x));
}

struct Rank1Expert {
  Vector u;
  Vector v;
};

// Frozen base W plus N rank-1 experts and their router: z = Wx + U G V^T x.
struct Rank1MoeLayer {
  Matrix w;       // m x n, never trained
  Matrix u_bank;  // m x N, column i is expert i's u
  Matrix v_bank;  // n x N, column i is expert i's v
  Router router;
  FusionMode fusion = FusionMode::None;
  RoutingMode routing = RoutingMode::Diagonal;
  bool renormalize_fused = false;

  int m() const { return w.rows(); }
  int n() const { return w.cols(); }
  int experts() const { return u_bank.cols(); }

  Rank1Expert expert(int i) const {
    Rank1Expert e;
    e.u = Vector(m());
    e.v = Vector(n());
    for (int r = 0; r < m(); ++r) e.u[r] = u_bank(r, i);
    for (int r = 0; r < n(); ++r) e.v[r] = v_bank(r, i);
    return e;
  }
};

// u_bank starts at zero so the adapter is an exact no-op at step 0.
inline Rank1MoeLayer make_rank1_layer(Matrix w, int experts, FusionMode fusion, RoutingMode routing,
                                      Rng& rng) {
  require(experts >= 1, "make_rank1_layer: experts must be >= 1");
  Rank1MoeLayer layer;
  layer.fusion = fusion;
  layer.routing = routing;
  int m = w.rows(), n = w.cols();
  layer.w = std::move(w);
  layer.u_bank = Matrix(m, experts);
  layer.v_bank = Matrix(n, experts);
  double bound = 1.0 / std::sqrt(static_cast<double>(n));
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < experts; ++i) layer.v_bank(j, i) = rng.uniform(-bound, bound);
  layer.router = make_router(experts, n, routing, rng);
  return layer;
}

namespace detail {

inline const IntuitionVector* check_fusion_input(const Rank1MoeLayer& layer,
                                                 const IntuitionVector* intuition) {
  if (layer.fusion == FusionMode::None) return nullptr;
  require(intuition != nullptr,
          "rank1-moe: fusion mode " + to_string(layer.fusion) + " requires an intuition vector");
  require(intuition->k() == layer.experts(),
          "rank1-moe: intuition length " + std::to_string(intuition->k()) +
              " must equal expert count " + std::to_string(layer.experts()));
  return intuition;
}

}  // namespace detail

inline GateValues layer_gate(const Rank1MoeLayer& layer, const Vector& x,
                             const IntuitionVector* intuition) {
  const IntuitionVector* ref = detail::check_fusion_input(layer, intuition);
  GateValues g = gate(layer.router, x);
  if (ref) g = fuse(g, *ref, layer.fusion, layer.renormalize_fused);
  return g;
}

// Factored evaluation: t = V^T x, s = G t, z = Wx + U s.
inline Vector forward_with_gate(const Rank1MoeLayer& layer, const Vector& x, const GateValues& g) {
  require(x.dim() == layer.n(), "rank1-moe forward: input dim " + std::to_string(x.dim()) +
                                    " does not match layer n=" + std::to_string(layer.n()));
  Vector t = matvec_t(layer.v_bank, x);
  Vector s(layer.experts());
  if (g.mode == RoutingMode::Diagonal) {
    for (int i = 0; i < layer.experts(); ++i) s[i] = g.values[i] * t[i];
  } else {
    for (int i = 0; i < layer.experts(); ++i) {
      double acc = 0.0;
      for (int j = 0; j < layer.experts(); ++j) acc += g.at(i, j) * t[j];
      s[i] = acc;
    }
  }
  Vector z = matvec(layer.w, x);
  Vector us = matvec(layer.u_bank, s);
  axpy(1.0, us, z);
  return z;
}

inline Vector forward(const Rank1MoeLayer& layer, const Vector& x,
                      const IntuitionVector* intuition = nullptr) {
  return forward_with_gate(layer, x, layer_gate(layer, x, intuition));
}

// Explicit per-expert summation, the equivalence oracle for forward().
inline Vector forward_naive_with_gate(const Rank1MoeLayer& layer, const Vector& x,
                                      const GateValues& g) {
  Vector z = matvec(layer.w, x);
  if (g.mode == RoutingMode::Diagonal) {
    for (int i = 0; i < layer.experts(); ++i) {
      Rank1Expert e = layer.expert(i);
      axpy(g.values[i], expert_apply(e.u, e.v, x), z);
    }
  } else {
    for (int i = 0; i < layer.experts(); ++i) {
      for (int j = 0; j < layer.experts(); ++j) {
        Rank1Expert ui = layer.expert(i);
        Rank1Expert vj = layer.expert(j);
        axpy(g.at(i, j), expert_apply(ui.u, vj.v, x), z);
      }
    }
  }
  return z;
}

inline Vector forward_naive(const Rank1MoeLayer& layer, const Vector& x,
                            const IntuitionVector* intuition = nullptr) {
  return forward_naive_with_gate(layer, x, layer_gate(layer, x, intuition));
}

struct Rank1MoeGrads {
  Matrix du;  // m x N
  Matrix dv;  // n x N
  Matrix da;  // router weight
  Vector db;  // router bias
  Vector dx;  // n

  void add(const Rank1MoeGrads& o) {
    for (int i = 0; i < du.size(); ++i) du.data()[i] += o.du.data()[i];
    for (int i = 0; i < dv.size(); ++i) dv.data()[i] += o.dv.data()[i];
    for (int i = 0; i < da.size(); ++i) da.data()[i] += o.da.data()[i];
    for (int i = 0; i < db.dim(); ++i) db[i] += o.db[i];
  }
};

inline Rank1MoeGrads zero_rank1_grads(const Rank1MoeLayer& layer) {
  Rank1MoeGrads g;
  g.du = Matrix(layer.m(), layer.experts());
  g.dv = Matrix(layer.n(), layer.experts());
  g.da = Matrix(layer.router.a.rows(), layer.router.a.cols());
  g.db = Vector(layer.router.b.dim());
  g.dx = Vector(layer.n());
  return g;
}

// Chain rule through the factored path and the softmax gate. W is frozen; the
// intuition reference is a constant, so no gradient flows into it.
inline Rank1MoeGrads backward(const Rank1MoeLayer& layer, const Vector& x,
                              const IntuitionVector* intuition, const Vector& upstream) {
  require(x.dim() == layer.n(), "rank1-moe backward: input dim mismatch");
  require(upstream.dim() == layer.m(), "rank1-moe backward: upstream dim " +
                                           std::to_string(upstream.dim()) + " does not match m=" +
                                           std::to_string(layer.m()));
  const IntuitionVector* ref = detail::check_fusion_input(layer, intuition);
  const int N = layer.experts();

  // Recompute the forward intermediates.
  Vector logits = matvec(layer.router.a, x);
  for (int i = 0; i < logits.dim(); ++i) logits[i] += layer.router.b[i];
  Vector probs = softmax(logits);
  // Without fusion, renormalizing a probability vector is the identity and its
  // Jacobian is annihilated by the softmax backward, so only the fused case
  // needs the extra chain step below.
  Vector fused = probs;
  if (ref) {
    GateValues gv;
    gv.mode = layer.routing;
    gv.experts = N;
    gv.values = probs;
    fused = fuse(gv, *ref, layer.fusion, layer.renormalize_fused).values;
  }
  Vector t = matvec_t(layer.v_bank, x);
  Vector s(N);
  if (layer.routing == RoutingMode::Diagonal) {
    for (int i = 0; i < N; ++i) s[i] = fused[i] * t[i];
  } else {
    for (int i = 0; i < N; ++i) {
      double acc = 0.0;
      for (int j = 0; j < N; ++j) acc += fused[i * N + j] * t[j];
      s[i] = acc;
    }
  }

  Rank1MoeGrads g = zero_rank1_grads(layer);

  // z = Wx + U s
  add_outer(g.du, 1.0, upstream, s);
  Vector ds = matvec_t(layer.u_bank, upstream);

  Vector dt(N);
  Vector dfused(fused.dim());
  if (layer.routing == RoutingMode::Diagonal) {
    for (int i = 0; i < N; ++i) {
      dfused[i] = ds[i] * t[i];
      dt[i] = ds[i] * fused[i];
    }
  } else {
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < N; ++j) {
        dfused[i * N + j] = ds[i] * t[j];
        dt[j] += fused[i * N + j] * ds[i];
      }
  }

  // t = V^T x
  add_outer(g.dv, 1.0, x, dt);

  // Through the optional renormalization, then softmax. The fused reference
  // term is constant and drops out.
  Vector dpre = dfused;
  if (ref && layer.renormalize_fused) {
    double total = 0.0;
    Vector raw = probs;  // pre-renormalization fused values
    {
      GateValues gv;
      gv.mode = layer.routing;
      gv.experts = N;
      gv.values = probs;
      raw = fuse(gv, *ref, layer.fusion, false).values;
    }
    for (int i = 0; i < raw.dim(); ++i) total += raw[i];
    double mix = 0.0;
    for (int i = 0; i < dfused.dim(); ++i) mix += dfused[i] * fused[i];
    for (int i = 0; i < dfused.dim(); ++i) dpre[i] = (dfused[i] - mix) / total;
  }
  Vector dlogits = softmax_backward(probs, dpre);

  add_outer(g.da, 1.0, dlogits, x);
  g.db = dlogits;

  // dx gathers the frozen base, the expert path, and the gate path.
  g.dx = matvec_t(layer.w, upstream);
  Vector vdt = matvec(layer.v_bank, dt);
  axpy(1.0, vdt, g.dx);
  Vector adl = matvec_t(layer.router.a, dlogits);
  axpy(1.0, adl, g.dx);
  return g;
}

inline std::vector<ParamRef> collect_params(Rank1MoeLayer& layer, Rank1MoeGrads& grads,
                                            const std::string& prefix) {
  return {
      {prefix + ".u_bank", layer.u_bank.data(), grads.du.data(), layer.u_bank.size()},
      {prefix + ".v_bank", layer.v_bank.data(), grads.dv.data(), layer.v_bank.size()},
      {prefix + ".router.a", layer.router.a.data(), grads.da.data(), layer.router.a.size()},
      {prefix + ".router.b", layer.router.b.data(), grads.db.data(), layer.router.b.dim()},
  };
}

namespace detail {

inline void write_block(std::ostream& out, const std::string& label, const double* data, int rows,
                        int cols) {
  out << label << "\n";
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) out << (j ? " " : "") << format_double(data[i * cols + j]);
    out << "\n";
  }
}

inline void read_block(std::istream& in, const std::string& label, double* data, int rows, int cols,
                       const std::string& path) {
  std::string got;
  if (!(in >> got) || got != label)
    throw std::runtime_error("load_layer: " + path + ": expected section '" + label + "', got '" +
                             got + "'");
  for (int i = 0; i < rows * cols; ++i) {
    std::string tok;
    if (!(in >> tok))
      throw std::runtime_error("load_layer: " + path + ": section '" + label + "' truncated at entry " +
                               std::to_string(i));
    data[i] = parse_double(tok, "load_layer section " + label);
  }
}

}  // namespace detail

inline void save_layer(const Rank1MoeLayer& layer, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_layer: cannot open " + path);
  out << layer.m() << " " << layer.n() << " " << layer.experts() << " " << to_string(layer.fusion)
      << " " << to_string(layer.routing) << "\n";
  detail::write_block(out, "W", layer.w.data(), layer.m(), layer.n());
  detail::write_block(out, "U", layer.u_bank.data(), layer.m(), layer.experts());
  detail::write_block(out, "V", layer.v_bank.data(), layer.n(), layer.experts());
  bool full = layer.routing == RoutingMode::Full;
  detail::write_block(out, full ? "A_full" : "A", layer.router.a.data(), layer.router.a.rows(),
                      layer.router.a.cols());
  detail::write_block(out, full ? "b_full" : "b", layer.router.b.data(), 1, layer.router.b.dim());
  if (!out) throw std::runtime_error("save_layer: write failed for " + path);
}

inline Rank1MoeLayer load_layer(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_layer: cannot open " + path);
  int m = 0, n = 0, experts = 0;
  std::string fusion, routing;
  if (!(in >> m >> n >> experts >> fusion >> routing))
    throw std::runtime_error("load_layer: " + path + ": malformed header (expected 'm n N fusion routing')");
  if (m < 1 || n < 1 || experts < 1)
    throw std::runtime_error("load_layer: " + path + ": invalid dims in header");
  Rank1MoeLayer layer;
  layer.fusion = parse_fusion_mode(fusion);
  layer.routing = parse_routing_mode(routing);
  layer.w = Matrix(m, n);
  layer.u_bank = Matrix(m, experts);
  layer.v_bank = Matrix(n, experts);
  layer.router.experts = experts;
  layer.router.mode = layer.routing;
  int rows = layer.routing == RoutingMode::Diagonal ? experts : experts * experts;
  layer.router.a = Matrix(rows, n);
  layer.router.b = Vector(rows);
  detail::read_block(in, "W", layer.w.data(), m, n, path);
  detail::read_block(in, "U", layer.u_bank.data(), m, experts, path);
  detail::read_block(in, "V", layer.v_bank.data(), n, experts, path);
  bool full = layer.routing == RoutingMode::Full;
  detail::read_block(in, full ? "A_full" : "A", layer.router.a.data(), rows, n, path);
  detail::read_block(in, full ? "b_full" : "b", layer.router.b.data(), 1, rows, path);
  return layer;
}

}  // namespace mor1e
