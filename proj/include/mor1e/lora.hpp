#pragma once

#include <optional>
#include <string>
#include <vector>

#include "numeric.hpp"
#include "rank1_moe.hpp"

namespace mor1e {

// Plain low-rank adapter: z = Wx + (alpha/r) A_up (B_down x), W frozen.
struct LoraLayer {
  Matrix w;       // m x n, frozen
  Matrix b_down;  // r x n
  Matrix a_up;    // m x r
  int rank = 1;
  double alpha = 1.0;

  int m() const { return w.rows(); }
  int n() const { return w.cols(); }
  double scaling() const { return alpha / static_cast<double>(rank); }
};

// a_up starts at zero: the adapter is an exact no-op at step 0.
inline LoraLayer make_lora_layer(Matrix w, int rank, Rng& rng, double alpha = -1.0) {
  require(rank >= 1, "make_lora_layer: rank must be >= 1, got " + std::to_string(rank));
  LoraLayer layer;
  layer.rank = rank;
  layer.alpha = alpha < 0.0 ? static_cast<double>(rank) : alpha;
  int m = w.rows(), n = w.cols();
  layer.w = std::move(w);
  layer.b_down = Matrix(rank, n);
  layer.a_up = Matrix(m, rank);
  double bound = 1.0 / std::sqrt(static_cast<double>(n));
  for (int i = 0; i < rank; ++i)
    for (int j = 0; j < n; ++j) layer.b_down(i, j) = rng.uniform(-bound, bound);
  return layer;
}

inline Vector lora_forward(const LoraLayer& layer, const Vector& x) {
  require(x.dim() == layer.n(), "lora_forward: input dim " + std::to_string(x.dim()) +
                                    " does not match layer n=" + std::to_string(layer.n()));
  Vector z = matvec(layer.w, x);
  Vector h = matvec(layer.b_down, x);
  Vector up = matvec(layer.a_up, h);
  axpy(layer.scaling(), up, z);
  return z;
}

struct LoraGrads {
  Matrix da_up;
  Matrix db_down;
  Vector dx;

  void add(const LoraGrads& o) {
    for (int i = 0; i < da_up.size(); ++i) da_up.data()[i] += o.da_up.data()[i];
    for (int i = 0; i < db_down.size(); ++i) db_down.data()[i] += o.db_down.data()[i];
  }
};

inline LoraGrads zero_lora_grads(const LoraLayer& layer) {
  LoraGrads g;
  g.da_up = Matrix(layer.m(), layer.rank);
  g.db_down = Matrix(layer.rank, layer.n());
  g.dx = Vector(layer.n());
  return g;
}

inline LoraGrads lora_backward(const LoraLayer& layer, const Vector& x, const Vector& upstream) {
  require(x.dim() == layer.n(), "lora_backward: input dim mismatch");
  require(upstream.dim() == layer.m(), "lora_backward: upstream dim mismatch");
  LoraGrads g = zero_lora_grads(layer);
  double c = layer.scaling();
  Vector h = matvec(layer.b_down, x);
  add_outer(g.da_up, c, upstream, h);
  Vector dh = scale(matvec_t(layer.a_up, upstream), c);
  add_outer(g.db_down, 1.0, dh, x);
  g.dx = matvec_t(layer.w, upstream);
  Vector bdh = matvec_t(layer.b_down, dh);
  axpy(1.0, bdh, g.dx);
  return g;
}

inline std::vector<ParamRef> collect_params(LoraLayer& layer, LoraGrads& grads,
                                            const std::string& prefix) {
  return {
      {prefix + ".a_up", layer.a_up.data(), grads.da_up.data(), layer.a_up.size()},
      {prefix + ".b_down", layer.b_down.data(), grads.db_down.data(), layer.b_down.size()},
  };
}

struct LoraExpert {
  Matrix b_down;  // r x n
  Matrix a_up;    // m x r
};

// Mixture of rank-r LoRA experts under a softmax router, optionally top-k masked.
struct MoLoraLayer {
  Matrix w;  // frozen
  std::vector<LoraExpert> experts;
  Router router;
  std::optional<int> top_k;
  int rank = 1;
  double alpha = 1.0;

  int m() const { return w.rows(); }
  int n() const { return w.cols(); }
  int expert_count() const { return static_cast<int>(experts.size()); }
  double scaling() const { return alpha / static_cast<double>(rank); }
};

inline MoLoraLayer make_molora_layer(Matrix w, int experts, int rank, Rng& rng,
                                     std::optional<int> top_k = std::nullopt, double alpha = -1.0) {
  require(experts >= 1, "make_molora_layer: experts must be >= 1");
  require(rank >= 1, "make_molora_layer: rank must be >= 1");
  if (top_k) require(*top_k >= 1 && *top_k <= experts, "make_molora_layer: top_k out of range");
  MoLoraLayer layer;
  layer.rank = rank;
  layer.alpha = alpha < 0.0 ? static_cast<double>(rank) : alpha;
  layer.top_k = top_k;
  int m = w.rows(), n = w.cols();
  layer.w = std::move(w);
  double bound = 1.0 / std::sqrt(static_cast<double>(n));
  for (int e = 0; e < experts; ++e) {
    LoraExpert ex;
    ex.b_down = Matrix(rank, n);
    ex.a_up = Matrix(m, rank);
    for (int i = 0; i < rank; ++i)
      for (int j = 0; j < n; ++j) ex.b_down(i, j) = rng.uniform(-bound, bound);
    layer.experts.push_back(std::move(ex));
  }
  layer.router = make_router(experts, n, RoutingMode::Diagonal, rng);
  return layer;
}

inline GateValues molora_gate(const MoLoraLayer& layer, const Vector& x) {
  GateValues g = gate(layer.router, x);
  if (layer.top_k) g = topk_mask(g, *layer.top_k);
  return g;
}

inline Vector molora_forward(const MoLoraLayer& layer, const Vector& x) {
  require(x.dim() == layer.n(), "molora_forward: input dim " + std::to_string(x.dim()) +
                                    " does not match layer n=" + std::to_string(layer.n()));
  GateValues g = molora_gate(layer, x);
  Vector z = matvec(layer.w, x);
  double c = layer.scaling();
  for (int e = 0; e < layer.expert_count(); ++e) {
    if (g.values[e] == 0.0) continue;
    const LoraExpert& ex = layer.experts[static_cast<size_t>(e)];
    Vector h = matvec(ex.b_down, x);
    Vector up = matvec(ex.a_up, h);
    axpy(c * g.values[e], up, z);
  }
  return z;
}

struct MoLoraGrads {
  std::vector<LoraGrads> experts;  // dx unused inside
  Matrix da_router;
  Vector db_router;
  Vector dx;

  void add(const MoLoraGrads& o) {
    for (size_t e = 0; e < experts.size(); ++e) experts[e].add(o.experts[e]);
    for (int i = 0; i < da_router.size(); ++i) da_router.data()[i] += o.da_router.data()[i];
    for (int i = 0; i < db_router.dim(); ++i) db_router[i] += o.db_router[i];
  }
};

inline MoLoraGrads zero_molora_grads(const MoLoraLayer& layer) {
  MoLoraGrads g;
  for (int e = 0; e < layer.expert_count(); ++e) {
    LoraGrads lg;
    lg.da_up = Matrix(layer.m(), layer.rank);
    lg.db_down = Matrix(layer.rank, layer.n());
    lg.dx = Vector(layer.n());
    g.experts.push_back(std::move(lg));
  }
  g.da_router = Matrix(layer.router.a.rows(), layer.router.a.cols());
  g.db_router = Vector(layer.router.b.dim());
  g.dx = Vector(layer.n());
  return g;
}

inline MoLoraGrads molora_backward(const MoLoraLayer& layer, const Vector& x,
                                   const Vector& upstream) {
  require(x.dim() == layer.n(), "molora_backward: input dim mismatch");
  require(upstream.dim() == layer.m(), "molora_backward: upstream dim mismatch");
  MoLoraGrads g = zero_molora_grads(layer);
  const int N = layer.expert_count();
  double c = layer.scaling();

  GateValues probs = gate(layer.router, x);
  GateValues masked = layer.top_k ? topk_mask(probs, *layer.top_k) : probs;

  Vector dgamma(N);
  g.dx = matvec_t(layer.w, upstream);
  for (int e = 0; e < N; ++e) {
    const LoraExpert& ex = layer.experts[static_cast<size_t>(e)];
    Vector h = matvec(ex.b_down, x);
    Vector y = scale(matvec(ex.a_up, h), c);
    dgamma[e] = dot(upstream, y);
    if (masked.values[e] == 0.0) continue;
    double gamma = masked.values[e];
    add_outer(g.experts[static_cast<size_t>(e)].da_up, c * gamma, upstream, h);
    Vector dh = scale(matvec_t(ex.a_up, upstream), c * gamma);
    add_outer(g.experts[static_cast<size_t>(e)].db_down, 1.0, dh, x);
    Vector bdh = matvec_t(ex.b_down, dh);
    axpy(1.0, bdh, g.dx);
  }

  // Through the mask renormalization (kept entries only), then the softmax.
  Vector dprobs(N);
  if (layer.top_k) {
    double sigma = 0.0, mix = 0.0;
    for (int e = 0; e < N; ++e)
      if (masked.values[e] != 0.0) {
        sigma += probs.values[e];
        mix += dgamma[e] * masked.values[e];
      }
    for (int e = 0; e < N; ++e)
      dprobs[e] = masked.values[e] != 0.0 ? (dgamma[e] - mix) / sigma : 0.0;
  } else {
    dprobs = dgamma;
  }
  Vector dlogits = softmax_backward(probs.values, dprobs);
  add_outer(g.da_router, 1.0, dlogits, x);
  g.db_router = dlogits;
  Vector adl = matvec_t(layer.router.a, dlogits);
  axpy(1.0, adl, g.dx);
  return g;
}

inline std::vector<ParamRef> collect_params(MoLoraLayer& layer, MoLoraGrads& grads,
                                            const std::string& prefix) {
  std::vector<ParamRef> out;
  for (int e = 0; e < layer.expert_count(); ++e) {
    auto& ex = layer.experts[static_cast<size_t>(e)];
    auto& gx = grads.experts[static_cast<size_t>(e)];
    std::string p = prefix + ".expert" + std::to_string(e);
    out.push_back({p + ".a_up", ex.a_up.data(), gx.da_up.data(), ex.a_up.size()});
    out.push_back({p + ".b_down", ex.b_down.data(), gx.db_down.data(), ex.b_down.size()});
  }
  out.push_back({prefix + ".router.a", layer.router.a.data(), grads.da_router.data(),
                 layer.router.a.size()});
  out.push_back({prefix + ".router.b", layer.router.b.data(), grads.db_router.data(),
                 layer.router.b.dim()});
  return out;
}

}  // namespace mor1e
