#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "costs.hpp"
#include "embedder.hpp"
#include "intuition.hpp"
#include "lora.hpp"
#include "numeric.hpp"
#include "rank1_moe.hpp"

namespace mor1e {

// ---------------------------------------------------------------------------
// Synthetic multitask data
// ---------------------------------------------------------------------------

// K tasks over a shared vocabulary. Each task draws tokens from its own
// hash band with probability `separation` (uniform otherwise) and labels
// instances with its own linear rule over bag-of-token counts.
struct SyntheticTaskSpec {
  int tasks = 4;
  int vocab = 64;
  int seq_len = 12;
  int classes = 3;
  double separation = 0.8;
  double label_noise = 0.0;
  double label_margin = 0.0;  // resample instances whose top-two rule scores are closer than this

  void validate() const {
    require(tasks >= 1, "SyntheticTaskSpec: tasks must be >= 1");
    require(vocab >= 2 * tasks, "SyntheticTaskSpec: vocab must be at least 2x tasks");
    require(seq_len >= 1, "SyntheticTaskSpec: seq_len must be >= 1");
    require(classes >= 2, "SyntheticTaskSpec: classes must be >= 2");
    require(separation > 0.0 && separation <= 1.0,
            "SyntheticTaskSpec: separation must be in (0, 1], zero separation is degenerate");
    require(label_noise >= 0.0 && label_noise <= 1.0, "SyntheticTaskSpec: label_noise in [0,1]");
    require(label_margin >= 0.0, "SyntheticTaskSpec: label_margin must be non-negative");
  }
};

struct Instance {
  int task_id = 0;
  std::vector<int> tokens;
  int label = 0;
};

inline std::string token_text(int id) { return "w" + std::to_string(id); }

inline std::string text_of(const Instance& inst) {
  std::string s;
  for (size_t i = 0; i < inst.tokens.size(); ++i) {
    if (i) s += ' ';
    s += token_text(inst.tokens[i]);
  }
  return s;
}

struct Dataset {
  SyntheticTaskSpec spec;
  uint64_t seed = 0;
  std::vector<Instance> instances;
  std::vector<Matrix> rules;  // per task: classes x vocab labeling weights
};

namespace detail {

inline std::vector<std::vector<int>> band_pools(const SyntheticTaskSpec& spec) {
  std::vector<std::vector<int>> pools(static_cast<size_t>(spec.tasks));
  for (int id = 0; id < spec.vocab; ++id)
    pools[static_cast<size_t>(token_band(token_text(id), spec.tasks))].push_back(id);
  for (int k = 0; k < spec.tasks; ++k)
    require(!pools[static_cast<size_t>(k)].empty(),
            "generate_multitask_data: vocab of " + std::to_string(spec.vocab) +
                " leaves task band " + std::to_string(k) + " empty; increase vocab");
  return pools;
}

inline std::vector<Matrix> task_rules(const SyntheticTaskSpec& spec, uint64_t seed) {
  std::vector<Matrix> rules;
  for (int k = 0; k < spec.tasks; ++k) {
    Rng rng(derive_seed(seed, "task-rule-" + std::to_string(k)));
    Matrix w(spec.classes, spec.vocab);
    for (int c = 0; c < spec.classes; ++c)
      for (int t = 0; t < spec.vocab; ++t) w(c, t) = rng.normal();
    rules.push_back(std::move(w));
  }
  return rules;
}

inline int rule_label(const Matrix& rule, const std::vector<int>& tokens, double* margin = nullptr) {
  int best = 0;
  double best_score = -1e300, second = -1e300;
  for (int c = 0; c < rule.rows(); ++c) {
    double s = 0.0;
    for (int t : tokens) s += rule(c, t);
    if (s > best_score) {
      second = best_score;
      best_score = s;
      best = c;
    } else if (s > second) {
      second = s;
    }
  }
  if (margin) *margin = best_score - second;
  return best;
}

}  // namespace detail

// Instances alternate round-robin across tasks; labels follow the planted
// per-task rule with optional flip noise.
inline Dataset generate_multitask_data(const SyntheticTaskSpec& spec, int count, uint64_t seed) {
  spec.validate();
  require(count >= spec.tasks, "generate_multitask_data: count must be >= tasks");
  Dataset ds;
  ds.spec = spec;
  ds.seed = seed;
  ds.rules = detail::task_rules(spec, seed);
  auto pools = detail::band_pools(spec);
  Rng rng(derive_seed(seed, "tokens"));
  Rng noise_rng(derive_seed(seed, "label-noise"));
  for (int i = 0; i < count; ++i) {
    Instance inst;
    inst.task_id = i % spec.tasks;
    const auto& pool = pools[static_cast<size_t>(inst.task_id)];
    // Redraw thin-margin instances (bounded attempts) so the planted rule
    // separates the data with room to spare.
    std::vector<int> best_tokens;
    double best_margin = -1.0;
    int best_label = 0;
    for (int attempt = 0; attempt < 64; ++attempt) {
      std::vector<int> tokens;
      tokens.reserve(static_cast<size_t>(spec.seq_len));
      for (int t = 0; t < spec.seq_len; ++t) {
        if (rng.uniform() < spec.separation)
          tokens.push_back(pool[static_cast<size_t>(rng.below(static_cast<int>(pool.size())))]);
        else
          tokens.push_back(rng.below(spec.vocab));
      }
      double margin = 0.0;
      int label = detail::rule_label(ds.rules[static_cast<size_t>(inst.task_id)], tokens, &margin);
      if (margin > best_margin) {
        best_margin = margin;
        best_tokens = std::move(tokens);
        best_label = label;
      }
      if (best_margin >= spec.label_margin) break;
    }
    inst.tokens = std::move(best_tokens);
    inst.label = best_label;
    if (spec.label_noise > 0.0 && noise_rng.uniform() < spec.label_noise)
      inst.label = noise_rng.below(spec.classes);
    ds.instances.push_back(std::move(inst));
  }
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_dataset: cannot open " + path);
  out << "tasks=" << ds.spec.tasks << " vocab=" << ds.spec.vocab << " seq=" << ds.spec.seq_len
      << " classes=" << ds.spec.classes << " separation=" << detail::format_double(ds.spec.separation)
      << " noise=" << detail::format_double(ds.spec.label_noise)
      << " margin=" << detail::format_double(ds.spec.label_margin) << " seed=" << ds.seed
      << " count=" << ds.instances.size() << "\n";
  for (const auto& inst : ds.instances) {
    out << inst.task_id << " " << inst.label;
    for (int t : inst.tokens) out << " " << t;
    out << "\n";
  }
  if (!out) throw std::runtime_error("save_dataset: write failed for " + path);
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_dataset: cannot open " + path);
  std::string header;
  if (!std::getline(in, header)) throw std::runtime_error("load_dataset: " + path + ": missing header");
  Dataset ds;
  size_t count = 0;
  {
    std::istringstream hs(header);
    std::string kv;
    while (hs >> kv) {
      auto eq = kv.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error("load_dataset: " + path + ": malformed header field '" + kv + "'");
      std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
      if (key == "tasks") ds.spec.tasks = std::stoi(val);
      else if (key == "vocab") ds.spec.vocab = std::stoi(val);
      else if (key == "seq") ds.spec.seq_len = std::stoi(val);
      else if (key == "classes") ds.spec.classes = std::stoi(val);
      else if (key == "separation") ds.spec.separation = detail::parse_double(val, "load_dataset header");
      else if (key == "noise") ds.spec.label_noise = detail::parse_double(val, "load_dataset header");
      else if (key == "margin") ds.spec.label_margin = detail::parse_double(val, "load_dataset header");
      else if (key == "seed") ds.seed = std::stoull(val);
      else if (key == "count") count = std::stoull(val);
      else throw std::runtime_error("load_dataset: " + path + ": unknown header field '" + key + "'");
    }
  }
  ds.spec.validate();
  std::string line;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    Instance inst;
    if (!(ls >> inst.task_id >> inst.label))
      throw std::runtime_error("load_dataset: " + path + " line " + std::to_string(lineno) +
                               ": expected 'task label tokens...'");
    int tok;
    while (ls >> tok) {
      require(tok >= 0 && tok < ds.spec.vocab, "load_dataset: token id out of range at line " +
                                                   std::to_string(lineno));
      inst.tokens.push_back(tok);
    }
    require(!inst.tokens.empty(), "load_dataset: empty token list at line " + std::to_string(lineno));
    ds.instances.push_back(std::move(inst));
  }
  if (ds.instances.size() != count)
    throw std::runtime_error("load_dataset: " + path + ": header says count=" + std::to_string(count) +
                             " but file has " + std::to_string(ds.instances.size()) + " records");
  ds.rules = detail::task_rules(ds.spec, ds.seed);
  return ds;
}

// ---------------------------------------------------------------------------
// Host model
// ---------------------------------------------------------------------------

struct ToyModelConfig {
  int vocab = 64;
  int embed_dim = 16;
  int ffn_dim = 32;
  int seq_len = 12;
  int num_classes = 3;
  double base_scale = 1.0;  // multiplier on the frozen 1/sqrt(fan_in) init
  std::optional<AdapterSchemeSpec> adapter;  // nullopt = frozen base + head only
  std::optional<int> top_k;                  // molora only
  uint64_t seed = 1;

  void validate() const {
    require(vocab >= 2 && embed_dim >= 2 && ffn_dim >= 1 && seq_len >= 1 && num_classes >= 2,
            "ToyModelConfig: non-positive dims");
    if (adapter && adapter->kind != SchemeKind::MoLora)
      require(!top_k, "ToyModelConfig: top_k applies to molora only");
  }
};

// One frozen linear site, optionally wrapped by an adapter scheme.
struct AdapterSite {
  std::string name;
  std::optional<Rank1MoeLayer> mor1e;
  std::optional<LoraLayer> lora;
  std::optional<MoLoraLayer> molora;
  std::optional<Matrix> plain;  // frozen base only

  Rank1MoeGrads mor1e_g;
  LoraGrads lora_g;
  MoLoraGrads molora_g;

  const Matrix& base() const {
    if (mor1e) return mor1e->w;
    if (lora) return lora->w;
    if (molora) return molora->w;
    return *plain;
  }

  Vector forward(const Vector& x, const IntuitionVector* intuition) const {
    if (mor1e) return mor1e::forward(*mor1e, x, intuition);
    if (lora) return lora_forward(*lora, x);
    if (molora) return molora_forward(*molora, x);
    return matvec(*plain, x);
  }

  // Accumulates parameter gradients, returns dL/dx.
  Vector backward(const Vector& x, const IntuitionVector* intuition, const Vector& upstream) {
    if (mor1e) {
      Rank1MoeGrads g = mor1e::backward(*mor1e, x, intuition, upstream);
      mor1e_g.add(g);
      return g.dx;
    }
    if (lora) {
      LoraGrads g = lora_backward(*lora, x, upstream);
      lora_g.add(g);
      return g.dx;
    }
    if (molora) {
      MoLoraGrads g = molora_backward(*molora, x, upstream);
      molora_g.add(g);
      return g.dx;
    }
    return matvec_t(*plain, upstream);
  }

  // Zeroes in place: ParamRef grad pointers handed out earlier stay valid.
  void zero_grads() {
    if (mor1e) {
      if (mor1e_g.du.size() == 0) {
        mor1e_g = zero_rank1_grads(*mor1e);
      } else {
        std::fill(mor1e_g.du.data(), mor1e_g.du.data() + mor1e_g.du.size(), 0.0);
        std::fill(mor1e_g.dv.data(), mor1e_g.dv.data() + mor1e_g.dv.size(), 0.0);
        std::fill(mor1e_g.da.data(), mor1e_g.da.data() + mor1e_g.da.size(), 0.0);
        for (int i = 0; i < mor1e_g.db.dim(); ++i) mor1e_g.db[i] = 0.0;
      }
    }
    if (lora) {
      if (lora_g.da_up.size() == 0) {
        lora_g = zero_lora_grads(*lora);
      } else {
        std::fill(lora_g.da_up.data(), lora_g.da_up.data() + lora_g.da_up.size(), 0.0);
        std::fill(lora_g.db_down.data(), lora_g.db_down.data() + lora_g.db_down.size(), 0.0);
      }
    }
    if (molora) {
      if (molora_g.experts.empty()) {
        molora_g = zero_molora_grads(*molora);
      } else {
        for (auto& eg : molora_g.experts) {
          std::fill(eg.da_up.data(), eg.da_up.data() + eg.da_up.size(), 0.0);
          std::fill(eg.db_down.data(), eg.db_down.data() + eg.db_down.size(), 0.0);
        }
        std::fill(molora_g.da_router.data(), molora_g.da_router.data() + molora_g.da_router.size(),
                  0.0);
        for (int i = 0; i < molora_g.db_router.dim(); ++i) molora_g.db_router[i] = 0.0;
      }
    }
  }

  void collect(std::vector<ParamRef>& out) {
    if (mor1e) for (auto& p : collect_params(*mor1e, mor1e_g, name)) out.push_back(p);
    if (lora) for (auto& p : collect_params(*lora, lora_g, name)) out.push_back(p);
    if (molora) for (auto& p : collect_params(*molora, molora_g, name)) out.push_back(p);
  }

  bool routed() const { return mor1e.has_value() || molora.has_value(); }

  // Entropy of the pre-fusion gate distribution; Full mode reports the
  // marginal over the u-experts so the value stays within [0, ln N].
  double gate_entropy(const Vector& x) const {
    const Router* r = nullptr;
    if (mor1e) r = &mor1e->router;
    if (molora) r = &molora->router;
    if (!r) return 0.0;
    GateValues g = gate(*r, x);
    int n = g.experts;
    Vector p(n);
    if (g.mode == RoutingMode::Diagonal) {
      p = g.values;
    } else {
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) p[i] += g.at(i, j);
    }
    double h = 0.0;
    for (int i = 0; i < n; ++i)
      if (p[i] > 0.0) h -= p[i] * std::log(p[i]);
    return h;
  }
};

struct ToyBatch {
  std::vector<const Instance*> items;
  std::vector<const IntuitionVector*> intuition;  // entries may be null when unused

  int size() const { return static_cast<int>(items.size()); }
};

class ToyModel {
 public:
  explicit ToyModel(const ToyModelConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const int n = cfg.embed_dim;
    Rng erng(derive_seed(cfg.seed, "embed"));
    embed_ = Matrix(cfg.vocab, n);
    if (cfg.vocab <= n) {
      // Orthonormal rows scaled to unit per-coordinate variance: bag-of-token
      // statistics stay perfectly conditioned through the mean-pooled stream.
      std::vector<Vector> rows;
      while (static_cast<int>(rows.size()) < cfg.vocab) {
        Vector v = gaussian_vector(erng, n);
        for (const Vector& r : rows) axpy(-dot(v, r), r, v);
        double nn = norm(v);
        if (nn < 1e-8) continue;
        rows.push_back(scale(v, 1.0 / nn));
      }
      double s = std::sqrt(static_cast<double>(n));
      for (int i = 0; i < cfg.vocab; ++i)
        for (int j = 0; j < n; ++j) embed_(i, j) = s * rows[static_cast<size_t>(i)][j];
    } else {
      for (int i = 0; i < cfg.vocab; ++i)
        for (int j = 0; j < n; ++j) embed_(i, j) = erng.normal();
    }
    init_site(site_q_, "q", n, n);
    init_site(site_k_, "k", n, n);
    init_site(site_v_, "v", n, n);
    init_site(site_up_, "ffn_up", cfg.ffn_dim, n);
    init_site(site_down_, "ffn_down", n, cfg.ffn_dim);
    Rng hrng(derive_seed(cfg.seed, "head"));
    wc_ = Matrix(cfg.num_classes, n);
    double hb = 1.0 / std::sqrt(static_cast<double>(n));
    for (int i = 0; i < cfg.num_classes; ++i)
      for (int j = 0; j < n; ++j) wc_(i, j) = hb * hrng.normal();
    bc_ = Vector(cfg.num_classes);
    zero_grads();
  }

  const ToyModelConfig& config() const { return cfg_; }
  Matrix& head_weight() { return wc_; }
  Vector& head_bias() { return bc_; }
  const Matrix& embedding() const { return embed_; }
  std::vector<AdapterSite*> sites() { return {&site_q_, &site_k_, &site_v_, &site_up_, &site_down_}; }
  std::vector<const AdapterSite*> sites() const {
    return {&site_q_, &site_k_, &site_v_, &site_up_, &site_down_};
  }

  void zero_grads() {
    for (AdapterSite* s : sites()) s->zero_grads();
    if (wc_g_.size() == 0) {
      wc_g_ = Matrix(wc_.rows(), wc_.cols());
      bc_g_ = Vector(bc_.dim());
    } else {
      std::fill(wc_g_.data(), wc_g_.data() + wc_g_.size(), 0.0);
      for (int i = 0; i < bc_g_.dim(); ++i) bc_g_[i] = 0.0;
    }
  }

  std::vector<ParamRef> collect_trainables() {
    std::vector<ParamRef> out;
    for (AdapterSite* s : sites()) s->collect(out);
    out.push_back({"head.w", wc_.data(), wc_g_.data(), wc_.size()});
    out.push_back({"head.b", bc_.data(), bc_g_.data(), bc_.dim()});
    return out;
  }

  Vector forward_logits(const Instance& inst, const IntuitionVector* intuition) const {
    Trace tr;
    run_forward(inst, intuition, tr);
    return tr.logits;
  }

  // Cross-entropy over the batch; gradients accumulate into the model's
  // buffers (call zero_grads first). The frozen base never receives any.
  double batch_backward(const ToyBatch& batch) {
    require(batch.size() >= 1, "batch_backward: empty batch");
    double loss = 0.0;
    const double inv_b = 1.0 / batch.size();
    for (int b = 0; b < batch.size(); ++b) {
      const Instance& inst = *batch.items[static_cast<size_t>(b)];
      Trace tr;
      run_forward(inst, batch.intuition[static_cast<size_t>(b)], tr);
      Vector p = softmax(tr.logits);
      double pl = std::max(p[inst.label], 1e-300);
      loss -= std::log(pl) * inv_b;
      Vector dlogits = p;
      dlogits[inst.label] -= 1.0;
      for (int c = 0; c < dlogits.dim(); ++c) dlogits[c] *= inv_b;
      run_backward(inst, batch.intuition[static_cast<size_t>(b)], tr, dlogits);
    }
    return loss;
  }

  std::vector<Vector> batch_forward(const ToyBatch& batch) const {
    std::vector<Vector> out;
    out.reserve(static_cast<size_t>(batch.size()));
    for (int b = 0; b < batch.size(); ++b)
      out.push_back(forward_logits(*batch.items[static_cast<size_t>(b)],
                                   batch.intuition[static_cast<size_t>(b)]));
    return out;
  }

  // Per-token fused routing values at a named site, averaged over the
  // instance's tokens. Diagonal routing only; used to inspect expert/task
  // alignment.
  Vector mean_fused_gate(const Instance& inst, const IntuitionVector* intuition,
                         const std::string& site_name) const {
    const AdapterSite* site = nullptr;
    for (const AdapterSite* s : sites())
      if (s->name == site_name) site = s;
    require(site != nullptr, "mean_fused_gate: unknown site '" + site_name + "'");
    require(site->mor1e.has_value(), "mean_fused_gate: site '" + site_name + "' is not a rank-1 moe");
    require(site->mor1e->routing == RoutingMode::Diagonal, "mean_fused_gate: Diagonal mode only");
    Trace tr;
    run_forward(inst, intuition, tr);
    const int L = static_cast<int>(inst.tokens.size());
    Vector acc(site->mor1e->experts());
    for (int t = 0; t < L; ++t) {
      const Vector& in = (site == &site_up_)   ? tr.a2[static_cast<size_t>(t)]
                         : (site == &site_down_) ? tr.r[static_cast<size_t>(t)]
                                                 : tr.a1[static_cast<size_t>(t)];
      GateValues g = layer_gate(*site->mor1e, in, intuition);
      axpy(1.0 / L, g.values, acc);
    }
    return acc;
  }

  // Mean pre-fusion gate entropy per routed site over all tokens of the batch.
  std::map<std::string, double> routing_entropy(const ToyBatch& batch) const {
    std::map<std::string, double> sums;
    long long tokens = 0;
    for (int b = 0; b < batch.size(); ++b) {
      const Instance& inst = *batch.items[static_cast<size_t>(b)];
      Trace tr;
      run_forward(inst, batch.intuition[static_cast<size_t>(b)], tr);
      const int L = static_cast<int>(inst.tokens.size());
      tokens += L;
      for (const AdapterSite* s : sites()) {
        if (!s->routed()) continue;
        for (int t = 0; t < L; ++t) {
          const Vector& in = (s == &site_up_)   ? tr.a2[static_cast<size_t>(t)]
                             : (s == &site_down_) ? tr.r[static_cast<size_t>(t)]
                                                  : tr.a1[static_cast<size_t>(t)];
          sums[s->name] += s->gate_entropy(in);
        }
      }
    }
    for (auto& [k, v] : sums) v /= static_cast<double>(tokens);
    return sums;
  }

 private:
  struct Trace {
    std::vector<Vector> x, a1, q, k, v, prow, attn, h2, a2, u1, r, f, h3;
    std::vector<double> sigma1, sigma2;
    Vector pooled, logits;
  };

  void init_site(AdapterSite& site, const std::string& name, int m, int n) {
    site.name = name;
    Rng wrng(derive_seed(cfg_.seed, "base-" + name));
    Matrix w(m, n);
    double s = cfg_.base_scale / std::sqrt(static_cast<double>(n));
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) w(i, j) = s * wrng.normal();
    if (!cfg_.adapter) {
      site.plain = std::move(w);
      return;
    }
    Rng arng(derive_seed(cfg_.seed, "adapter-" + name));
    switch (cfg_.adapter->kind) {
      case SchemeKind::Mor1e:
        site.mor1e = make_rank1_layer(std::move(w), cfg_.adapter->experts, cfg_.adapter->fusion,
                                      cfg_.adapter->routing, arng);
        break;
      case SchemeKind::Lora:
        site.lora = make_lora_layer(std::move(w), cfg_.adapter->rank, arng);
        break;
      case SchemeKind::MoLora:
        site.molora = make_molora_layer(std::move(w), cfg_.adapter->experts, cfg_.adapter->rank,
                                        arng, cfg_.top_k);
        break;
    }
  }

  static Vector layernorm(const Vector& x, double& sigma_out) {
    const int n = x.dim();
    double mu = 0.0;
    for (int i = 0; i < n; ++i) mu += x[i];
    mu /= n;
    double var = 0.0;
    for (int i = 0; i < n; ++i) var += (x[i] - mu) * (x[i] - mu);
    var /= n;
    double sigma = std::sqrt(var + 1e-5);
    sigma_out = sigma;
    Vector y(n);
    for (int i = 0; i < n; ++i) y[i] = (x[i] - mu) / sigma;
    return y;
  }

  static Vector layernorm_backward(const Vector& y, double sigma, const Vector& dy) {
    const int n = y.dim();
    double mean_dy = 0.0, mean_dyy = 0.0;
    for (int i = 0; i < n; ++i) {
      mean_dy += dy[i];
      mean_dyy += dy[i] * y[i];
    }
    mean_dy /= n;
    mean_dyy /= n;
    Vector dx(n);
    for (int i = 0; i < n; ++i) dx[i] = (dy[i] - mean_dy - y[i] * mean_dyy) / sigma;
    return dx;
  }

  void run_forward(const Instance& inst, const IntuitionVector* intuition, Trace& tr) const {
    const int L = static_cast<int>(inst.tokens.size());
    require(L >= 1, "toy model: empty token sequence");
    if (cfg_.adapter && cfg_.adapter->fusion != FusionMode::None)
      require(intuition != nullptr, "toy model: fusion mode " + to_string(cfg_.adapter->fusion) +
                                        " requires per-instance intuition");
    const int n = cfg_.embed_dim;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(n));

    tr.x.resize(static_cast<size_t>(L));
    tr.a1.resize(static_cast<size_t>(L));
    tr.sigma1.resize(static_cast<size_t>(L));
    tr.q.resize(static_cast<size_t>(L));
    tr.k.resize(static_cast<size_t>(L));
    tr.v.resize(static_cast<size_t>(L));
    for (int t = 0; t < L; ++t) {
      int tok = inst.tokens[static_cast<size_t>(t)];
      require(tok >= 0 && tok < cfg_.vocab,
              "toy model: token id " + std::to_string(tok) + " out of vocab " + std::to_string(cfg_.vocab));
      Vector x(n);
      for (int j = 0; j < n; ++j) x[j] = embed_(tok, j);
      tr.x[static_cast<size_t>(t)] = std::move(x);
      tr.a1[static_cast<size_t>(t)] =
          layernorm(tr.x[static_cast<size_t>(t)], tr.sigma1[static_cast<size_t>(t)]);
      tr.q[static_cast<size_t>(t)] = site_q_.forward(tr.a1[static_cast<size_t>(t)], intuition);
      tr.k[static_cast<size_t>(t)] = site_k_.forward(tr.a1[static_cast<size_t>(t)], intuition);
      tr.v[static_cast<size_t>(t)] = site_v_.forward(tr.a1[static_cast<size_t>(t)], intuition);
    }

    tr.prow.resize(static_cast<size_t>(L));
    tr.attn.resize(static_cast<size_t>(L));
    tr.h2.resize(static_cast<size_t>(L));
    for (int t = 0; t < L; ++t) {
      Vector scores(L);
      for (int s = 0; s < L; ++s)
        scores[s] = dot(tr.q[static_cast<size_t>(t)], tr.k[static_cast<size_t>(s)]) * inv_sqrt;
      tr.prow[static_cast<size_t>(t)] = softmax(scores);
      Vector o(n);
      for (int s = 0; s < L; ++s)
        axpy(tr.prow[static_cast<size_t>(t)][s], tr.v[static_cast<size_t>(s)], o);
      tr.attn[static_cast<size_t>(t)] = std::move(o);
      tr.h2[static_cast<size_t>(t)] =
          add(tr.x[static_cast<size_t>(t)], tr.attn[static_cast<size_t>(t)]);
    }

    tr.a2.resize(static_cast<size_t>(L));
    tr.sigma2.resize(static_cast<size_t>(L));
    tr.u1.resize(static_cast<size_t>(L));
    tr.r.resize(static_cast<size_t>(L));
    tr.f.resize(static_cast<size_t>(L));
    tr.h3.resize(static_cast<size_t>(L));
    for (int t = 0; t < L; ++t) {
      tr.a2[static_cast<size_t>(t)] =
          layernorm(tr.h2[static_cast<size_t>(t)], tr.sigma2[static_cast<size_t>(t)]);
      tr.u1[static_cast<size_t>(t)] = site_up_.forward(tr.a2[static_cast<size_t>(t)], intuition);
      Vector r = tr.u1[static_cast<size_t>(t)];
      for (int i = 0; i < r.dim(); ++i) r[i] = std::max(0.0, r[i]);
      tr.r[static_cast<size_t>(t)] = std::move(r);
      tr.f[static_cast<size_t>(t)] = site_down_.forward(tr.r[static_cast<size_t>(t)], intuition);
      tr.h3[static_cast<size_t>(t)] =
          add(tr.h2[static_cast<size_t>(t)], tr.f[static_cast<size_t>(t)]);
    }

    tr.pooled = Vector(n);
    for (int t = 0; t < L; ++t) axpy(1.0 / L, tr.h3[static_cast<size_t>(t)], tr.pooled);
    tr.logits = matvec(wc_, tr.pooled);
    for (int c = 0; c < bc_.dim(); ++c) tr.logits[c] += bc_[c];
  }

  void run_backward(const Instance& inst, const IntuitionVector* intuition, const Trace& tr,
                    const Vector& dlogits) {
    const int L = static_cast<int>(inst.tokens.size());
    const int n = cfg_.embed_dim;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(n));

    add_outer(wc_g_, 1.0, dlogits, tr.pooled);
    for (int c = 0; c < bc_.dim(); ++c) bc_g_[c] += dlogits[c];
    Vector dpooled = matvec_t(wc_, dlogits);

    std::vector<Vector> dh2(static_cast<size_t>(L), Vector(n));
    std::vector<Vector> dq(static_cast<size_t>(L), Vector(n));
    std::vector<Vector> dk(static_cast<size_t>(L), Vector(n));
    std::vector<Vector> dv(static_cast<size_t>(L), Vector(n));

    // FFN block, per token.
    for (int t = 0; t < L; ++t) {
      Vector dh3 = scale(dpooled, 1.0 / L);
      Vector dr = site_down_.backward(tr.r[static_cast<size_t>(t)], intuition, dh3);
      Vector du1(dr.dim());
      for (int i = 0; i < dr.dim(); ++i)
        du1[i] = tr.u1[static_cast<size_t>(t)][i] > 0.0 ? dr[i] : 0.0;
      Vector da2 = site_up_.backward(tr.a2[static_cast<size_t>(t)], intuition, du1);
      dh2[static_cast<size_t>(t)] = add(
          dh3, layernorm_backward(tr.a2[static_cast<size_t>(t)], tr.sigma2[static_cast<size_t>(t)], da2));
    }

    // Attention block.
    for (int t = 0; t < L; ++t) {
      const Vector& do_t = dh2[static_cast<size_t>(t)];
      Vector dp(L);
      for (int s = 0; s < L; ++s) dp[s] = dot(do_t, tr.v[static_cast<size_t>(s)]);
      for (int s = 0; s < L; ++s)
        axpy(tr.prow[static_cast<size_t>(t)][s], do_t, dv[static_cast<size_t>(s)]);
      Vector ds = softmax_backward(tr.prow[static_cast<size_t>(t)], dp);
      for (int s = 0; s < L; ++s) {
        axpy(ds[s] * inv_sqrt, tr.k[static_cast<size_t>(s)], dq[static_cast<size_t>(t)]);
        axpy(ds[s] * inv_sqrt, tr.q[static_cast<size_t>(t)], dk[static_cast<size_t>(s)]);
      }
    }

    for (int t = 0; t < L; ++t) {
      Vector da1 = site_q_.backward(tr.a1[static_cast<size_t>(t)], intuition, dq[static_cast<size_t>(t)]);
      axpy(1.0, site_k_.backward(tr.a1[static_cast<size_t>(t)], intuition, dk[static_cast<size_t>(t)]),
           da1);
      axpy(1.0, site_v_.backward(tr.a1[static_cast<size_t>(t)], intuition, dv[static_cast<size_t>(t)]),
           da1);
      // dx would flow into the frozen embedding table; nothing to update.
      (void)layernorm_backward(tr.a1[static_cast<size_t>(t)], tr.sigma1[static_cast<size_t>(t)], da1);
    }
  }

  ToyModelConfig cfg_;
  Matrix embed_;
  AdapterSite site_q_, site_k_, site_v_, site_up_, site_down_;
  Matrix wc_;
  Vector bc_;
  Matrix wc_g_;
  Vector bc_g_;
};

}  // namespace mor1e
