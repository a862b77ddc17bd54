#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "numeric.hpp"
#include "rank1_moe.hpp"

namespace mor1e {

struct ArchTarget {
  std::string name;
  long long m = 0;
  long long n = 0;
  long long count = 0;
};

// Adapter-target matrices of a host architecture: one entry per distinct
// (shape, multiplicity) site, e.g. q/k/v/o and the FFN projections per layer.
struct ArchSpec {
  std::string name;
  std::vector<ArchTarget> targets;

  void validate() const {
    require(!targets.empty(), "ArchSpec: no targets");
    for (const auto& t : targets)
      require(t.m >= 1 && t.n >= 1 && t.count >= 1,
              "ArchSpec: target '" + t.name + "' has non-positive dims");
  }
};

enum class SchemeKind { Lora, MoLora, Mor1e };

inline std::string to_string(SchemeKind k) {
  switch (k) {
    case SchemeKind::Lora: return "lora";
    case SchemeKind::MoLora: return "molora";
    case SchemeKind::Mor1e: return "mor1e";
  }
  return "lora";
}

inline SchemeKind parse_scheme_kind(const std::string& s) {
  if (s == "lora") return SchemeKind::Lora;
  if (s == "molora") return SchemeKind::MoLora;
  if (s == "mor1e") return SchemeKind::Mor1e;
  throw std::invalid_argument("unknown scheme '" + s + "' (expected lora|molora|mor1e)");
}

struct AdapterSchemeSpec {
  SchemeKind kind = SchemeKind::Mor1e;
  int experts = 20;  // mor1e / molora
  int rank = 32;     // lora / molora
  RoutingMode routing = RoutingMode::Diagonal;
  FusionMode fusion = FusionMode::None;

  std::string label() const {
    std::ostringstream os;
    os << to_string(kind);
    switch (kind) {
      case SchemeKind::Lora: os << "_r" << rank; break;
      case SchemeKind::MoLora: os << "_n" << experts << "_r" << rank; break;
      case SchemeKind::Mor1e:
        os << "_n" << experts << "_" << to_string(routing);
        if (fusion != FusionMode::None) os << "_" << to_string(fusion);
        break;
    }
    return os.str();
  }
};

struct CostReport {
  std::string scheme;
  long long trainable_params = 0;
  long long extra_flops_per_token = 0;
  double percentage_of_base = 0.0;
};

namespace detail {

inline void check_scheme(const AdapterSchemeSpec& s) {
  switch (s.kind) {
    case SchemeKind::Lora:
      require(s.rank >= 1, "cost model: lora rank must be >= 1, got " + std::to_string(s.rank));
      break;
    case SchemeKind::MoLora:
      require(s.rank >= 1, "cost model: molora rank must be >= 1, got " + std::to_string(s.rank));
      require(s.experts >= 0, "cost model: molora experts must be >= 0");
      break;
    case SchemeKind::Mor1e:
      require(s.experts >= 0, "cost model: mor1e experts must be >= 0");
      break;
  }
}

}  // namespace detail

// Trainable parameters per target:
//   lora            r(m+n)
//   molora          N r (m+n) + nN + N
//   mor1e diagonal  N(m+n) + nN + N
//   mor1e full      N(m+n) + nN^2 + N^2
inline long long count_params(const ArchSpec& arch, const AdapterSchemeSpec& scheme) {
  arch.validate();
  detail::check_scheme(scheme);
  long long total = 0;
  const long long N = scheme.experts;
  const long long r = scheme.rank;
  for (const auto& t : arch.targets) {
    long long per = 0;
    switch (scheme.kind) {
      case SchemeKind::Lora: per = r * (t.m + t.n); break;
      case SchemeKind::MoLora: per = N * r * (t.m + t.n) + t.n * N + N; break;
      case SchemeKind::Mor1e:
        per = scheme.routing == RoutingMode::Diagonal
                  ? N * (t.m + t.n) + t.n * N + N
                  : N * (t.m + t.n) + t.n * N * N + N * N;
        break;
    }
    total += per * t.count;
  }
  return total;
}

inline constexpr const char* kFlopConvention =
    "one multiply-add = 2 FLOPs, adapter forward path per token; "
    "lora: 2r(m+n); molora: 2Nr(m+n) + 2mN + 2nN; "
    "mor1e diag: 2N(m+n) + 2nN + N (+N fused); "
    "mor1e full: 2N(m+n) + 2N^2 + 2nN^2 (+N^2 fused); "
    "softmax exponentials excluded";

// Extra forward FLOPs per token under the convention above.
inline long long count_flops(const ArchSpec& arch, const AdapterSchemeSpec& scheme) {
  arch.validate();
  detail::check_scheme(scheme);
  long long total = 0;
  const long long N = scheme.experts;
  const long long r = scheme.rank;
  const bool fused = scheme.fusion != FusionMode::None;
  for (const auto& t : arch.targets) {
    long long per = 0;
    switch (scheme.kind) {
      case SchemeKind::Lora: per = 2 * r * (t.m + t.n); break;
      case SchemeKind::MoLora: per = 2 * N * r * (t.m + t.n) + 2 * t.m * N + 2 * t.n * N; break;
      case SchemeKind::Mor1e:
        if (scheme.routing == RoutingMode::Diagonal) {
          per = 2 * N * (t.m + t.n) + 2 * t.n * N + N;
          if (fused) per += N;
        } else {
          per = 2 * N * (t.m + t.n) + 2 * N * N + 2 * t.n * N * N;
          if (fused) per += N * N;
        }
        break;
    }
    total += per * t.count;
  }
  return total;
}

inline CostReport make_cost_report(const ArchSpec& arch, const AdapterSchemeSpec& scheme,
                                   long long base_params = 0) {
  CostReport rep;
  rep.scheme = scheme.label();
  rep.trainable_params = count_params(arch, scheme);
  rep.extra_flops_per_token = count_flops(arch, scheme);
  rep.percentage_of_base =
      base_params > 0 ? 100.0 * static_cast<double>(rep.trainable_params) / static_cast<double>(base_params)
                      : 0.0;
  return rep;
}

inline std::string cost_csv_header() { return "scheme,trainable_params,percentage,extra_flops_per_token"; }

inline std::string cost_csv_row(const CostReport& r) {
  char pct[32];
  std::snprintf(pct, sizeof(pct), "%.4f", r.percentage_of_base);
  std::ostringstream os;
  os << r.scheme << "," << r.trainable_params << "," << pct << "," << r.extra_flops_per_token;
  return os.str();
}

// One target per line: "name m n count". '#' comments and blank lines allowed.
inline ArchSpec load_arch(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_arch: cannot open " + path);
  ArchSpec arch;
  arch.name = path;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    ArchTarget t;
    if (!(ls >> t.name)) continue;  // blank
    if (!(ls >> t.m >> t.n >> t.count))
      throw std::runtime_error("load_arch: " + path + " line " + std::to_string(lineno) +
                               ": expected 'name m n count'");
    std::string extra;
    if (ls >> extra)
      throw std::runtime_error("load_arch: " + path + " line " + std::to_string(lineno) +
                               ": trailing field '" + extra + "'");
    if (t.m < 1 || t.n < 1 || t.count < 1)
      throw std::runtime_error("load_arch: " + path + " line " + std::to_string(lineno) +
                               ": dims and count must be positive");
    arch.targets.push_back(std::move(t));
  }
  arch.validate();
  return arch;
}

}  // namespace mor1e
