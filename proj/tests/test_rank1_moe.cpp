#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "mor1e/rank1_moe.hpp"

using namespace mor1e;

namespace {

Matrix random_matrix(Rng& rng, int rows, int cols, double s = 1.0) {
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = s * rng.uniform(-1.0, 1.0);
  return m;
}

Rank1MoeLayer random_layer(Rng& rng, int m, int n, int experts, FusionMode fusion,
                           RoutingMode routing, bool warm = true) {
  Rank1MoeLayer layer = make_rank1_layer(random_matrix(rng, m, n), experts, fusion, routing, rng);
  if (warm) {
    for (int i = 0; i < layer.u_bank.size(); ++i) layer.u_bank.data()[i] = rng.uniform(-1.0, 1.0);
    for (int i = 0; i < layer.router.b.dim(); ++i) layer.router.b[i] = rng.uniform(-0.5, 0.5);
  }
  return layer;
}

IntuitionVector random_intuition(Rng& rng, int k) {
  IntuitionVector iv;
  iv.scores = Vector(k);
  for (int i = 0; i < k; ++i) iv.scores[i] = rng.uniform(0.0, 1.0);
  return iv;
}

double max_abs_diff(const Vector& a, const Vector& b) {
  REQUIRE(a.dim() == b.dim());
  double m = 0.0;
  for (int i = 0; i < a.dim(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

double rel_err(double a, double b) { return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1.0}); }

// Central-difference check of every trainable tensor plus dx.
void check_layer_gradients(Rank1MoeLayer layer, const Vector& x, const IntuitionVector* intuition,
                           const Vector& upstream, double tol = 1e-5) {
  const double h = 1e-5;
  Rank1MoeGrads analytic = backward(layer, x, intuition, upstream);
  auto loss = [&]() { return dot(upstream, forward(layer, x, intuition)); };

  auto check_tensor = [&](double* data, int size, const double* grad, const char* name) {
    for (int i = 0; i < size; ++i) {
      double orig = data[i];
      data[i] = orig + h;
      double fp = loss();
      data[i] = orig - h;
      double fm = loss();
      data[i] = orig;
      double numeric = (fp - fm) / (2.0 * h);
      INFO(name << "[" << i << "]: analytic=" << grad[i] << " numeric=" << numeric);
      CHECK(rel_err(grad[i], numeric) < tol);
    }
  };
  check_tensor(layer.u_bank.data(), layer.u_bank.size(), analytic.du.data(), "u_bank");
  check_tensor(layer.v_bank.data(), layer.v_bank.size(), analytic.dv.data(), "v_bank");
  check_tensor(layer.router.a.data(), layer.router.a.size(), analytic.da.data(), "router.a");
  std::vector<double> db(static_cast<size_t>(analytic.db.dim()));
  for (int i = 0; i < analytic.db.dim(); ++i) db[static_cast<size_t>(i)] = analytic.db[i];
  check_tensor(layer.router.b.data(), layer.router.b.dim(), db.data(), "router.b");

  Vector xin = x;
  Vector dx_numeric = finite_diff_gradient(
      [&](const Vector& xv) { return dot(upstream, forward(layer, xv, intuition)); }, xin, h);
  for (int i = 0; i < x.dim(); ++i) {
    INFO("dx[" << i << "]");
    CHECK(rel_err(analytic.dx[i], dx_numeric[i]) < tol);
  }
}

}  // namespace

TEST_CASE("gate: uniform, saturated, and oracle cases") {
  Rng rng(1);
  Router r;
  r.experts = 4;
  r.mode = RoutingMode::Diagonal;
  r.a = Matrix(4, 3);
  r.b = Vector(4);
  Vector x{0.5, -0.2, 0.9};
  GateValues g = gate(r, x);
  for (int i = 0; i < 4; ++i) CHECK(g.values[i] == doctest::Approx(0.25).epsilon(1e-15));

  r.b[2] = 50.0;
  GateValues sat = gate(r, x);
  CHECK(std::fabs(sat.values[2] - 1.0) < 1e-12);

  Router rr = make_router(3, 5, RoutingMode::Diagonal, rng);
  Vector xx = uniform_vector(rng, 5, -1.0, 1.0);
  GateValues gg = gate(rr, xx);
  // Scalar softmax oracle.
  double logits[3];
  for (int i = 0; i < 3; ++i) {
    logits[i] = rr.b[i];
    for (int j = 0; j < 5; ++j) logits[i] += rr.a(i, j) * xx[j];
  }
  double denom = 0.0;
  for (double l : logits) denom += std::exp(l);
  for (int i = 0; i < 3; ++i) CHECK(std::fabs(gg.values[i] - std::exp(logits[i]) / denom) < 1e-12);

  CHECK_THROWS_AS(gate(rr, Vector(4)), std::invalid_argument);
}

TEST_CASE("gate in full mode is a probability distribution over N^2 entries") {
  Rng rng(2);
  Router r = make_router(3, 4, RoutingMode::Full, rng);
  CHECK(r.a.rows() == 9);
  GateValues g = gate(r, uniform_vector(rng, 4, -1.0, 1.0));
  double sum = 0.0;
  for (int i = 0; i < 9; ++i) {
    CHECK(g.values[i] > 0.0);
    sum += g.values[i];
  }
  CHECK(std::fabs(sum - 1.0) < 1e-12);
}

TEST_CASE("fuse: identity, element-wise addition, and symmetry") {
  GateValues g;
  g.mode = RoutingMode::Diagonal;
  g.experts = 4;
  g.values = Vector{0.25, 0.25, 0.25, 0.25};

  IntuitionVector onehot;
  onehot.scores = Vector{1.0, 0.0, 0.0, 0.0};
  GateValues none = fuse(g, onehot, FusionMode::None);
  CHECK(none.values == g.values);

  GateValues fused = fuse(g, onehot, FusionMode::Intuition);
  CHECK(fused.values[0] == doctest::Approx(1.25).epsilon(1e-15));
  for (int i = 1; i < 4; ++i) CHECK(fused.values[i] == doctest::Approx(0.25).epsilon(1e-15));

  IntuitionVector uniform;
  uniform.scores = Vector{0.25, 0.25, 0.25, 0.25};
  GateValues tie = fuse(g, uniform, FusionMode::Intuition);
  for (int i = 1; i < 4; ++i) CHECK(tie.values[i] == doctest::Approx(tie.values[0]).epsilon(1e-15));

  IntuitionVector wrong;
  wrong.scores = Vector{1.0, 0.0};
  CHECK_THROWS_AS(fuse(g, wrong, FusionMode::Intuition), std::invalid_argument);
}

TEST_CASE("fuse with renormalization returns a probability vector") {
  GateValues g;
  g.mode = RoutingMode::Diagonal;
  g.experts = 3;
  g.values = Vector{0.2, 0.3, 0.5};
  IntuitionVector iv;
  iv.scores = Vector{0.9, 0.1, 0.4};
  GateValues fused = fuse(g, iv, FusionMode::Intuition, true);
  double sum = fused.values[0] + fused.values[1] + fused.values[2];
  CHECK(std::fabs(sum - 1.0) < 1e-12);
  CHECK(fused.values[0] == doctest::Approx(1.1 / 2.4));
}

TEST_CASE("fuse in full mode adds the scaled outer product") {
  GateValues g;
  g.mode = RoutingMode::Full;
  g.experts = 2;
  g.values = Vector{0.25, 0.25, 0.25, 0.25};
  IntuitionVector iv;
  iv.scores = Vector{1.0, 0.5};
  GateValues fused = fuse(g, iv, FusionMode::Intuition);
  CHECK(fused.at(0, 0) == doctest::Approx(0.25 + 0.5 * 1.0));
  CHECK(fused.at(0, 1) == doctest::Approx(0.25 + 0.5 * 0.5));
  CHECK(fused.at(1, 0) == doctest::Approx(0.25 + 0.5 * 0.5));
  CHECK(fused.at(1, 1) == doctest::Approx(0.25 + 0.5 * 0.25));
}

TEST_CASE("task category encoding is deterministic and in [0,1]") {
  IntuitionVector a = task_category_encoding(3, 6);
  IntuitionVector b = task_category_encoding(3, 6);
  CHECK(a.scores == b.scores);
  for (int i = 0; i < 6; ++i) {
    CHECK(a.scores[i] >= 0.0);
    CHECK(a.scores[i] <= 1.0);
    CHECK(a.scores[i] == doctest::Approx(std::fabs(std::sin((i + 1) * 3.0))));
  }
  CHECK(task_category_encoding(1, 4).scores != task_category_encoding(2, 4).scores);
}

TEST_CASE("expert_apply: annihilator, hand case, outer-product oracle") {
  Vector zero = expert_apply(Vector{1.0, 2.0}, Vector{1.0, -1.0}, Vector{3.0, 3.0});
  CHECK(zero[0] == 0.0);
  CHECK(zero[1] == 0.0);

  Vector hand = expert_apply(Vector{1.0, 0.0}, Vector{1.0, 1.0}, Vector{2.0, 3.0});
  CHECK(hand[0] == doctest::Approx(5.0).epsilon(1e-15));
  CHECK(hand[1] == 0.0);

  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    int m = 1 + rng.below(6), n = 1 + rng.below(6);
    Vector u = uniform_vector(rng, m, -2.0, 2.0);
    Vector v = uniform_vector(rng, n, -2.0, 2.0);
    Vector x = uniform_vector(rng, n, -2.0, 2.0);
    CHECK(max_abs_diff(expert_apply(u, v, x), matvec(outer(u, v), x)) < 1e-12);
  }
}

TEST_CASE("forward: zero u-bank reduces to the frozen base exactly") {
  Rng rng(4);
  Rank1MoeLayer layer =
      make_rank1_layer(random_matrix(rng, 5, 4), 3, FusionMode::None, RoutingMode::Diagonal, rng);
  Vector x = uniform_vector(rng, 4, -1.0, 1.0);
  Vector z = forward(layer, x);
  Vector wx = matvec(layer.w, x);
  CHECK(z == wx);
}

TEST_CASE("forward matches the per-expert soft-routing sum") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    Rank1MoeLayer layer = random_layer(rng, 4, 3, 2, FusionMode::None, RoutingMode::Diagonal);
    Vector x = uniform_vector(rng, 3, -1.0, 1.0);
    GateValues g = layer_gate(layer, x, nullptr);
    Vector expected = matvec(layer.w, x);
    for (int i = 0; i < 2; ++i) {
      Rank1Expert e = layer.expert(i);
      axpy(g.values[i], expert_apply(e.u, e.v, x), expected);
    }
    CHECK(max_abs_diff(forward(layer, x), expected) < 1e-10);
  }
}

TEST_CASE("full gate restricted to the diagonal reproduces diagonal routing") {
  Rng rng(6);
  Rank1MoeLayer layer = random_layer(rng, 5, 4, 3, FusionMode::None, RoutingMode::Diagonal);
  Vector x = uniform_vector(rng, 4, -1.0, 1.0);
  GateValues diag = layer_gate(layer, x, nullptr);
  GateValues full;
  full.mode = RoutingMode::Full;
  full.experts = 3;
  full.values = Vector(9);
  for (int i = 0; i < 3; ++i) full.at(i, i) = diag.values[i];
  CHECK(max_abs_diff(forward_with_gate(layer, x, full), forward_with_gate(layer, x, diag)) < 1e-12);
  CHECK(max_abs_diff(forward_naive_with_gate(layer, x, full), forward_with_gate(layer, x, diag)) <
        1e-12);
}

TEST_CASE("factored and naive forward agree in both routing modes") {
  Rng rng(7);
  for (RoutingMode mode : {RoutingMode::Diagonal, RoutingMode::Full}) {
    for (int trial = 0; trial < 60; ++trial) {
      int m = 1 + rng.below(8), n = 1 + rng.below(8), N = 1 + rng.below(4);
      Rank1MoeLayer layer = random_layer(rng, m, n, N, FusionMode::None, mode);
      Vector x = uniform_vector(rng, n, -1.5, 1.5);
      CHECK(max_abs_diff(forward(layer, x), forward_naive(layer, x)) < 1e-10);
    }
  }
}

TEST_CASE("factored/naive equivalence holds under intuition fusion too") {
  Rng rng(8);
  for (RoutingMode mode : {RoutingMode::Diagonal, RoutingMode::Full}) {
    for (int trial = 0; trial < 40; ++trial) {
      int m = 2 + rng.below(5), n = 2 + rng.below(5), N = 2 + rng.below(3);
      Rank1MoeLayer layer = random_layer(rng, m, n, N, FusionMode::Intuition, mode);
      IntuitionVector iv = random_intuition(rng, N);
      Vector x = uniform_vector(rng, n, -1.5, 1.5);
      CHECK(max_abs_diff(forward(layer, x, &iv), forward_naive(layer, x, &iv)) < 1e-10);
    }
  }
}

TEST_CASE("single expert with saturated gate adds exactly one expert term") {
  Rng rng(9);
  Rank1MoeLayer layer = random_layer(rng, 4, 4, 1, FusionMode::None, RoutingMode::Diagonal);
  Vector x = uniform_vector(rng, 4, -1.0, 1.0);
  Rank1Expert e = layer.expert(0);
  Vector expected = add(matvec(layer.w, x), expert_apply(e.u, e.v, x));
  CHECK(max_abs_diff(forward(layer, x), expected) < 1e-12);
}

TEST_CASE("forward requires intuition when the layer fuses it") {
  Rng rng(10);
  Rank1MoeLayer layer = random_layer(rng, 3, 3, 2, FusionMode::Intuition, RoutingMode::Diagonal);
  Vector x = uniform_vector(rng, 3, -1.0, 1.0);
  CHECK_THROWS_AS(forward(layer, x), std::invalid_argument);
  IntuitionVector wrong = random_intuition(rng, 3);
  CHECK_THROWS_AS(forward(layer, x, &wrong), std::invalid_argument);
}

TEST_CASE("adapter path is linear in x when the gate is frozen") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    int m = 2 + rng.below(5), n = 2 + rng.below(5), N = 1 + rng.below(4);
    RoutingMode mode = trial % 2 == 0 ? RoutingMode::Diagonal : RoutingMode::Full;
    Rank1MoeLayer layer = random_layer(rng, m, n, N, FusionMode::None, mode);
    Vector x = uniform_vector(rng, n, -1.0, 1.0);
    GateValues g = layer_gate(layer, x, nullptr);
    double alpha = rng.uniform(-3.0, 3.0);
    Vector adapter_x = sub(forward_with_gate(layer, x, g), matvec(layer.w, x));
    Vector xs = scale(x, alpha);
    Vector adapter_ax = sub(forward_with_gate(layer, xs, g), matvec(layer.w, xs));
    CHECK(max_abs_diff(adapter_ax, scale(adapter_x, alpha)) < 1e-10);
  }
}

TEST_CASE("fused argmax is temperature invariant in the symmetric case") {
  Rng rng(12);
  Router r;
  r.experts = 4;
  r.mode = RoutingMode::Diagonal;
  r.a = Matrix(4, 3);  // zero weights: gate is uniform at any temperature
  r.b = Vector(4);
  Vector x = uniform_vector(rng, 3, -1.0, 1.0);
  IntuitionVector iv = random_intuition(rng, 4);
  int expected_argmax = 0;
  for (int i = 1; i < 4; ++i)
    if (iv.scores[i] > iv.scores[expected_argmax]) expected_argmax = i;
  for (double temp : {0.1, 1.0, 10.0}) {
    Router scaled = r;
    for (int i = 0; i < scaled.b.dim(); ++i) scaled.b[i] *= temp;
    GateValues fused = fuse(gate(scaled, x), iv, FusionMode::Intuition);
    int am = 0;
    for (int i = 1; i < 4; ++i)
      if (fused.values[i] > fused.values[am]) am = i;
    CHECK(am == expected_argmax);
  }
}

TEST_CASE("backward: zero upstream yields zero gradients") {
  Rng rng(13);
  Rank1MoeLayer layer = random_layer(rng, 4, 5, 3, FusionMode::None, RoutingMode::Diagonal);
  Vector x = uniform_vector(rng, 5, -1.0, 1.0);
  Rank1MoeGrads g = backward(layer, x, nullptr, Vector(4));
  for (int i = 0; i < g.du.size(); ++i) CHECK(g.du.data()[i] == 0.0);
  for (int i = 0; i < g.dv.size(); ++i) CHECK(g.dv.data()[i] == 0.0);
  for (int i = 0; i < g.da.size(); ++i) CHECK(g.da.data()[i] == 0.0);
  for (int i = 0; i < g.db.dim(); ++i) CHECK(g.db[i] == 0.0);
  for (int i = 0; i < g.dx.dim(); ++i) CHECK(g.dx[i] == 0.0);
}

TEST_CASE("backward: zero u-bank kills the v-path gradient") {
  Rng rng(14);
  Rank1MoeLayer layer =
      make_rank1_layer(random_matrix(rng, 4, 5), 3, FusionMode::None, RoutingMode::Diagonal, rng);
  Vector x = uniform_vector(rng, 5, -1.0, 1.0);
  Vector up = uniform_vector(rng, 4, -1.0, 1.0);
  Rank1MoeGrads g = backward(layer, x, nullptr, up);
  for (int i = 0; i < g.dv.size(); ++i) CHECK(g.dv.data()[i] == 0.0);
}

TEST_CASE("analytic gradients match central differences across modes") {
  Rng rng(15);
  for (int trial = 0; trial < 3; ++trial) {
    int m = 2 + rng.below(7), n = 2 + rng.below(7), N = 2 + rng.below(3);
    Vector x = uniform_vector(rng, n, -1.0, 1.0);
    Vector up = uniform_vector(rng, m, -1.0, 1.0);
    IntuitionVector iv = random_intuition(rng, N);

    check_layer_gradients(random_layer(rng, m, n, N, FusionMode::None, RoutingMode::Diagonal), x,
                          nullptr, up);
    check_layer_gradients(random_layer(rng, m, n, N, FusionMode::Intuition, RoutingMode::Diagonal),
                          x, &iv, up);
    check_layer_gradients(random_layer(rng, m, n, N, FusionMode::None, RoutingMode::Full), x,
                          nullptr, up);
    check_layer_gradients(random_layer(rng, m, n, N, FusionMode::Intuition, RoutingMode::Full), x,
                          &iv, up);

    Rank1MoeLayer renorm = random_layer(rng, m, n, N, FusionMode::Intuition, RoutingMode::Diagonal);
    renorm.renormalize_fused = true;
    check_layer_gradients(renorm, x, &iv, up);

    Rank1MoeLayer renorm_full = random_layer(rng, m, n, N, FusionMode::Intuition, RoutingMode::Full);
    renorm_full.renormalize_fused = true;
    check_layer_gradients(renorm_full, x, &iv, up);

    IntuitionVector cat = task_category_encoding(trial + 1, N);
    check_layer_gradients(random_layer(rng, m, n, N, FusionMode::TaskCategory, RoutingMode::Diagonal),
                          x, &cat, up);
  }
}

TEST_CASE("topk_mask: identity, forced selection, tie-break") {
  GateValues g;
  g.mode = RoutingMode::Diagonal;
  g.experts = 3;
  g.values = Vector{0.1, 0.7, 0.2};

  GateValues full = topk_mask(g, 3);
  CHECK(max_abs_diff(full.values, g.values) < 1e-15);

  GateValues one = topk_mask(g, 1);
  CHECK(one.values[0] == 0.0);
  CHECK(one.values[1] == 1.0);
  CHECK(one.values[2] == 0.0);

  GateValues tie;
  tie.mode = RoutingMode::Diagonal;
  tie.experts = 3;
  tie.values = Vector{0.4, 0.4, 0.2};
  GateValues kept = topk_mask(tie, 1);
  CHECK(kept.values[0] == 1.0);
  CHECK(kept.values[1] == 0.0);

  CHECK_THROWS_AS(topk_mask(g, 0), std::invalid_argument);
  CHECK_THROWS_AS(topk_mask(g, 4), std::invalid_argument);
}

TEST_CASE("topk_mask agrees with a sort-based oracle") {
  Rng rng(16);
  for (int trial = 0; trial < 200; ++trial) {
    int n = 2 + rng.below(7);
    GateValues g;
    g.mode = RoutingMode::Diagonal;
    g.experts = n;
    g.values = softmax(uniform_vector(rng, n, -3.0, 3.0));
    int k = 1 + rng.below(n);
    GateValues masked = topk_mask(g, k);

    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (g.values[a] != g.values[b]) return g.values[a] > g.values[b];
      return a < b;
    });
    double kept = 0.0;
    for (int i = 0; i < k; ++i) kept += g.values[order[static_cast<size_t>(i)]];
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
      bool in_top = false;
      for (int j = 0; j < k; ++j)
        if (order[static_cast<size_t>(j)] == i) in_top = true;
      if (in_top)
        CHECK(masked.values[i] == doctest::Approx(g.values[i] / kept).epsilon(1e-12));
      else
        CHECK(masked.values[i] == 0.0);
      sum += masked.values[i];
    }
    CHECK(std::fabs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("layer parameter registry matches the analytic count") {
  Rng rng(17);
  int m = 6, n = 5, N = 3;
  Rank1MoeLayer diag = random_layer(rng, m, n, N, FusionMode::None, RoutingMode::Diagonal);
  Rank1MoeGrads dg = zero_rank1_grads(diag);
  auto diag_params = collect_params(diag, dg, "layer");
  CHECK(total_size(diag_params) == N * (m + n) + n * N + N);
  for (const auto& p : diag_params) CHECK(p.name.find(".w") == std::string::npos);

  Rank1MoeLayer full = random_layer(rng, m, n, N, FusionMode::None, RoutingMode::Full);
  Rank1MoeGrads fg = zero_rank1_grads(full);
  CHECK(total_size(collect_params(full, fg, "layer")) == N * (m + n) + n * N * N + N * N);
}

TEST_CASE("checkpoint round-trips bit-exactly in both modes") {
  Rng rng(18);
  for (RoutingMode mode : {RoutingMode::Diagonal, RoutingMode::Full}) {
    Rank1MoeLayer layer = random_layer(rng, 4, 6, 3, FusionMode::Intuition, mode);
    std::string path =
        (std::filesystem::temp_directory_path() / ("mor1e_ckpt_" + to_string(mode) + ".txt")).string();
    save_layer(layer, path);
    Rank1MoeLayer back = load_layer(path);
    CHECK(back.w == layer.w);
    CHECK(back.u_bank == layer.u_bank);
    CHECK(back.v_bank == layer.v_bank);
    CHECK(back.router.a == layer.router.a);
    CHECK(back.router.b == layer.router.b);
    CHECK(back.fusion == layer.fusion);
    CHECK(back.routing == layer.routing);
    std::filesystem::remove(path);
  }
}

TEST_CASE("checkpoint loader rejects malformed files") {
  namespace fs = std::filesystem;
  std::string path = (fs::temp_directory_path() / "mor1e_ckpt_bad.txt").string();
  {
    std::ofstream out(path);
    out << "3 3 2 none diag\nW\n1 2 3\n";  // truncated W section
  }
  CHECK_THROWS_WITH_AS(load_layer(path), doctest::Contains("truncated"), std::runtime_error);
  {
    std::ofstream out(path);
    out << "oops\n";
  }
  CHECK_THROWS_AS(load_layer(path), std::runtime_error);
  fs::remove(path);
}
