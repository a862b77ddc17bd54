#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "mor1e/costs.hpp"
#include "mor1e/lora.hpp"

using namespace mor1e;

namespace {

Matrix random_matrix(Rng& rng, int rows, int cols) {
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = rng.uniform(-1.0, 1.0);
  return m;
}

double max_abs_diff(const Vector& a, const Vector& b) {
  REQUIRE(a.dim() == b.dim());
  double m = 0.0;
  for (int i = 0; i < a.dim(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

double rel_err(double a, double b) { return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1.0}); }

std::string arch_dir() { return std::string(MOR1E_SOURCE_DIR) + "/arch/"; }

// Shared central-difference check over a parameter registry.
template <typename Forward>
void check_registry_gradients(std::vector<ParamRef> params, Forward loss, double tol = 1e-5) {
  const double h = 1e-5;
  for (const auto& p : params) {
    for (int i = 0; i < p.size; ++i) {
      double orig = p.value[i];
      p.value[i] = orig + h;
      double fp = loss();
      p.value[i] = orig - h;
      double fm = loss();
      p.value[i] = orig;
      double numeric = (fp - fm) / (2.0 * h);
      INFO(p.name << "[" << i << "] analytic=" << p.grad[i] << " numeric=" << numeric);
      CHECK(rel_err(p.grad[i], numeric) < tol);
    }
  }
}

}  // namespace

TEST_CASE("lora: zero up-projection reduces to the frozen base") {
  Rng rng(1);
  LoraLayer layer = make_lora_layer(random_matrix(rng, 4, 3), 2, rng);
  Vector x = uniform_vector(rng, 3, -1.0, 1.0);
  CHECK(lora_forward(layer, x) == matvec(layer.w, x));
}

TEST_CASE("lora: constructed identity adapter") {
  Rng rng(2);
  int n = 3;
  LoraLayer layer = make_lora_layer(Matrix(n, n), n, rng, static_cast<double>(n));
  layer.b_down = Matrix::identity(n);
  layer.a_up = Matrix::identity(n);
  Vector x{0.4, -1.2, 2.0};
  CHECK(max_abs_diff(lora_forward(layer, x), x) < 1e-15);
}

TEST_CASE("lora matches the dense materialization oracle") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    int m = 1 + rng.below(6), n = 1 + rng.below(6), r = 1 + rng.below(3);
    LoraLayer layer = make_lora_layer(random_matrix(rng, m, n), r, rng);
    for (int i = 0; i < layer.a_up.size(); ++i) layer.a_up.data()[i] = rng.uniform(-1.0, 1.0);
    Vector x = uniform_vector(rng, n, -1.0, 1.0);

    Matrix dense = layer.w;
    double c = layer.scaling();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int k = 0; k < r; ++k) acc += layer.a_up(i, k) * layer.b_down(k, j);
        dense(i, j) += c * acc;
      }
    CHECK(max_abs_diff(lora_forward(layer, x), matvec(dense, x)) < 1e-10);
  }
  Rng mismatch_rng(4);
  LoraLayer layer = make_lora_layer(Matrix(2, 3), 1, mismatch_rng);
  CHECK_THROWS_AS(lora_forward(layer, Vector(4)), std::invalid_argument);
}

TEST_CASE("molora with one expert reduces to lora") {
  Rng rng(5);
  Matrix w = random_matrix(rng, 4, 3);
  Rng r1(77), r2(77);
  MoLoraLayer mo = make_molora_layer(w, 1, 2, r1);
  LoraLayer lo = make_lora_layer(w, 2, r2);
  lo.b_down = mo.experts[0].b_down;
  lo.a_up = mo.experts[0].a_up;
  for (int i = 0; i < mo.experts[0].a_up.size(); ++i) {
    mo.experts[0].a_up.data()[i] = rng.uniform(-1.0, 1.0);
    lo.a_up.data()[i] = mo.experts[0].a_up.data()[i];
  }
  Vector x = uniform_vector(rng, 3, -1.0, 1.0);
  CHECK(max_abs_diff(molora_forward(mo, x), lora_forward(lo, x)) < 1e-12);
}

TEST_CASE("molora output is gate-independent when all experts are identical") {
  Rng rng(6);
  MoLoraLayer a = make_molora_layer(random_matrix(rng, 4, 3), 3, 2, rng);
  for (auto& ex : a.experts) {
    ex.b_down = a.experts[0].b_down;
    for (int i = 0; i < ex.a_up.size(); ++i) ex.a_up.data()[i] = rng.uniform(-1.0, 1.0);
  }
  for (auto& ex : a.experts) ex.a_up = a.experts[0].a_up;
  MoLoraLayer b = a;
  for (int i = 0; i < b.router.a.size(); ++i) b.router.a.data()[i] = rng.uniform(-2.0, 2.0);
  for (int i = 0; i < b.router.b.dim(); ++i) b.router.b[i] = rng.uniform(-2.0, 2.0);
  Vector x = uniform_vector(rng, 3, -1.0, 1.0);
  CHECK(max_abs_diff(molora_forward(a, x), molora_forward(b, x)) < 1e-12);
  // Same convexity argument under a top-k mask.
  a.top_k = 2;
  b.top_k = 2;
  CHECK(max_abs_diff(molora_forward(a, x), molora_forward(b, x)) < 1e-12);
}

TEST_CASE("molora matches the naive summation oracle") {
  Rng rng(7);
  for (int trial = 0; trial < 40; ++trial) {
    int m = 2 + rng.below(5), n = 2 + rng.below(5);
    MoLoraLayer layer = make_molora_layer(random_matrix(rng, m, n), 3, 2, rng,
                                          trial % 2 ? std::optional<int>(2) : std::nullopt);
    for (auto& ex : layer.experts)
      for (int i = 0; i < ex.a_up.size(); ++i) ex.a_up.data()[i] = rng.uniform(-1.0, 1.0);
    Vector x = uniform_vector(rng, n, -1.0, 1.0);

    GateValues g = molora_gate(layer, x);
    Vector expected = matvec(layer.w, x);
    for (int e = 0; e < 3; ++e) {
      Vector h = matvec(layer.experts[static_cast<size_t>(e)].b_down, x);
      Vector up = matvec(layer.experts[static_cast<size_t>(e)].a_up, h);
      axpy(layer.scaling() * g.values[e], up, expected);
    }
    CHECK(max_abs_diff(molora_forward(layer, x), expected) < 1e-10);
  }
}

TEST_CASE("lora and molora gradients match central differences") {
  Rng rng(8);
  for (int trial = 0; trial < 3; ++trial) {
    int m = 2 + rng.below(5), n = 2 + rng.below(5);
    Vector x = uniform_vector(rng, n, -1.0, 1.0);
    Vector up = uniform_vector(rng, m, -1.0, 1.0);

    LoraLayer lo = make_lora_layer(random_matrix(rng, m, n), 2, rng);
    for (int i = 0; i < lo.a_up.size(); ++i) lo.a_up.data()[i] = rng.uniform(-1.0, 1.0);
    LoraGrads lg = lora_backward(lo, x, up);
    check_registry_gradients(collect_params(lo, lg, "lora"),
                             [&] { return dot(up, lora_forward(lo, x)); });
    Vector dx_numeric = finite_diff_gradient(
        [&](const Vector& xv) { return dot(up, lora_forward(lo, xv)); }, x, 1e-5);
    for (int i = 0; i < n; ++i) CHECK(rel_err(lg.dx[i], dx_numeric[i]) < 1e-5);

    for (auto top_k : {std::optional<int>{}, std::optional<int>{2}}) {
      MoLoraLayer mo = make_molora_layer(random_matrix(rng, m, n), 3, 2, rng, top_k);
      for (auto& ex : mo.experts)
        for (int i = 0; i < ex.a_up.size(); ++i) ex.a_up.data()[i] = rng.uniform(-1.0, 1.0);
      MoLoraGrads mg = molora_backward(mo, x, up);
      check_registry_gradients(collect_params(mo, mg, "molora"),
                               [&] { return dot(up, molora_forward(mo, x)); });
      Vector mdx = finite_diff_gradient(
          [&](const Vector& xv) { return dot(up, molora_forward(mo, xv)); }, x, 1e-5);
      for (int i = 0; i < n; ++i) CHECK(rel_err(mg.dx[i], mdx[i]) < 1e-5);
    }
  }
}

// --- cost model ---------------------------------------------------------------

TEST_CASE("count_params formula instantiations") {
  ArchSpec arch;
  arch.targets = {{"t", 4, 4, 1}};
  AdapterSchemeSpec lora{SchemeKind::Lora, 0, 1, RoutingMode::Diagonal, FusionMode::None};
  CHECK(count_params(arch, lora) == 8);

  AdapterSchemeSpec mor1e{SchemeKind::Mor1e, 1, 0, RoutingMode::Diagonal, FusionMode::None};
  CHECK(count_params(arch, mor1e) == 13);  // expert 8 + router row 4 + bias 1

  ArchSpec arch2;
  arch2.targets = {{"t", 2, 3, 1}};
  AdapterSchemeSpec molora{SchemeKind::MoLora, 2, 2, RoutingMode::Diagonal, FusionMode::None};
  CHECK(count_params(arch2, molora) == 2 * 2 * 5 + 3 * 2 + 2);

  AdapterSchemeSpec full{SchemeKind::Mor1e, 2, 0, RoutingMode::Full, FusionMode::None};
  CHECK(count_params(arch2, full) == 2 * 5 + 3 * 4 + 4);
}

TEST_CASE("7B-class reference reproduces the expected parameter total") {
  ArchSpec arch = load_arch(arch_dir() + "mistral-7b.arch");
  AdapterSchemeSpec mor1e{SchemeKind::Mor1e, 20, 0, RoutingMode::Diagonal, FusionMode::None};
  long long params = count_params(arch, mor1e);
  CHECK(params == 77336960);
  CHECK(std::fabs(static_cast<double>(params) - 77.3e6) / 77.3e6 < 0.10);

  AdapterSchemeSpec lora{SchemeKind::Lora, 0, 32, RoutingMode::Diagonal, FusionMode::None};
  CHECK(count_params(arch, lora) == 83886080);
  AdapterSchemeSpec molora{SchemeKind::MoLora, 8, 4, RoutingMode::Diagonal, FusionMode::None};
  CHECK(count_params(arch, molora) == 93849344);
}

TEST_CASE("param and flop orderings hold for every shipped arch") {
  AdapterSchemeSpec mor1e{SchemeKind::Mor1e, 20, 0, RoutingMode::Diagonal, FusionMode::None};
  AdapterSchemeSpec lora{SchemeKind::Lora, 0, 32, RoutingMode::Diagonal, FusionMode::None};
  AdapterSchemeSpec molora{SchemeKind::MoLora, 8, 4, RoutingMode::Diagonal, FusionMode::None};
  for (const char* name : {"mistral-7b.arch", "gemma-2b.arch", "tinyllama-1b.arch"}) {
    ArchSpec arch = load_arch(arch_dir() + name);
    INFO(name);
    CHECK(count_params(arch, mor1e) < count_params(arch, lora));
    CHECK(count_params(arch, lora) < count_params(arch, molora));
    CHECK(count_flops(arch, mor1e) < count_flops(arch, lora));
    CHECK(count_flops(arch, lora) < count_flops(arch, molora));
  }
}

TEST_CASE("mor1e exceeds lora flops by exactly the gate and fusion terms at r == N") {
  ArchSpec arch;
  long long m = 7, n = 5, N = 3;
  arch.targets = {{"t", m, n, 1}};
  AdapterSchemeSpec lora{SchemeKind::Lora, 0, static_cast<int>(N), RoutingMode::Diagonal,
                         FusionMode::None};
  AdapterSchemeSpec fused{SchemeKind::Mor1e, static_cast<int>(N), 0, RoutingMode::Diagonal,
                          FusionMode::Intuition};
  CHECK(count_flops(arch, fused) - count_flops(arch, lora) == 2 * n * N + N + N);
}

TEST_CASE("degenerate and rejected cost configurations") {
  ArchSpec arch;
  arch.targets = {{"t", 4, 4, 2}};
  AdapterSchemeSpec zero{SchemeKind::Mor1e, 0, 0, RoutingMode::Diagonal, FusionMode::None};
  CHECK(count_flops(arch, zero) == 0);
  CHECK(count_params(arch, zero) == 0);
  AdapterSchemeSpec zero_molora{SchemeKind::MoLora, 0, 1, RoutingMode::Diagonal, FusionMode::None};
  CHECK(count_flops(arch, zero_molora) == 0);

  AdapterSchemeSpec bad{SchemeKind::Lora, 0, 0, RoutingMode::Diagonal, FusionMode::None};
  CHECK_THROWS_AS(count_params(arch, bad), std::invalid_argument);
}

TEST_CASE("mor1e n=20 undercuts lora r=32 flops on the 7B-class arch") {
  ArchSpec arch = load_arch(arch_dir() + "mistral-7b.arch");
  AdapterSchemeSpec mor1e{SchemeKind::Mor1e, 20, 0, RoutingMode::Diagonal, FusionMode::None};
  AdapterSchemeSpec lora{SchemeKind::Lora, 0, 32, RoutingMode::Diagonal, FusionMode::None};
  double ratio = static_cast<double>(count_flops(arch, mor1e)) /
                 static_cast<double>(count_flops(arch, lora));
  CHECK(ratio < 1.0);
}

TEST_CASE("count_params is linear in target count") {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    ArchSpec arch;
    arch.targets = {{"a", 1 + rng.below(100), 1 + rng.below(100), 1 + rng.below(8)},
                    {"b", 1 + rng.below(100), 1 + rng.below(100), 1 + rng.below(8)}};
    ArchSpec doubled = arch;
    for (auto& t : doubled.targets) t.count *= 2;
    for (auto scheme : {AdapterSchemeSpec{SchemeKind::Lora, 0, 3, RoutingMode::Diagonal, FusionMode::None},
                        AdapterSchemeSpec{SchemeKind::Mor1e, 4, 0, RoutingMode::Diagonal, FusionMode::None},
                        AdapterSchemeSpec{SchemeKind::MoLora, 4, 2, RoutingMode::Diagonal, FusionMode::None}})
      CHECK(count_params(doubled, scheme) == 2 * count_params(arch, scheme));
  }
}

TEST_CASE("mor1e diagonal always undercuts molora of rank >= 2 at equal expert count") {
  Rng rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    ArchSpec arch;
    arch.targets = {{"t", 1 + rng.below(200), 1 + rng.below(200), 1 + rng.below(10)}};
    int N = 1 + rng.below(16), r = 2 + rng.below(7);
    AdapterSchemeSpec mor1e{SchemeKind::Mor1e, N, 0, RoutingMode::Diagonal, FusionMode::None};
    AdapterSchemeSpec molora{SchemeKind::MoLora, N, r, RoutingMode::Diagonal, FusionMode::None};
    CHECK(count_params(arch, mor1e) < count_params(arch, molora));
  }
}

TEST_CASE("molora at rank 1 counts exactly like mor1e diagonal") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    ArchSpec arch;
    arch.targets = {{"t", 1 + rng.below(100), 1 + rng.below(100), 1 + rng.below(6)}};
    int N = 1 + rng.below(12);
    AdapterSchemeSpec mor1e{SchemeKind::Mor1e, N, 0, RoutingMode::Diagonal, FusionMode::None};
    AdapterSchemeSpec molora{SchemeKind::MoLora, N, 1, RoutingMode::Diagonal, FusionMode::None};
    CHECK(count_params(arch, mor1e) == count_params(arch, molora));
  }
}

TEST_CASE("cost report CSV shape") {
  ArchSpec arch;
  arch.targets = {{"t", 4, 4, 1}};
  AdapterSchemeSpec mor1e{SchemeKind::Mor1e, 2, 0, RoutingMode::Diagonal, FusionMode::None};
  CostReport rep = make_cost_report(arch, mor1e, 1000);
  CHECK(cost_csv_header() == "scheme,trainable_params,percentage,extra_flops_per_token");
  std::string row = cost_csv_row(rep);
  CHECK(row.find("mor1e_n2_diag,") == 0);
  CHECK(row.find("2.6000") != std::string::npos);  // 26 params of 1000
}

TEST_CASE("arch loader reports malformed lines with numbers") {
  namespace fs = std::filesystem;
  std::string path = (fs::temp_directory_path() / "mor1e_bad.arch").string();
  {
    std::ofstream out(path);
    out << "# comment\nq 4096 4096 32\nbroken 12\n";
  }
  CHECK_THROWS_WITH_AS(load_arch(path), doctest::Contains("line 3"), std::runtime_error);
  {
    std::ofstream out(path);
    out << "q 4096 4096 32 extra\n";
  }
  CHECK_THROWS_WITH_AS(load_arch(path), doctest::Contains("trailing"), std::runtime_error);
  {
    std::ofstream out(path);
    out << "q 0 4096 32\n";
  }
  CHECK_THROWS_AS(load_arch(path), std::runtime_error);
  fs::remove(path);
}
