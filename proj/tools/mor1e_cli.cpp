// Command-line front door: build intuition centroids, score instances against
// them, train/evaluate adapter schemes on the synthetic multitask benchmark,
// and print parameter/FLOP cost reports.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mor1e/clustering.hpp"
#include "mor1e/costs.hpp"
#include "mor1e/embedder.hpp"
#include "mor1e/intuition.hpp"
#include "mor1e/trainer.hpp"

using namespace mor1e;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 1;

// Flat "key = value" config file; '#' starts a comment. Flags given on the
// command line win over file values.
std::vector<std::string> apply_config_file(const std::vector<std::string>& args) {
  std::string config_path;
  for (size_t i = 0; i + 1 < args.size(); ++i)
    if (args[i] == "--config") config_path = args[i + 1];
  for (const auto& a : args)
    if (a.rfind("--config=", 0) == 0) config_path = a.substr(9);
  if (config_path.empty()) return args;

  std::ifstream in(config_path);
  if (!in) throw std::runtime_error("config file: cannot open " + config_path);
  std::vector<std::string> out = args;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      std::istringstream check(line);
      std::string stray;
      if (check >> stray)
        throw std::runtime_error("config file " + config_path + " line " + std::to_string(lineno) +
                                 ": expected 'key = value'");
      continue;
    }
    auto trim = [](std::string s) {
      size_t b = s.find_first_not_of(" \t");
      size_t e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw std::runtime_error("config file " + config_path + " line " + std::to_string(lineno) +
                               ": empty key");
    std::string flag = "--" + key;
    bool given = false;
    for (const auto& a : args)
      if (a == flag || a.rfind(flag + "=", 0) == 0) given = true;
    if (!given) {
      out.push_back(flag);
      out.push_back(value);
    }
  }
  return out;
}

void print_resolved_config(const CLI::App* sub) {
  std::cerr << "# resolved config [" << sub->get_name() << "]\n";
  for (const CLI::Option* opt : sub->get_options()) {
    if (opt->get_lnames().empty()) continue;
    std::string name = opt->get_lnames().front();
    if (name == "help") continue;
    std::string value;
    if (opt->count() > 0) {
      for (const auto& r : opt->results()) value += (value.empty() ? "" : ",") + r;
    } else {
      value = opt->get_default_str();
    }
    std::cerr << "#   " << name << " = " << value << "\n";
  }
}

struct EmbedderFlags {
  std::string embedder = "synthetic";
  int dim = 16;
  int archetypes = 4;
  double noise = 0.25;
  uint64_t embed_seed = 0;  // 0: derive from --seed
  std::string endpoint;
  std::string model = "mor1e-embed";
  std::string api_key_env = "EMBED_API_KEY";
  int timeout = 30;
  int retries = 2;
  int parallel = 4;
  std::string cache;

  void add_to(CLI::App* sub) {
    sub->add_option("--embedder", embedder, "Embedding backend: synthetic|service")
        ->check(CLI::IsMember({"synthetic", "service"}))
        ->capture_default_str();
    sub->add_option("--dim", dim, "Embedding dimension")->capture_default_str();
    sub->add_option("--archetypes", archetypes, "Synthetic embedder archetype count")
        ->capture_default_str();
    sub->add_option("--noise", noise, "Synthetic embedder noise scale")->capture_default_str();
    sub->add_option("--embed-seed", embed_seed, "Synthetic embedder seed (0: derive from --seed)")
        ->capture_default_str();
    sub->add_option("--endpoint", endpoint, "Embedding service base URL")->capture_default_str();
    sub->add_option("--model", model, "Embedding service model name")->capture_default_str();
    sub->add_option("--api-key-env", api_key_env, "Env var holding the service API key")
        ->capture_default_str();
    sub->add_option("--timeout", timeout, "Service timeout, seconds")->capture_default_str();
    sub->add_option("--retries", retries, "Service retry count")->capture_default_str();
    sub->add_option("--parallel", parallel, "Max in-flight service requests")->capture_default_str();
    sub->add_option("--cache", cache, "Embedding cache file")->capture_default_str();
  }

  EmbedderSpec to_spec(uint64_t master_seed) const {
    EmbedderSpec spec;
    spec.kind = embedder == "service" ? EmbedderKind::ExternalService : EmbedderKind::Synthetic;
    spec.dim = dim;
    spec.archetypes = archetypes;
    spec.noise = noise;
    spec.seed = embed_seed ? embed_seed : derive_seed(master_seed, "embedder");
    spec.endpoint = endpoint;
    spec.model = model;
    spec.api_key_env = api_key_env;
    spec.timeout_sec = timeout;
    spec.retries = retries;
    spec.parallel = parallel;
    spec.cache_path = cache;
    return spec;
  }
};

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open input file " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(line);
  if (lines.empty()) throw std::runtime_error("input file " + path + " has no non-empty lines");
  return lines;
}

std::map<std::string, std::string> parse_kv_spec(const std::string& spec, const std::string& what) {
  std::map<std::string, std::string> kv;
  std::istringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto eq = item.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument(what + ": expected key=value, got '" + item + "'");
    kv[item.substr(0, eq)] = item.substr(eq + 1);
  }
  return kv;
}

// Synthetic clustering corpus: texts of band-pure tokens per archetype.
struct SyntheticCorpus {
  std::vector<std::string> texts;
  std::vector<int> labels;
};

SyntheticCorpus make_synthetic_corpus(const std::string& spec_str, uint64_t seed) {
  auto kv = parse_kv_spec(spec_str, "--synthetic");
  int archetypes = 3, per = 50, tokens = 12, word_pool = 256;
  for (const auto& [k, v] : kv) {
    if (k == "archetypes") archetypes = std::stoi(v);
    else if (k == "per") per = std::stoi(v);
    else if (k == "tokens") tokens = std::stoi(v);
    else if (k == "pool") word_pool = std::stoi(v);
    else throw std::invalid_argument("--synthetic: unknown key '" + k + "'");
  }
  require(archetypes >= 2, "--synthetic: archetypes must be >= 2");
  require(per >= 1 && tokens >= 1, "--synthetic: per and tokens must be positive");
  std::vector<std::vector<std::string>> pools(static_cast<size_t>(archetypes));
  for (int id = 0; id < word_pool; ++id) {
    std::string w = "w" + std::to_string(id);
    pools[static_cast<size_t>(token_band(w, archetypes))].push_back(w);
  }
  for (int a = 0; a < archetypes; ++a)
    require(!pools[static_cast<size_t>(a)].empty(), "--synthetic: word pool leaves archetype " +
                                                        std::to_string(a) + " empty; raise pool");
  SyntheticCorpus corpus;
  Rng rng(derive_seed(seed, "synthetic-corpus"));
  for (int a = 0; a < archetypes; ++a)
    for (int i = 0; i < per; ++i) {
      std::string text;
      const auto& pool = pools[static_cast<size_t>(a)];
      for (int t = 0; t < tokens; ++t) {
        if (t) text += ' ';
        text += pool[static_cast<size_t>(rng.below(static_cast<int>(pool.size())))];
      }
      corpus.texts.push_back(std::move(text));
      corpus.labels.push_back(a);
    }
  return corpus;
}

// ---------------------------------------------------------------------------
// cluster
// ---------------------------------------------------------------------------

struct ClusterArgs {
  std::string input, synthetic, out, project2d, config;
  int k = 0;
  uint64_t seed = 1;
  int sample = 0;
  int max_iters = 100;
  double tol = 1e-9;
  int restarts = 8;
  bool normalize = false;
  EmbedderFlags embedder;
};

int run_cluster(const ClusterArgs& a) {
  if (a.input.empty() == a.synthetic.empty())
    throw std::invalid_argument("exactly one of --input / --synthetic is required");
  require(a.k >= 2, "--k must be >= 2");

  std::vector<std::string> texts;
  std::vector<int> planted;
  if (!a.input.empty()) {
    texts = read_lines(a.input);
  } else {
    SyntheticCorpus corpus = make_synthetic_corpus(a.synthetic, a.seed);
    texts = std::move(corpus.texts);
    planted = std::move(corpus.labels);
  }

  EmbedderSpec espec = a.embedder.to_spec(a.seed);
  if (!a.synthetic.empty() && espec.kind == EmbedderKind::Synthetic) {
    auto kv = parse_kv_spec(a.synthetic, "--synthetic");
    if (kv.count("archetypes")) espec.archetypes = std::stoi(kv["archetypes"]);
  }

  // Algorithm: sample without replacement, embed, cluster.
  int sample_size = a.sample > 0 ? a.sample : std::min<int>(512 * a.k, static_cast<int>(texts.size()));
  sample_size = std::min<int>(sample_size, static_cast<int>(texts.size()));
  require(a.k <= sample_size, "--k=" + std::to_string(a.k) + " exceeds the sample size " +
                                  std::to_string(sample_size));
  std::vector<int> order(texts.size());
  for (size_t i = 0; i < texts.size(); ++i) order[i] = static_cast<int>(i);
  Rng srng(derive_seed(a.seed, "sample"));
  for (size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[static_cast<size_t>(srng.below(static_cast<int>(i)))]);
  order.resize(static_cast<size_t>(sample_size));

  std::vector<std::string> sample_texts;
  for (int i : order) sample_texts.push_back(texts[static_cast<size_t>(i)]);
  auto embeddings = embed(espec, sample_texts);
  if (a.normalize) embeddings = normalize_embeddings(std::move(embeddings));

  Rng krng(derive_seed(a.seed, "kmeans"));
  KmeansResult res = kmeans(embeddings, a.k, krng, a.max_iters, a.tol, a.restarts);
  res.centroids.embedder_fingerprint = espec.fingerprint();
  save_centroids(res.centroids, a.out);

  std::cout << "within-cluster sum of squares: " << res.objective << "\n";
  std::cout << "cluster sizes:";
  for (int s : res.cluster_sizes) std::cout << " " << s;
  std::cout << "\niterations: " << res.iterations << "\n";
  if (!planted.empty()) {
    std::vector<int> sample_labels;
    for (int i : order) sample_labels.push_back(planted[static_cast<size_t>(i)]);
    std::cout << "ARI vs planted labels: " << adjusted_rand_index(res.assignment, sample_labels)
              << "\n";
  }
  std::cout << "centroids written to " << a.out << "\n";

  if (!a.project2d.empty()) {
    auto proj = pca2d(embeddings);
    std::ofstream out(a.project2d);
    if (!out) throw std::runtime_error("cannot open " + a.project2d);
    out << "x,y,cluster\n";
    for (size_t i = 0; i < proj.size(); ++i)
      out << detail::format_double(proj[i].first) << "," << detail::format_double(proj[i].second)
          << "," << res.assignment[i] << "\n";
    std::cout << "2-d projection written to " << a.project2d << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// intuition
// ---------------------------------------------------------------------------

struct IntuitionArgs {
  std::string centroids, text, input, config;
  bool debug = false;
  uint64_t seed = 1;
  EmbedderFlags embedder;
};

int run_intuition(const IntuitionArgs& a) {
  if (a.text.empty() == a.input.empty())
    throw std::invalid_argument("exactly one of --text / --input is required");
  CentroidSet centroids = load_centroids(a.centroids);

  EmbedderFlags flags = a.embedder;
  flags.dim = centroids.dim();  // the centroid file pins the dimension
  EmbedderSpec espec = flags.to_spec(a.seed);
  if (espec.fingerprint() != centroids.embedder_fingerprint)
    std::cerr << "warning: embedder fingerprint '" << espec.fingerprint()
              << "' differs from centroid file's '" << centroids.embedder_fingerprint << "'\n";

  std::vector<std::string> texts;
  if (!a.text.empty()) texts.push_back(a.text);
  else texts = read_lines(a.input);

  auto embeddings = embed(espec, texts);
  for (const auto& e : embeddings) {
    IntuitionDetail detail = compute_intuition_detail(e.vector, centroids);
    char buf[32];
    for (int i = 0; i < detail.clamped.k(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.6f", detail.clamped.scores[i]);
      std::cout << (i ? " " : "") << buf;
    }
    std::cout << "\n";
    if (a.debug) {
      std::cerr << "raw:";
      for (int i = 0; i < detail.raw.dim(); ++i) std::cerr << " " << detail.raw[i];
      std::cerr << "\n";
    }
  }
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string scheme, fusion = "none", routing = "diag", data, centroids, out, schedule = "cosine";
  std::string config;
  int experts = 0, rank = 0, top_k = 0;
  bool oracle_intuition = false;
  uint64_t seed = 1;
  double lr = 5e-5;
  int batch = 64, epochs = 3;
  int embed_dim = 0, ffn_dim = 0;
  double base_scale = 0.1;
  EmbedderFlags embedder;
};

Dataset resolve_dataset(const std::string& data, uint64_t seed) {
  if (data.rfind("synth:", 0) == 0) {
    auto kv = parse_kv_spec(data.substr(6), "--data synth:");
    SyntheticTaskSpec spec;
    spec.tasks = 4;
    spec.vocab = 32;
    spec.seq_len = 8;
    spec.classes = 3;
    spec.separation = 0.5;
    spec.label_margin = 3.0;
    int count = 2000;
    for (const auto& [k, v] : kv) {
      if (k == "tasks") spec.tasks = std::stoi(v);
      else if (k == "vocab") spec.vocab = std::stoi(v);
      else if (k == "seq") spec.seq_len = std::stoi(v);
      else if (k == "classes") spec.classes = std::stoi(v);
      else if (k == "sep") spec.separation = std::stod(v);
      else if (k == "noise") spec.label_noise = std::stod(v);
      else if (k == "margin") spec.label_margin = std::stod(v);
      else if (k == "count") count = std::stoi(v);
      else throw std::invalid_argument("--data synth: unknown key '" + k + "'");
    }
    return generate_multitask_data(spec, count, derive_seed(seed, "data"));
  }
  return load_dataset(data);
}

int run_train(const TrainArgs& a) {
  SchemeKind kind = parse_scheme_kind(a.scheme);
  FusionMode fusion = parse_fusion_mode(a.fusion);
  RoutingMode routing = parse_routing_mode(a.routing);

  // Flag-combination checks; conflicts name the offending flags.
  if (kind == SchemeKind::Lora) {
    if (a.experts > 0)
      throw std::invalid_argument("--experts conflicts with --scheme lora (use --rank)");
    if (fusion != FusionMode::None)
      throw std::invalid_argument("--fusion " + a.fusion + " conflicts with --scheme lora");
    if (routing != RoutingMode::Diagonal)
      throw std::invalid_argument("--routing full conflicts with --scheme lora");
    if (a.top_k > 0) throw std::invalid_argument("--top-k conflicts with --scheme lora");
  }
  if (kind == SchemeKind::MoLora) {
    if (fusion != FusionMode::None)
      throw std::invalid_argument("--fusion " + a.fusion + " conflicts with --scheme molora");
    if (routing != RoutingMode::Diagonal)
      throw std::invalid_argument("--routing full conflicts with --scheme molora");
  }
  if (kind == SchemeKind::Mor1e && a.rank > 0)
    throw std::invalid_argument("--rank conflicts with --scheme mor1e (use --experts)");
  if (fusion == FusionMode::Intuition && a.centroids.empty() && !a.oracle_intuition)
    throw std::invalid_argument(
        "--fusion intuition requires --centroids <file> or --oracle-intuition");
  if (a.out.empty()) throw std::invalid_argument("--out is required");

  AdapterSchemeSpec scheme;
  scheme.kind = kind;
  scheme.fusion = fusion;
  scheme.routing = routing;
  scheme.experts = a.experts > 0 ? a.experts : 4;
  scheme.rank = a.rank > 0 ? a.rank : (kind == SchemeKind::MoLora ? 2 : 4);
  if (a.top_k > 0 && a.top_k > scheme.experts)
    throw std::invalid_argument("--top-k exceeds --experts");

  Dataset ds = resolve_dataset(a.data, a.seed);

  ToyModelConfig mc;
  mc.vocab = ds.spec.vocab;
  mc.embed_dim = a.embed_dim > 0 ? a.embed_dim : ds.spec.vocab;
  mc.ffn_dim = a.ffn_dim > 0 ? a.ffn_dim : mc.embed_dim;
  mc.seq_len = ds.spec.seq_len;
  mc.num_classes = ds.spec.classes;
  mc.base_scale = a.base_scale;
  mc.adapter = scheme;
  if (a.top_k > 0) mc.top_k = a.top_k;
  mc.seed = derive_seed(a.seed, "model");

  TrainConfig tc;
  tc.learning_rate = a.lr;
  tc.batch_size = a.batch;
  tc.epochs = a.epochs;
  tc.schedule = a.schedule == "constant" ? LrSchedule::Constant : LrSchedule::Cosine;
  tc.seed = derive_seed(a.seed, "trainer");

  IntuitionConfig ic;
  CentroidSet centroids;
  EmbedderSpec espec;
  if (fusion == FusionMode::Intuition) {
    if (a.oracle_intuition) {
      if (ds.spec.tasks != scheme.experts)
        throw std::invalid_argument("--oracle-intuition requires tasks == --experts (" +
                                    std::to_string(ds.spec.tasks) + " vs " +
                                    std::to_string(scheme.experts) + ")");
      ic.source = IntuitionSource::OracleOneHot;
    } else {
      centroids = load_centroids(a.centroids);
      if (centroids.k() != scheme.experts)
        throw std::invalid_argument("--centroids file has K=" + std::to_string(centroids.k()) +
                                    " but --experts is " + std::to_string(scheme.experts) +
                                    " (intuition fusion requires K == N)");
      EmbedderFlags flags = a.embedder;
      flags.dim = centroids.dim();
      if (flags.archetypes != ds.spec.tasks && flags.embedder == "synthetic")
        flags.archetypes = ds.spec.tasks;
      espec = flags.to_spec(a.seed);
      ic.source = IntuitionSource::Pipeline;
      ic.centroids = &centroids;
      ic.embedder = &espec;
    }
  }

  MetricsLog log = run_experiment(mc, tc, ds, ic);
  write_metrics_csv(log, a.out);
  char acc[32];
  std::snprintf(acc, sizeof(acc), "%.6f", log.final_eval_acc);
  std::cout << a.scheme << " " << a.fusion << " " << a.routing << " " << acc << " "
            << log.trainable_params << "\n";
  std::cout << "metrics written to " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// cost
// ---------------------------------------------------------------------------

struct CostArgs {
  std::string arch, scheme = "lora,molora,mor1e", routing = "diag", fusion = "none", config;
  int experts = 20, rank = 32;
  long long base_params = 0;
};

int run_cost(const CostArgs& a) {
  ArchSpec arch = load_arch(a.arch);
  RoutingMode routing = parse_routing_mode(a.routing);
  FusionMode fusion = parse_fusion_mode(a.fusion);

  std::vector<std::string> schemes;
  std::istringstream ss(a.scheme);
  std::string item;
  while (std::getline(ss, item, ',')) schemes.push_back(item);
  require(!schemes.empty(), "--scheme list is empty");

  std::cout << "# flop convention: " << kFlopConvention << "\n";
  std::cout << cost_csv_header() << "\n";
  for (const auto& name : schemes) {
    AdapterSchemeSpec spec;
    spec.kind = parse_scheme_kind(name);
    spec.experts = a.experts;
    spec.rank = a.rank;
    spec.routing = routing;
    spec.fusion = fusion;
    std::cout << cost_csv_row(make_cost_report(arch, spec, a.base_params)) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Intuition-aware mixture of rank-1 experts: clustering, routing, training, costs"};
  app.require_subcommand(1);

  ClusterArgs cluster_args;
  CLI::App* cluster = app.add_subcommand("cluster", "Embed a corpus and build intuition centroids");
  cluster->add_option("--input", cluster_args.input, "Text file, one instance per line");
  cluster->add_option("--synthetic", cluster_args.synthetic,
                      "Synthetic corpus spec, e.g. archetypes=3,per=50,tokens=12");
  cluster->add_option("--k", cluster_args.k, "Number of centroids (>= 2)")->capture_default_str();
  cluster->add_option("--seed", cluster_args.seed, "Master seed")->capture_default_str();
  cluster->add_option("--out", cluster_args.out, "Centroid output file")->required();
  cluster->add_option("--sample", cluster_args.sample,
                      "Centroid-construction sample size (0: min(512k, corpus))")
      ->capture_default_str();
  cluster->add_option("--max-iters", cluster_args.max_iters, "Lloyd iteration cap")
      ->capture_default_str();
  cluster->add_option("--tol", cluster_args.tol, "Centroid displacement tolerance")
      ->capture_default_str();
  cluster->add_option("--restarts", cluster_args.restarts, "Seeded restarts, best objective kept")
      ->capture_default_str();
  cluster->add_flag("--normalize", cluster_args.normalize,
                    "Unit-normalize embeddings before clustering (spherical variant)");
  cluster->add_option("--project2d", cluster_args.project2d, "Write a 2-d PCA projection CSV here");
  cluster->add_option("--config", cluster_args.config, "Flat key=value config file (flags win)");
  cluster_args.embedder.add_to(cluster);

  IntuitionArgs intuition_args;
  CLI::App* intuition = app.add_subcommand("intuition", "Score instances against saved centroids");
  intuition->add_option("--centroids", intuition_args.centroids, "Centroid file")->required();
  intuition->add_option("--text", intuition_args.text, "Single instance text");
  intuition->add_option("--input", intuition_args.input, "Text file, one instance per line");
  intuition->add_flag("--debug", intuition_args.debug, "Also print unclamped cosines to stderr");
  intuition->add_option("--seed", intuition_args.seed, "Master seed")->capture_default_str();
  intuition->add_option("--config", intuition_args.config, "Flat key=value config file (flags win)");
  intuition_args.embedder.add_to(intuition);

  TrainArgs train_args;
  CLI::App* train = app.add_subcommand("train", "Train an adapter scheme on toy multitask data");
  train->add_option("--scheme", train_args.scheme, "lora|molora|mor1e")
      ->required()
      ->check(CLI::IsMember({"lora", "molora", "mor1e"}));
  train->add_option("--fusion", train_args.fusion, "none|taskcat|intuition")
      ->check(CLI::IsMember({"none", "taskcat", "intuition"}))
      ->capture_default_str();
  train->add_option("--routing", train_args.routing, "diag|full")
      ->check(CLI::IsMember({"diag", "full"}))
      ->capture_default_str();
  train->add_option("--experts", train_args.experts, "Expert count N (mor1e/molora; 0: default 4)")
      ->capture_default_str();
  train->add_option("--rank", train_args.rank, "Adapter rank r (lora/molora; 0: scheme default)")
      ->capture_default_str();
  train->add_option("--top-k", train_args.top_k, "Top-k expert mask (molora; 0: off)")
      ->capture_default_str();
  train->add_option("--data", train_args.data,
                    "Dataset file or synth:tasks=4,count=2000,vocab=32,seq=8,classes=3,sep=0.5,"
                    "noise=0,margin=3")
      ->required();
  train->add_option("--centroids", train_args.centroids, "Centroid file for intuition fusion");
  train->add_flag("--oracle-intuition", train_args.oracle_intuition,
                  "Use planted one-hot task intuition instead of the embedding pipeline");
  train->add_option("--seed", train_args.seed, "Master seed")->capture_default_str();
  train->add_option("--out", train_args.out, "Metrics output directory")->required();
  train->add_option("--lr", train_args.lr, "Learning rate")->capture_default_str();
  train->add_option("--batch", train_args.batch, "Batch size")->capture_default_str();
  train->add_option("--epochs", train_args.epochs, "Epochs")->capture_default_str();
  train->add_option("--schedule", train_args.schedule, "cosine|constant")
      ->check(CLI::IsMember({"cosine", "constant"}))
      ->capture_default_str();
  train->add_option("--embed-dim", train_args.embed_dim, "Embedding width (0: vocab)")
      ->capture_default_str();
  train->add_option("--ffn-dim", train_args.ffn_dim, "FFN width (0: embed dim)")
      ->capture_default_str();
  train->add_option("--base-scale", train_args.base_scale, "Frozen base init scale")
      ->capture_default_str();
  train->add_option("--config", train_args.config, "Flat key=value config file (flags win)");
  train_args.embedder.add_to(train);

  CostArgs cost_args;
  CLI::App* cost = app.add_subcommand("cost", "Report trainable parameters and extra FLOPs per token");
  cost->add_option("--arch", cost_args.arch, "Arch-spec file, lines of 'name m n count'")->required();
  cost->add_option("--scheme", cost_args.scheme, "Comma list of lora|molora|mor1e")
      ->capture_default_str();
  cost->add_option("--experts", cost_args.experts, "Expert count for mor1e/molora")
      ->capture_default_str();
  cost->add_option("--rank", cost_args.rank, "Rank for lora/molora")->capture_default_str();
  cost->add_option("--routing", cost_args.routing, "mor1e routing: diag|full")
      ->check(CLI::IsMember({"diag", "full"}))
      ->capture_default_str();
  cost->add_option("--fusion", cost_args.fusion, "mor1e fusion for flop accounting")
      ->check(CLI::IsMember({"none", "taskcat", "intuition"}))
      ->capture_default_str();
  cost->add_option("--base-params", cost_args.base_params, "Base model parameter count (for %)")
      ->capture_default_str();
  cost->add_option("--config", cost_args.config, "Flat key=value config file (flags win)");

  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    args = apply_config_file(args);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }

  std::reverse(args.begin(), args.end());  // CLI11's parse(vector) expects reversed args
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*cluster) {
      print_resolved_config(cluster);
      return run_cluster(cluster_args);
    }
    if (*intuition) {
      print_resolved_config(intuition);
      return run_intuition(intuition_args);
    }
    if (*train) {
      print_resolved_config(train);
      return run_train(train_args);
    }
    if (*cost) {
      print_resolved_config(cost);
      return run_cost(cost_args);
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
