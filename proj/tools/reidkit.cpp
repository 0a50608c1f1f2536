// reidkit: command-line driver for the synthetic data generator, toy
// training, embedding, evaluation, re-ranking, alignment and checks.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "reidkit/reidkit.hpp"

namespace fs = std::filesystem;
using namespace reidkit;

namespace {

std::uint64_t default_seed() {
  if (const char* s = std::getenv("REIDKIT_SEED")) {
    try {
      return std::stoull(s);
    } catch (const std::exception&) {
      throw ConfigError(std::string("REIDKIT_SEED is not an unsigned integer: ") + s);
    }
  }
  return 0;
}

struct Common {
  std::uint64_t seed = 0;
  std::string out;
  std::string config;

  Json section(const char* name) const {
    if (config.empty()) return Json::object();
    const Json j = read_json(config);
    return j.contains(name) ? j[name] : Json::object();
  }
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--seed", c.seed, "RNG seed (default: $REIDKIT_SEED or 0)");
  app->add_option("--out", c.out, "Output path");
  app->add_option("--config", c.config, "JSON config with arch/train/data sections")
      ->check(CLI::ExistingFile);
}

/// Writes `text` to --out when given, else stdout.
void emit(const Common& c, const std::string& text) {
  if (c.out.empty()) {
    std::cout << text;
  } else {
    detail::write_file(c.out, text);
  }
}

std::string format_millions(std::size_t n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2fM", static_cast<double>(n) / 1e6);
  return buf;
}

Json matrix_json(const Matrix& m) {
  Json rows = Json::array();
  for (int i = 0; i < m.rows; ++i) {
    auto r = m.row(i);
    rows.push_back(std::vector<double>(r.begin(), r.end()));
  }
  return rows;
}

Json dist_json(const LocalDistMatrix& d) {
  Json rows = Json::array();
  for (int i = 0; i < d.rows; ++i) {
    std::vector<double> r;
    for (int j = 0; j < d.cols; ++j) r.push_back(d(i, j));
    rows.push_back(r);
  }
  return rows;
}

struct DataDir {
  Tensor images;
  Manifest manifest;
};

DataDir load_data(const fs::path& dir) {
  return {read_tensor(dir / "images.aapt"), manifest_from_json(read_json(dir / "manifest.json"))};
}

// ---------------------------------------------------------------------------

struct DataFlags {
  std::optional<int> identities, train_identities, images, height, width, cameras;
  std::optional<double> occlusion, noise;

  void add(CLI::App* app) {
    app->add_option("--identities", identities, "Number of identities");
    app->add_option("--train-identities", train_identities, "Identities used for training");
    app->add_option("--images", images, "Images per identity");
    app->add_option("--height", height, "Image height");
    app->add_option("--width", width, "Image width");
    app->add_option("--cameras", cameras, "Camera count");
    app->add_option("--occlusion", occlusion, "Occlusion probability");
    app->add_option("--noise", noise, "Pixel noise sigma");
  }
  SyntheticSpec resolve(const Common& c) const {
    SyntheticSpec s;
    from_json(c.section("data"), s);
    s.seed = c.seed;
    if (identities) s.num_identities = *identities;
    if (train_identities) s.train_identities = *train_identities;
    if (images) s.images_per_identity = *images;
    if (height) s.height = *height;
    if (width) s.width = *width;
    if (cameras) s.camera_count = *cameras;
    if (occlusion) s.occlusion_probability = *occlusion;
    if (noise) s.noise_sigma = *noise;
    s.validate();
    return s;
  }
};

int cmd_generate(const Common& c, const DataFlags& f) {
  if (c.out.empty()) throw ConfigError("generate: --out <dir> is required");
  const SyntheticSpec spec = f.resolve(c);
  const SyntheticData data = generate(spec);
  const fs::path dir = c.out;
  write_tensor(data.images, dir / "images.aapt");
  write_json(to_json(data.manifest), dir / "manifest.json");
  write_json(to_json(spec), dir / "data.json");
  std::cout << "wrote " << data.images.n() << " images to " << dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct ArchFlags {
  std::optional<std::string> variant, fusion, attention, width;
  std::optional<int> classes, last_stride, local_dim, reduction;
  bool no_band = false;

  void add(CLI::App* app) {
    app->add_option("--variant", variant, "resnet18|resnet34|resnet50|resnet101");
    app->add_option("--attention", attention, "Comma-separated layers with attention, or none");
    app->add_option("--fusion", fusion, "Attention fusion: mul or add");
    app->add_option("--width-multiplier", width, "Channel width multiplier, e.g. 1 or 1/8");
    app->add_option("--classes", classes, "Classifier classes");
    app->add_option("--last-stride", last_stride, "Stride of layer 4 (1 or 2)");
    app->add_option("--local-dim", local_dim, "Local branch channels");
    app->add_option("--reduction", reduction, "Attention reduction r");
    app->add_flag("--no-band", no_band, "Disable the BaND head");
  }
  ArchSpec resolve(const Common& c, ArchSpec base) const {
    from_json(c.section("arch"), base);
    if (variant) base.variant = parse_variant(*variant);
    if (attention) {
      base.attention_layers.clear();
      if (*attention != "none" && !attention->empty()) {
        std::stringstream ss(*attention);
        std::string tok;
        while (std::getline(ss, tok, ',')) base.attention_layers.insert(std::stoi(tok));
      }
    }
    if (fusion) base.fusion = parse_fusion(*fusion);
    if (width) {
      const auto slash = width->find('/');
      base.width = slash == std::string::npos
                       ? WidthMultiplier{std::stoi(*width), 1}
                       : WidthMultiplier{std::stoi(width->substr(0, slash)),
                                         std::stoi(width->substr(slash + 1))};
    }
    if (classes) base.num_classes = *classes;
    if (last_stride) base.last_stride = *last_stride;
    if (local_dim) base.local_dim = *local_dim;
    if (reduction) base.reduction = *reduction;
    if (no_band) base.band_enabled = false;
    base.validate();
    return base;
  }
};

int cmd_count_params(const Common& c, const ArchFlags& f) {
  ArchSpec base;
  base.attention_layers.clear();
  const ArchSpec spec = f.resolve(c, base);
  ArchSpec plain = spec;
  plain.attention_layers.clear();
  const std::size_t total = count_params(spec), without = count_params(plain);
  std::ostringstream os;
  os << "variant " << to_string(spec.variant) << "\n";
  os << "params " << total << " (" << format_millions(total) << ")\n";
  os << "baseline " << without << " (" << format_millions(without) << ")\n";
  os << "attention_delta " << total - without << " (+" << format_millions(total - without)
     << ")\n";
  emit(c, os.str());
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainFlags {
  std::optional<int> epochs, iterations, batch_ids, batch_instances;
  std::optional<double> lr;
  std::string data;
  bool raw_local = false;

  void add(CLI::App* app) {
    app->add_option("--data", data, "Data dir from `generate` (default: generate in memory)");
    app->add_option("--epochs", epochs, "Training epochs");
    app->add_option("--iterations", iterations, "Iterations per epoch (0: one pass)");
    app->add_option("--lr", lr, "Base learning rate");
    app->add_option("--batch-ids", batch_ids, "Identities per batch (P)");
    app->add_option("--batch-instances", batch_instances, "Images per identity in a batch (K)");
    app->add_flag("--raw-local", raw_local, "Raw euclidean stripe distances");
  }
  TrainConfig resolve(const Common& c) const {
    TrainConfig t;
    t.epochs = kToyEpochs;
    from_json(c.section("train"), t);
    if (epochs) t.epochs = *epochs;
    if (iterations) t.iterations_per_epoch = *iterations;
    if (lr) t.lr = *lr;
    if (batch_ids) t.p = *batch_ids;
    if (batch_instances) t.k = *batch_instances;
    if (raw_local) t.local_metric = StripeMetric::raw;
    return t;
  }
};

int cmd_train_toy(const Common& c, const ArchFlags& af, const TrainFlags& tf, const DataFlags& df) {
  if (c.out.empty()) throw ConfigError("train-toy: --out <dir> is required");
  DataDir data;
  if (tf.data.empty()) {
    const SyntheticData gen = generate(df.resolve(c));
    data = {gen.images, gen.manifest};
  } else {
    data = load_data(tf.data);
  }
  ArchSpec spec = af.resolve(c, toy_spec());
  spec.num_classes = count_train_classes(data.manifest);
  const TrainConfig cfg = tf.resolve(c);
  const LabeledImages train_set = training_set(data.images, data.manifest);
  Model model = build(spec, c.seed);
  const TrainResult res = train(model, train_set, cfg, c.seed, [](const EpochLoss& e) {
    std::fprintf(stderr, "epoch %d loss %.6f (id %.6f global %.6f local %.6f)\n", e.epoch, e.total,
                 e.id, e.global_triplet, e.local_triplet);
  });
  const fs::path dir = c.out;
  write_model(model, dir / "model.aapm");
  write_json(to_json(spec), dir / "arch.json");
  write_json(to_json(cfg), dir / "train.json");
  detail::write_file(dir / "loss.csv", loss_curve_csv(res.curve));
  const EvalReport rep = evaluate_model(model, data.images, data.manifest);
  write_json(to_json(rep), dir / "report.json");
  std::printf("rank-1 %.4f mAP %.4f\n", rep.cmc.at(0), rep.map);
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_embed(const Common& c, const std::string& data_dir, const std::string& model_dir,
              const std::string& split, const std::string& stripes_out) {
  if (c.out.empty()) throw ConfigError("embed: --out <file> is required");
  const DataDir data = load_data(data_dir);
  ArchSpec spec;
  from_json(read_json(fs::path(model_dir) / "arch.json"), spec);
  Model model(spec);
  read_model(model, fs::path(model_dir) / "model.aapm");
  const Embeddings e = embed(model, data.images, data.manifest.of(parse_split(split)));
  write_embeddings(e.global, c.out);
  if (!stripes_out.empty()) write_stripes(e.local, stripes_out);
  return 0;
}

struct RerankFlags {
  RerankParams p;
  void add(CLI::App* app) {
    app->add_option("--k1", p.k1, "k-reciprocal neighbourhood size");
    app->add_option("--k2", p.k2, "Query expansion size");
    app->add_option("--lambda", p.lambda, "Weight of the original distance");
  }
};

int cmd_eval(const Common& c, const std::string& qpath, const std::string& gpath, bool use_rerank,
             const RerankFlags& rf, bool fused, const std::string& qs, const std::string& gs,
             int max_rank) {
  const EmbeddingSet q = read_embeddings(qpath), g = read_embeddings(gpath);
  if (use_rerank && fused) throw ConfigError("eval: --rerank and --fused are exclusive");
  Matrix d;
  if (use_rerank) {
    d = rerank(q, g, rf.p);
  } else if (fused) {
    if (qs.empty() || gs.empty())
      throw ConfigError("eval --fused needs --query-stripes and --gallery-stripes");
    d = fused_dist(q, g, read_stripes(qs), read_stripes(gs));
  } else {
    d = pairwise_dist(q, g);
  }
  const int rank = std::max(1, std::min<int>(max_rank, static_cast<int>(g.size())));
  emit(c, to_json(evaluate(d, q, g, rank)).dump(2) + "\n");
  return 0;
}

int cmd_rerank(const Common& c, const std::string& qpath, const std::string& gpath,
               const RerankFlags& rf) {
  const EmbeddingSet q = read_embeddings(qpath), g = read_embeddings(gpath);
  const Matrix d = rerank(q, g, rf.p);
  Json j;
  j["k1"] = rf.p.k1;
  j["k2"] = rf.p.k2;
  j["lambda"] = rf.p.lambda;
  j["distances"] = matrix_json(d);
  emit(c, j.dump(2) + "\n");
  return 0;
}

int cmd_align(const Common& c, const std::string& apath, const std::string& bpath, int ia, int ib,
              bool raw) {
  const auto a = read_stripes(apath), b = read_stripes(bpath);
  if (ia < 0 || ia >= static_cast<int>(a.size()) || ib < 0 || ib >= static_cast<int>(b.size()))
    throw ConfigError("align: stripe index out of range");
  const StripeMetric m = raw ? StripeMetric::raw : StripeMetric::normalized;
  const LocalDistMatrix d = stripe_distance_matrix(a[ia], b[ib], m);
  Json j;
  j["metric"] = raw ? "raw" : "normalized";
  j["distance_matrix"] = dist_json(d);
  j["dp_table"] = dist_json(shortest_path_table(d));
  Json path = Json::array();
  for (auto [r, col] : shortest_path_cells(d)) path.push_back({r, col});
  j["path"] = path;
  j["local_distance"] = shortest_path(d);
  emit(c, j.dump(2) + "\n");
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_gradcheck(const Common& c, const std::string& block, int channels, int r) {
  const double tol = grad_tolerance(block);
  const GradCheckReport rep = run_grad_probe(block, c.seed, channels, r);
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "block %s seed %llu max_relative_error %.3e worst %s coords %zu kinks %zu "
                "tolerance %.0e %s\n",
                block.c_str(), static_cast<unsigned long long>(c.seed), rep.max_error,
                rep.worst.c_str(), rep.coords, rep.kinks, tol,
                rep.max_error < tol ? "ok" : "FAILED");
  emit(c, buf);
  return rep.max_error < tol ? 0 : 1;
}

/// Minimum monotone path cost by enumerating every right/down move sequence.
double enumerate_paths(const LocalDistMatrix& d) {
  const int down = d.rows - 1, right = d.cols - 1, steps = down + right;
  double best = std::numeric_limits<double>::infinity();
  for (std::uint32_t mask = 0; mask < (1u << steps); ++mask) {
    if (std::popcount(mask) != down) continue;
    int i = 0, j = 0;
    double cost = d(0, 0);
    for (int s = 0; s < steps; ++s) {
      if (mask >> s & 1u)
        ++i;
      else
        ++j;
      cost += d(i, j);
    }
    best = std::min(best, cost);
  }
  return best;
}

int cmd_dpcheck(const Common& c, int trials, int max_size) {
  if (max_size < 1 || max_size > 12) throw ConfigError("dpcheck: --max-size must lie in [1, 12]");
  std::mt19937_64 rng(c.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  long cases = 0;
  for (int h = 1; h <= max_size; ++h)
    for (int w = 1; w <= max_size; ++w)
      for (int t = 0; t < trials; ++t) {
        LocalDistMatrix d(h, w);
        for (double& v : d.d) v = u(rng);
        worst = std::max(worst, std::abs(shortest_path(d) - enumerate_paths(d)));
        ++cases;
      }
  char buf[160];
  std::snprintf(buf, sizeof buf, "dpcheck cases %ld max_abs_diff %.3e %s\n", cases, worst,
                worst == 0.0 ? "ok" : "MISMATCH");
  emit(c, buf);
  return worst == 0.0 ? 0 : 1;
}

int cmd_plot_loss(const Common& c, const std::string& in, const std::string& title) {
  if (c.out.empty()) throw ConfigError("plot-loss: --out <file.svg> is required");
  detail::write_file(c.out, render_loss_svg(parse_loss_csv(detail::read_file(in)), title));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"reidkit: person re-identification toolkit with channel attention"};
  app.require_subcommand(1);

  Common common;
  try {
    common.seed = default_seed();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  std::function<int()> run;

  DataFlags data_flags;
  auto* gen = app.add_subcommand("generate", "Write a synthetic dataset directory");
  add_common(gen, common);
  data_flags.add(gen);
  gen->callback([&] { run = [&] { return cmd_generate(common, data_flags); }; });

  ArchFlags arch_flags;
  TrainFlags train_flags;
  auto* tt = app.add_subcommand("train-toy", "Train a toy model and evaluate it");
  add_common(tt, common);
  arch_flags.add(tt);
  train_flags.add(tt);
  data_flags.add(tt);
  tt->callback([&] {
    run = [&] { return cmd_train_toy(common, arch_flags, train_flags, data_flags); };
  });

  std::string data_dir, model_dir, split = "query", stripes_out;
  auto* em = app.add_subcommand("embed", "Write embeddings for one split");
  add_common(em, common);
  em->add_option("--data", data_dir, "Data dir")->required();
  em->add_option("--model", model_dir, "Model dir from train-toy")->required();
  em->add_option("--split", split, "query|gallery|train")
      ->check(CLI::IsMember({"query", "gallery", "train"}));
  em->add_option("--stripes", stripes_out, "Also write local stripes here");
  em->callback([&] {
    run = [&] { return cmd_embed(common, data_dir, model_dir, split, stripes_out); };
  });

  std::string qpath, gpath, qstripes, gstripes;
  bool use_rerank = false, fused = false;
  int max_rank = 10;
  RerankFlags rerank_flags;
  auto* ev = app.add_subcommand("eval", "CMC and mAP of query vs gallery embeddings");
  add_common(ev, common);
  ev->add_option("--query", qpath, "Query embeddings")->required()->check(CLI::ExistingFile);
  ev->add_option("--gallery", gpath, "Gallery embeddings")->required()->check(CLI::ExistingFile);
  ev->add_flag("--rerank", use_rerank, "Apply k-reciprocal re-ranking");
  ev->add_flag("--fused", fused, "Add aligned local distances to global ones");
  ev->add_option("--query-stripes", qstripes, "Query stripes (for --fused)");
  ev->add_option("--gallery-stripes", gstripes, "Gallery stripes (for --fused)");
  ev->add_option("--max-rank", max_rank, "Longest CMC rank reported");
  rerank_flags.add(ev);
  ev->callback([&] {
    run = [&] {
      return cmd_eval(common, qpath, gpath, use_rerank, rerank_flags, fused, qstripes, gstripes,
                      max_rank);
    };
  });

  auto* rr = app.add_subcommand("rerank", "Re-ranked query x gallery distance matrix");
  add_common(rr, common);
  rr->add_option("--query", qpath, "Query embeddings")->required()->check(CLI::ExistingFile);
  rr->add_option("--gallery", gpath, "Gallery embeddings")->required()->check(CLI::ExistingFile);
  rerank_flags.add(rr);
  rr->callback([&] { run = [&] { return cmd_rerank(common, qpath, gpath, rerank_flags); }; });

  std::string apath, bpath;
  int ia = 0, ib = 0;
  bool raw = false;
  auto* al = app.add_subcommand("align", "Stripe distance matrix and shortest-path table");
  add_common(al, common);
  al->add_option("--a", apath, "First stripe file")->required()->check(CLI::ExistingFile);
  al->add_option("--b", bpath, "Second stripe file")->required()->check(CLI::ExistingFile);
  al->add_option("--index-a", ia, "Record in the first file");
  al->add_option("--index-b", ib, "Record in the second file");
  al->add_flag("--raw", raw, "Raw euclidean stripe distances");
  al->callback([&] { run = [&] { return cmd_align(common, apath, bpath, ia, ib, raw); }; });

  ArchFlags count_flags;
  auto* cp = app.add_subcommand("count-params", "Exact learnable parameter count");
  add_common(cp, common);
  count_flags.add(cp);
  cp->callback([&] { run = [&] { return cmd_count_params(common, count_flags); }; });

  std::string block = "cwa";
  int channels = 8, r = 4;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of one block");
  add_common(gc, common);
  gc->add_option("--block", block,
                 "cwa|cwa-add|bottleneck|basic|conv|linear|bn|relu|sigmoid|gap|maxpool|"
                 "widthpool|mul|add|l2norm|model");
  gc->add_option("--channels", channels, "Channels for attention blocks");
  gc->add_option("--r", r, "Reduction for attention blocks");
  gc->callback([&] { run = [&] { return cmd_gradcheck(common, block, channels, r); }; });

  int trials = 20, max_size = 7;
  auto* dp = app.add_subcommand("dpcheck", "Shortest path vs exhaustive path enumeration");
  add_common(dp, common);
  dp->add_option("--trials", trials, "Random matrices per shape");
  dp->add_option("--max-size", max_size, "Largest rows/cols");
  dp->callback([&] { run = [&] { return cmd_dpcheck(common, trials, max_size); }; });

  std::string csv_in, title = "training loss";
  auto* pl = app.add_subcommand("plot-loss", "Render an epoch,loss CSV as SVG");
  add_common(pl, common);
  pl->add_option("--in", csv_in, "Loss CSV")->required()->check(CLI::ExistingFile);
  pl->add_option("--title", title, "Plot title");
  pl->callback([&] { run = [&] { return cmd_plot_loss(common, csv_in, title); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    return run();
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
  } catch (const EvaluationError& e) {
    std::cerr << "evaluation error: " << e.what() << "\n";
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
  }
  return 1;
}
