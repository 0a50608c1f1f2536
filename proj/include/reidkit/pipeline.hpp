#pragma once

#include <algorithm>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "reidkit/alignment.hpp"
#include "reidkit/architecture.hpp"
#include "reidkit/retrieval.hpp"
#include "reidkit/synthetic.hpp"
#include "reidkit/training.hpp"

namespace reidkit {

struct Embeddings {
  EmbeddingSet global;
  std::vector<StripeSet> local;
};

/// Eval-mode features for the given manifest records, in record order.
inline Embeddings embed(Model& model, const Tensor& images,
                        const std::vector<ManifestRecord>& records, int batch_size = 32) {
  Embeddings out;
  out.global.dim = model.spec().global_dim();
  for (std::size_t start = 0; start < records.size(); start += batch_size) {
    const std::size_t end = std::min(records.size(), start + batch_size);
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < end; ++i) idx.push_back(static_cast<std::size_t>(records[i].image));
    const Tensor batch = normalize_images(gather_images(images, idx));
    const ForwardOutput f = model.forward(batch, Mode::eval, 0);
    const int d = f.global_feat.c();
    for (std::size_t i = start; i < end; ++i) {
      EmbeddingRecord r;
      r.person_id = records[i].person_id;
      r.camera_id = records[i].camera_id;
      const std::size_t row = i - start;
      for (int k = 0; k < d; ++k) r.feature.push_back(static_cast<float>(f.global_feat[row * d + k]));
      out.global.records.push_back(std::move(r));
    }
    for (auto& s : horizontal_pool(f.local_feats)) out.local.push_back(std::move(s));
  }
  return out;
}

/// Rank-1 / mAP of a model on the query and gallery splits of a manifest.
inline EvalReport evaluate_model(Model& model, const Tensor& images, const Manifest& manifest,
                                 int max_rank = 10) {
  const auto q = embed(model, images, manifest.of(Split::query));
  const auto g = embed(model, images, manifest.of(Split::gallery));
  const int rank = std::min<int>(max_rank, static_cast<int>(g.global.size()));
  return evaluate(pairwise_dist(q.global, g.global), q.global, g.global, rank);
}

/// Width-1/8 ResNet18 with attention on layers 3 and 4, last stride 1 and
/// the BaND head.
inline ArchSpec toy_spec(int num_classes = 8) {
  ArchSpec s;
  s.variant = Variant::resnet18;
  s.width = {1, 8};
  s.attention_layers = {3, 4};
  s.last_stride = 1;
  s.num_classes = num_classes;
  return s;
}

inline constexpr int kToyEpochs = 40;

struct ToyRun {
  TrainResult train;
  EvalReport eval;
};

/// Generates the synthetic set, trains on its train split and evaluates on
/// query/gallery. `arch.num_classes` is replaced by the train id count.
inline ToyRun run_toy(ArchSpec arch, const SyntheticSpec& data_spec, const TrainConfig& cfg,
                      std::uint64_t seed,
                      const std::function<void(const EpochLoss&)>& on_epoch = {}) {
  const SyntheticData data = generate(data_spec);
  const LabeledImages train_set = training_set(data.images, data.manifest);
  arch.num_classes = count_train_classes(data.manifest);
  Model model = build(arch, seed);
  ToyRun run;
  run.train = train(model, train_set, cfg, seed, on_epoch);
  run.eval = evaluate_model(model, data.images, data.manifest);
  return run;
}

// ---------------------------------------------------------------------------
// loss curves

inline std::string loss_curve_csv(const std::vector<EpochLoss>& curve) {
  std::ostringstream os;
  os << "epoch,loss\n";
  char buf[64];
  for (const auto& e : curve) {
    std::snprintf(buf, sizeof buf, "%d,%.17g\n", e.epoch, e.total);
    os << buf;
  }
  return os.str();
}

inline std::vector<std::pair<double, double>> parse_loss_csv(const std::string& text) {
  std::vector<std::pair<double, double>> pts;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line.rfind("epoch", 0) == 0) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos)
      throw DataError("loss csv line " + std::to_string(lineno) + ": expected epoch,loss");
    try {
      pts.emplace_back(std::stod(line.substr(0, comma)), std::stod(line.substr(comma + 1)));
    } catch (const std::exception&) {
      throw DataError("loss csv line " + std::to_string(lineno) + ": not numeric");
    }
  }
  return pts;
}

/// Minimal SVG line plot of (epoch, loss) points.
inline std::string render_loss_svg(const std::vector<std::pair<double, double>>& pts,
                                   const std::string& title = "training loss") {
  constexpr double W = 640, H = 400, L = 60, R = 20, T = 40, B = 50;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" viewBox=\"0 0 " << W << ' ' << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << title
     << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  if (!pts.empty()) {
    double x0 = pts.front().first, x1 = x0, y0 = pts.front().second, y1 = y0;
    for (auto [x, y] : pts) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
    if (x1 == x0) x1 = x0 + 1;
    if (y1 == y0) y1 = y0 + 1;
    char buf[64];
    os << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
    for (auto [x, y] : pts) {
      const double px = L + (x - x0) / (x1 - x0) * (W - L - R);
      const double py = H - B - (y - y0) / (y1 - y0) * (H - T - B);
      std::snprintf(buf, sizeof buf, "%.2f,%.2f ", px, py);
      os << buf;
    }
    os << "\"/>\n";
    std::snprintf(buf, sizeof buf, "%.4g", y1);
    os << "<text x=\"" << L - 6 << "\" y=\"" << T + 4 << "\" text-anchor=\"end\" font-size=\"11\">"
       << buf << "</text>\n";
    std::snprintf(buf, sizeof buf, "%.4g", y0);
    os << "<text x=\"" << L - 6 << "\" y=\"" << H - B << "\" text-anchor=\"end\" font-size=\"11\">"
       << buf << "</text>\n";
    std::snprintf(buf, sizeof buf, "%g", x0);
    os << "<text x=\"" << L << "\" y=\"" << H - B + 16 << "\" font-size=\"11\">" << buf
       << "</text>\n";
    std::snprintf(buf, sizeof buf, "%g", x1);
    os << "<text x=\"" << W - R << "\" y=\"" << H - B + 16
       << "\" text-anchor=\"end\" font-size=\"11\">" << buf << "</text>\n";
  }
  os << "<text x=\"" << W / 2 << "\" y=\"" << H - 12
     << "\" text-anchor=\"middle\" font-size=\"12\">epoch</text>\n";
  os << "</svg>\n";
  return os.str();
}

}  // namespace reidkit
