#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "reidkit/tensor.hpp"
#include "reidkit/training.hpp"

namespace reidkit {

/// Parameters of the synthetic pedestrian generator.
struct SyntheticSpec {
  int num_identities = 16;
  int train_identities = 8;  // the first ids go to training, the rest to test
  int images_per_identity = 16;
  int height = 64;
  int width = 32;
  int camera_count = 2;
  double occlusion_probability = 0.2;
  double noise_sigma = 0.05;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_identities < 1 || images_per_identity < 1 || height < 1 || width < 1 ||
        camera_count < 1)
      throw ConfigError("synthetic spec: all counts must be >= 1");
    if (train_identities < 0 || train_identities > num_identities)
      throw ConfigError("synthetic spec: train_identities must lie in [0, num_identities]");
    if (occlusion_probability < 0.0 || occlusion_probability > 1.0)
      throw ConfigError("synthetic spec: occlusion_probability outside [0, 1]");
    if (noise_sigma < 0.0) throw ConfigError("synthetic spec: noise_sigma must be >= 0");
  }
};

enum class Split { train, query, gallery };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::query: return "query";
    case Split::gallery: return "gallery";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "query") return Split::query;
  if (s == "gallery") return Split::gallery;
  throw ConfigError("unknown split '" + s + "'");
}

struct ManifestRecord {
  int image = 0;  // row in the image tensor
  int person_id = 0;
  int camera_id = 0;
  Split split = Split::train;
  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

struct Manifest {
  std::vector<ManifestRecord> records;

  std::vector<ManifestRecord> of(Split s) const {
    std::vector<ManifestRecord> out;
    for (const auto& r : records)
      if (r.split == s) out.push_back(r);
    return out;
  }
  friend bool operator==(const Manifest&, const Manifest&) = default;
};

struct SyntheticData {
  Tensor images;  // (N, 3, H, W), values in [0, 1]
  Manifest manifest;
};

/// Clothing palette shared by all identities, so unseen identities are new
/// combinations of colours that also occur in training.
inline constexpr std::array<std::array<double, 3>, 8> kPalette{{
    {0.85, 0.15, 0.15},  // red
    {0.15, 0.65, 0.20},  // green
    {0.15, 0.25, 0.85},  // blue
    {0.90, 0.85, 0.20},  // yellow
    {0.10, 0.10, 0.10},  // black
    {0.92, 0.92, 0.92},  // white
    {0.60, 0.20, 0.70},  // purple
    {0.95, 0.55, 0.10},  // orange
}};

/// Palette indices (head, torso, legs) for every identity. Identities are
/// laid out in groups of palette-size; inside a group every band uses each
/// colour once, so two identities of a group differ in all three bands.
/// Successive groups shift the torso (then legs) colours, keeping all
/// combinations distinct up to palette-size cubed identities.
inline std::vector<std::array<int, 3>> identity_palettes(std::uint64_t seed, int num_identities) {
  const int p = static_cast<int>(kPalette.size());
  std::mt19937_64 rng(derive_seed(seed, {0x1d}));
  std::array<std::array<int, kPalette.size()>, 3> perm;
  for (auto& pi : perm) {
    std::iota(pi.begin(), pi.end(), 0);
    std::shuffle(pi.begin(), pi.end(), rng);
  }
  std::vector<std::array<int, 3>> out;
  for (int id = 0; id < num_identities; ++id) {
    const int i = id % p, g = id / p;
    out.push_back({perm[0][i], perm[1][(i + g) % p], perm[2][(i + g / p) % p]});
  }
  return out;
}

/// Per-camera multiplicative colour tint and brightness offset.
inline std::array<double, 4> camera_tint(std::uint64_t seed, int cam) {
  std::mt19937_64 rng(derive_seed(seed, {0xca, static_cast<std::uint64_t>(cam)}));
  std::uniform_real_distribution<double> gain(0.9, 1.1), offset(-0.03, 0.03);
  return {gain(rng), gain(rng), gain(rng), offset(rng)};
}

/// Deterministic synthetic dataset. Image j of an identity is seen by
/// camera j mod camera_count. For test identities the first image from each
/// camera is a query; the rest form the gallery.
inline SyntheticData generate(const SyntheticSpec& spec) {
  spec.validate();
  const int H = spec.height, W = spec.width;
  const int total = spec.num_identities * spec.images_per_identity;
  SyntheticData out{Tensor(total, 3, H, W), {}};
  const int head_end = std::max(1, H / 5);
  const int torso_end = std::max(head_end + 1, H * 11 / 20);
  const int body_lo = W / 8, body_hi = W - W / 8;

  const auto palettes = identity_palettes(spec.seed, spec.num_identities);
  int row = 0;
  for (int id = 0; id < spec.num_identities; ++id) {
    const auto& pal = palettes[id];
    for (int j = 0; j < spec.images_per_identity; ++j, ++row) {
      const int cam = j % spec.camera_count;
      const auto tint = camera_tint(spec.seed, cam);
      std::mt19937_64 rng(derive_seed(spec.seed, {0x1a, static_cast<std::uint64_t>(row)}));
      std::normal_distribution<double> noise(0.0, 1.0);
      std::uniform_real_distribution<double> u(0.0, 1.0);

      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x) {
            double v = 0.5;
            if (x >= body_lo && x < body_hi) {
              const int band = y < head_end ? 0 : y < torso_end ? 1 : 2;
              v = kPalette[pal[band]][c];
            }
            out.images.at(row, c, y, x) = v * tint[c] + tint[3];
          }

      if (spec.occlusion_probability > 0.0 && u(rng) < spec.occlusion_probability) {
        const int oh = std::max(1, static_cast<int>(H * (0.25 + 0.25 * u(rng))));
        const int ow = std::max(1, static_cast<int>(W * (0.25 + 0.25 * u(rng))));
        const int y0 = std::uniform_int_distribution<int>(0, H - oh)(rng);
        const int x0 = std::uniform_int_distribution<int>(0, W - ow)(rng);
        const std::array<double, 3> col{u(rng), u(rng), u(rng)};
        for (int c = 0; c < 3; ++c)
          for (int y = y0; y < y0 + oh; ++y)
            for (int x = x0; x < x0 + ow; ++x) out.images.at(row, c, y, x) = col[c];
      }
      if (spec.noise_sigma > 0.0)
        for (int c = 0; c < 3; ++c)
          for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) out.images.at(row, c, y, x) += spec.noise_sigma * noise(rng);
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x) {
            double& v = out.images.at(row, c, y, x);
            v = std::clamp(v, 0.0, 1.0);
          }

      Split split = Split::train;
      if (id >= spec.train_identities) split = j < spec.camera_count ? Split::query : Split::gallery;
      out.manifest.records.push_back({row, id, cam, split});
    }
  }
  return out;
}

/// Training view of a manifest: the train split with person ids remapped
/// to contiguous class labels in order of first appearance.
inline LabeledImages training_set(const Tensor& images, const Manifest& manifest) {
  const auto recs = manifest.of(Split::train);
  if (recs.empty()) throw DataError("manifest has no training records");
  std::vector<std::size_t> idx;
  std::vector<int> seen;
  LabeledImages out;
  for (const auto& r : recs) {
    idx.push_back(static_cast<std::size_t>(r.image));
    auto it = std::find(seen.begin(), seen.end(), r.person_id);
    if (it == seen.end()) {
      seen.push_back(r.person_id);
      it = seen.end() - 1;
    }
    out.labels.push_back(static_cast<int>(it - seen.begin()));
    out.cams.push_back(r.camera_id);
  }
  out.images = gather_images(images, idx);
  return out;
}

inline int count_train_classes(const Manifest& manifest) {
  std::vector<int> ids;
  for (const auto& r : manifest.of(Split::train)) ids.push_back(r.person_id);
  std::sort(ids.begin(), ids.end());
  return static_cast<int>(std::unique(ids.begin(), ids.end()) - ids.begin());
}

}  // namespace reidkit
