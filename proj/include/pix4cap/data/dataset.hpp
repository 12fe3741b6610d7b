#pragma once

// On-disk layout (drop-in compatible with a LEVIR-CC style release):
//
//   root/A/<id>.png      pre-change image (RGB)
//   root/B/<id>.png      post-change image (RGB)
//   root/label/<id>.png  change pseudo-label, 0 = unchanged, 255 = changed
//   root/gt/<id>.png     ground-truth change mask (optional; synthetic data only)
//   root/captions.json   {"images": [{"id", "split", "sentences": [{"raw"} x 5]}]}
//
// Externally produced masks can replace label/<id>.png as-is.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"

#include "pix4cap/core/errors.hpp"
#include "pix4cap/core/rng.hpp"
#include "pix4cap/data/scene.hpp"

namespace pix4cap::data {

namespace fs = std::filesystem;

inline void write_dataset(const std::vector<BiTemporalSample>& samples, const fs::path& root) {
  for (const char* dir : {"A", "B", "label", "gt"}) fs::create_directories(root / dir);
  nlohmann::json images = nlohmann::json::array();
  for (const auto& s : samples) {
    validate(s);
    write_rgb_png((root / "A" / (s.id + ".png")).string(), s.pre);
    write_rgb_png((root / "B" / (s.id + ".png")).string(), s.post);
    write_mask_png((root / "label" / (s.id + ".png")).string(), s.pseudo_mask);
    write_mask_png((root / "gt" / (s.id + ".png")).string(), s.gt_mask);
    nlohmann::json sentences = nlohmann::json::array();
    for (const auto& c : s.captions) sentences.push_back({{"raw", c}});
    images.push_back({{"id", s.id}, {"split", to_string(s.split)}, {"sentences", sentences}});
  }
  std::ofstream out(root / "captions.json");
  if (!out) throw DataError("cannot write " + (root / "captions.json").string());
  out << nlohmann::json{{"images", images}}.dump(1) << '\n';
}

inline std::vector<BiTemporalSample> load_dataset(const fs::path& root) {
  const auto captions_path = root / "captions.json";
  std::ifstream in(captions_path);
  if (!in) throw DataError("missing file " + captions_path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(captions_path.string() + ": " + e.what());
  }
  if (!doc.contains("images") || !doc["images"].is_array())
    throw DataError(captions_path.string() + ": expected an \"images\" array");

  const auto require_file = [](const fs::path& p) {
    if (!fs::exists(p)) throw DataError("missing file " + p.string());
    return p.string();
  };

  std::vector<BiTemporalSample> samples;
  for (const auto& entry : doc["images"]) {
    BiTemporalSample s;
    try {
      s.id = entry.at("id").get<std::string>();
      s.split = parse_split(entry.at("split").get<std::string>());
      for (const auto& sentence : entry.at("sentences")) s.captions.push_back(sentence.at("raw").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw DataError(captions_path.string() + ": malformed record " + entry.dump() + ": " + e.what());
    }
    if (static_cast<int>(s.captions.size()) != kCaptionsPerSample) {
      throw DataError("image '" + s.id + "' lists " + std::to_string(s.captions.size()) +
                      " sentences, expected 5");
    }
    s.pre = read_rgb_png(require_file(root / "A" / (s.id + ".png")));
    s.post = read_rgb_png(require_file(root / "B" / (s.id + ".png")));
    s.pseudo_mask = read_mask_png(require_file(root / "label" / (s.id + ".png")));
    const auto gt_path = root / "gt" / (s.id + ".png");
    s.gt_mask = fs::exists(gt_path) ? read_mask_png(gt_path.string()) : s.pseudo_mask;
    validate(s);
    samples.push_back(std::move(s));
  }
  return samples;
}

inline std::vector<const BiTemporalSample*> select_split(const std::vector<BiTemporalSample>& samples,
                                                         Split split) {
  std::vector<const BiTemporalSample*> out;
  for (const auto& s : samples)
    if (s.split == split) out.push_back(&s);
  return out;
}

// Whole synthetic dataset: floor(changed_fraction * num_pairs) changed pairs,
// shuffled, then split into train / val / test by count.
struct SynthConfig {
  int num_pairs = 100;
  double changed_fraction = 0.5;
  int num_val = 0;
  int num_test = 0;
  std::uint64_t seed = 0;
  SceneSampler sampler;
  PseudoLabelOptions pseudo;
};

inline int changed_count(const SynthConfig& c) {
  return static_cast<int>(std::floor(c.changed_fraction * c.num_pairs + 1e-9));
}

inline std::vector<BiTemporalSample> synthesize_dataset(const SynthConfig& config) {
  if (config.num_pairs <= 0) throw UsageError("num_pairs must be positive");
  if (!(config.changed_fraction >= 0.0 && config.changed_fraction <= 1.0))
    throw UsageError("changed fraction must lie in [0, 1]");
  if (config.num_val < 0 || config.num_test < 0 || config.num_val + config.num_test > config.num_pairs)
    throw UsageError("val + test counts exceed the number of pairs");

  const int n = config.num_pairs;
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  auto change_rng = make_rng(config.seed, "changed");
  std::shuffle(order.begin(), order.end(), change_rng);
  std::vector<bool> changed(static_cast<std::size_t>(n), false);
  for (int i = 0; i < changed_count(config); ++i) changed[static_cast<std::size_t>(order[i])] = true;

  std::iota(order.begin(), order.end(), 0);
  auto split_rng = make_rng(config.seed, "split");
  std::shuffle(order.begin(), order.end(), split_rng);
  std::vector<Split> splits(static_cast<std::size_t>(n), Split::kTrain);
  for (int i = 0; i < config.num_val; ++i) splits[static_cast<std::size_t>(order[i])] = Split::kVal;
  for (int i = 0; i < config.num_test; ++i)
    splits[static_cast<std::size_t>(order[config.num_val + i])] = Split::kTest;

  std::vector<BiTemporalSample> samples;
  samples.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto sample_seed = derive_seed(config.seed, "sample", static_cast<std::uint64_t>(i));
    const auto spec = random_scene_spec(config.sampler, changed[static_cast<std::size_t>(i)], sample_seed);
    auto s = generate_scene(spec, sample_seed, config.pseudo);
    char id[16];
    std::snprintf(id, sizeof(id), "%05d", i);
    s.id = id;
    s.split = splits[static_cast<std::size_t>(i)];
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace pix4cap::data
