#pragma once

// Full model: shared backbone, change-detection branch (full mode only),
// semantic fusion and caption decoder.

#include <array>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "pix4cap/data/image.hpp"
#include "pix4cap/model/backbone.hpp"
#include "pix4cap/model/caption_branch.hpp"
#include "pix4cap/model/cd_branch.hpp"

namespace pix4cap::model {

struct ModelConfig {
  Mode mode = Mode::kFull;
  int image_size = 64;
  std::array<int, kLevels> widths{32, 64, 128, 256};
  int num_classes = 2;
  int heads = 4;
  int ffn_multiplier = 4;
  int decoder_layers = 1;
  int max_len = 20;
  std::vector<double> class_weights;  // empty: plain cross-entropy

  int level4_width() const { return widths[kLevels - 1]; }
  int visual_length() const { return (image_size / 32) * (image_size / 32); }
};

inline void validate(const ModelConfig& c) {
  check_image_size(c.image_size, c.image_size);
  for (int i = 0; i < kLevels; ++i) {
    if (c.widths[i] <= 0) throw UsageError("widths must be positive");
    if (i > 0 && c.widths[i] < c.widths[i - 1]) throw UsageError("widths must be non-decreasing");
  }
  if (c.num_classes < 2) throw UsageError("num_classes must be at least 2");
  if (c.heads <= 0 || c.level4_width() % c.heads != 0)
    throw UsageError("level-4 width " + std::to_string(c.level4_width()) + " is not divisible by " +
                     std::to_string(c.heads) + " heads");
  if (c.ffn_multiplier <= 0 || c.decoder_layers <= 0) throw UsageError("ffn_multiplier and decoder_layers must be positive");
  if (c.max_len < 2) throw UsageError("max_len must be at least 2");
  if (!c.class_weights.empty() && static_cast<int>(c.class_weights.size()) != c.num_classes)
    throw UsageError("class_weights needs one entry per class");
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"mode", to_string(c.mode)},        {"image_size", c.image_size},
          {"widths", c.widths},               {"num_classes", c.num_classes},
          {"heads", c.heads},                 {"ffn_multiplier", c.ffn_multiplier},
          {"decoder_layers", c.decoder_layers}, {"max_len", c.max_len},
          {"class_weights", c.class_weights}};
}

// Rejects unknown keys; missing keys keep their defaults.
inline void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw UsageError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw UsageError("unknown key '" + key + "' in " + where);
}

inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c = {}) {
  reject_unknown_keys(j,
                      {"mode", "image_size", "widths", "num_classes", "heads", "ffn_multiplier", "decoder_layers",
                       "max_len", "class_weights"},
                      "model config");
  try {
    if (j.contains("mode")) c.mode = parse_mode(j["mode"].get<std::string>());
    if (j.contains("image_size")) c.image_size = j["image_size"].get<int>();
    if (j.contains("widths")) {
      const auto w = j["widths"].get<std::vector<int>>();
      if (w.size() != kLevels) throw UsageError("widths needs exactly 4 entries");
      std::copy(w.begin(), w.end(), c.widths.begin());
    }
    if (j.contains("num_classes")) c.num_classes = j["num_classes"].get<int>();
    if (j.contains("heads")) c.heads = j["heads"].get<int>();
    if (j.contains("ffn_multiplier")) c.ffn_multiplier = j["ffn_multiplier"].get<int>();
    if (j.contains("decoder_layers")) c.decoder_layers = j["decoder_layers"].get<int>();
    if (j.contains("max_len")) c.max_len = j["max_len"].get<int>();
    if (j.contains("class_weights")) c.class_weights = j["class_weights"].get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("model config: ") + e.what());
  }
  validate(c);
  return c;
}

// RGB in [0, 1] -> centered [H, W, 3] constant.
template <class T>
Tensor<T> image_tensor(const data::RgbImage& image) {
  std::vector<T> values(image.pixels.size());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<T>(image.pixels[i] - 0.5f);
  return Tensor<T>::constant({image.height, image.width, 3}, std::move(values));
}

template <class T>
struct Encoding {
  FeaturePyramid<T> pre, post;
  FusedPyramid<T> fused;  // full mode only
  Tensor<T> cd_logits;    // full mode only, [H, W, C]
  Tensor<T> visual;       // [S, C_4]
};

template <class T>
class Pix4CapModel {
 public:
  Pix4CapModel(const ModelConfig& config, const text::Vocabulary& vocabulary, std::uint64_t seed)
      : config_((validate(config), config)),
        vocabulary_(vocabulary),
        store_(seed),
        backbone_(store_, config.widths),
        sfa_(store_, config.mode, config.level4_width(), config.heads, config.ffn_multiplier * config.level4_width()),
        decoder_(store_, DecoderConfig{vocabulary.size(), config.level4_width(), config.heads,
                                       config.ffn_multiplier * config.level4_width(), config.decoder_layers,
                                       config.max_len, config.visual_length()}) {
    if (config.mode == Mode::kFull) cd_.emplace(store_, config.widths, config.num_classes);
  }

  Encoding<T> encode(const data::RgbImage& pre, const data::RgbImage& post) const {
    if (pre.height != config_.image_size || pre.width != config_.image_size || post.height != pre.height ||
        post.width != pre.width)
      throw ShapeError("model expects two " + std::to_string(config_.image_size) + "x" +
                       std::to_string(config_.image_size) + " images, got " + std::to_string(pre.height) + "x" +
                       std::to_string(pre.width) + " and " + std::to_string(post.height) + "x" +
                       std::to_string(post.width));
    Encoding<T> e;
    e.pre = backbone_.extract_features(image_tensor<T>(pre));
    e.post = backbone_.extract_features(image_tensor<T>(post));
    const auto& x1 = e.pre.levels[kLevels - 1];
    const auto& x2 = e.post.levels[kLevels - 1];
    if (cd_) {
      e.fused = cd_->fuse(e.pre, e.post);
      e.cd_logits = cd_->decode(e.fused);
      e.visual = sfa_(x1, x2, e.fused.levels[kLevels - 1]);
    } else {
      e.visual = sfa_(x1, x2, std::nullopt);
    }
    return e;
  }

  Tensor<T> decode(const Tensor<T>& visual, const text::TokenSequence& input) const { return decoder_(visual, input); }

  const ModelConfig& config() const { return config_; }
  const text::Vocabulary& vocabulary() const { return vocabulary_; }
  nn::ParameterStore<T>& store() { return store_; }
  const nn::ParameterStore<T>& store() const { return store_; }
  const Backbone<T>& backbone() const { return backbone_; }
  const ChangeDetectionBranch<T>* cd_branch() const { return cd_ ? &*cd_ : nullptr; }
  const SemanticFusion<T>& fusion() const { return sfa_; }
  const CaptionDecoder<T>& decoder() const { return decoder_; }

  std::vector<T> class_weights() const {
    return std::vector<T>(config_.class_weights.begin(), config_.class_weights.end());
  }

 private:
  ModelConfig config_;
  text::Vocabulary vocabulary_;
  nn::ParameterStore<T> store_;
  Backbone<T> backbone_;
  std::optional<ChangeDetectionBranch<T>> cd_;
  SemanticFusion<T> sfa_;
  CaptionDecoder<T> decoder_;
};

}  // namespace pix4cap::model
