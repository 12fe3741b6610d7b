#pragma once

// Caption branch: difference embedding, semantic fusion stack over the
// change-detection features, and a pre-norm transformer decoder.
//
//   X_q = W (x2 - x1) + b + cos(x1, x2)                       per position
//   full:     Z1 = X_q + MCA_1(X_q, flat(X_f^4))
//             Z2 = Z1  + MCA_2(Z1,  [flat(x1); flat(x2)])
//   baseline: Z2 = X_q + MCA_2(X_q, [flat(x1); flat(x2)])
//   out = Z2 + FFN(LN(Z2))

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "pix4cap/nn/attention.hpp"
#include "pix4cap/nn/layers.hpp"
#include "pix4cap/text/vocabulary.hpp"

namespace pix4cap::model {

using nn::Tensor;

enum class Mode { kFull, kBaseline };

inline std::string to_string(Mode m) { return m == Mode::kFull ? "full" : "baseline"; }
inline Mode parse_mode(const std::string& s) {
  if (s == "full") return Mode::kFull;
  if (s == "baseline") return Mode::kBaseline;
  throw UsageError("unknown mode '" + s + "' (expected full or baseline)");
}

// [h, w, c] -> [h*w, c]
template <class T>
Tensor<T> flatten_grid(const Tensor<T>& x) {
  if (x.shape().size() != 3) throw ShapeError("expected an [h, w, c] map, got " + nn::to_string(x.shape()));
  return nn::reshape(x, {x.dim(0) * x.dim(1), x.dim(2)});
}

// Inputs are level-4 maps [h, w, C]; output is the [h*w, C] sequence.
template <class T>
Tensor<T> diff_embed(const Tensor<T>& x_t1, const Tensor<T>& x_t2, const nn::Linear<T>& projection) {
  if (x_t1.shape() != x_t2.shape())
    throw ShapeError("diff_embed: " + nn::to_string(x_t1.shape()) + " vs " + nn::to_string(x_t2.shape()));
  const auto a = flatten_grid(x_t1), b = flatten_grid(x_t2);
  return nn::add_column(projection(nn::sub(b, a)), nn::cosine_rows(a, b));
}

template <class T>
struct SfaTrace {
  Tensor<T> query, z1, z2;
  std::vector<Tensor<T>> attention;  // heads of the first stage (full only), then the second
};

template <class T>
class SemanticFusion {
 public:
  SemanticFusion(nn::ParameterStore<T>& store, Mode mode, int width, int heads, int ffn_width)
      : mode_(mode),
        projection_(store, "sfa.diff_proj", width, width),
        second_(store, "sfa.mca2", width, heads),
        norm_(store, "sfa.norm", width),
        ffn_(store, "sfa.ffn", width, ffn_width) {
    if (mode == Mode::kFull) first_ = nn::MultiHeadCrossAttention<T>(store, "sfa.mca1", width, heads);
  }

  // x_f4 must be given in full mode and absent in baseline mode.
  Tensor<T> operator()(const Tensor<T>& x_t1, const Tensor<T>& x_t2, const std::optional<Tensor<T>>& x_f4,
                       SfaTrace<T>* trace = nullptr) const {
    if (mode_ == Mode::kBaseline && x_f4) throw UsageError("baseline fusion does not take change features");
    if (mode_ == Mode::kFull && !x_f4) throw UsageError("full fusion requires the last fused change features");
    if (x_f4 && x_f4->shape() != x_t1.shape())
      throw ShapeError("fused level-4 map " + nn::to_string(x_f4->shape()) + " vs " + nn::to_string(x_t1.shape()));

    std::vector<Tensor<T>> maps, *maps_ptr = trace ? &maps : nullptr;
    auto query = diff_embed(x_t1, x_t2, projection_);
    auto z = query;
    Tensor<T> z1;
    if (mode_ == Mode::kFull) {
      z1 = nn::add(query, first_(query, flatten_grid(*x_f4), nullptr, maps_ptr));
      z = z1;
      if (trace) trace->attention = maps;
    }
    const auto context = nn::concat_rows(flatten_grid(x_t1), flatten_grid(x_t2));
    auto z2 = nn::add(z, second_(z, context, nullptr, maps_ptr));
    if (trace) {
      trace->attention.insert(trace->attention.end(), maps.begin(), maps.end());
      trace->query = query;
      trace->z1 = z1;
      trace->z2 = z2;
    }
    return nn::add(z2, ffn_(norm_(z2)));
  }

  Mode mode() const { return mode_; }
  const nn::MultiHeadCrossAttention<T>& first_attention() const { return first_; }
  const nn::MultiHeadCrossAttention<T>& second_attention() const { return second_; }
  const nn::Linear<T>& projection() const { return projection_; }

 private:
  Mode mode_;
  nn::Linear<T> projection_;
  nn::MultiHeadCrossAttention<T> first_;  // empty in baseline mode
  nn::MultiHeadCrossAttention<T> second_;
  nn::LayerNorm<T> norm_;
  nn::FeedForward<T> ffn_;
};

// PE[t, 2i] = sin(t / 10000^(2i/D)), PE[t, 2i+1] = cos(same)
template <class T>
std::vector<T> sinusoidal_positions(int length, int width) {
  std::vector<T> pe(static_cast<std::size_t>(length) * width);
  for (int t = 0; t < length; ++t)
    for (int c = 0; c < width; ++c) {
      const double rate = std::pow(10000.0, -static_cast<double>(c - c % 2) / width);
      pe[static_cast<std::size_t>(t) * width + c] =
          static_cast<T>(c % 2 == 0 ? std::sin(t * rate) : std::cos(t * rate));
    }
  return pe;
}

struct DecoderConfig {
  int vocab_size = 0;
  int width = 0;
  int heads = 4;
  int ffn_width = 0;
  int layers = 1;
  int max_len = 20;
  int visual_length = 0;  // S, the level-4 grid size
};

template <class T>
struct DecoderTrace {
  std::vector<Tensor<T>> attention;  // every head of every self and cross attention
};

// Pre-norm decoder. A final residual adds the embedding stream to the stack
// output before the vocabulary projection.
template <class T>
class CaptionDecoder {
 public:
  CaptionDecoder(nn::ParameterStore<T>& store, const DecoderConfig& config) : config_(config) {
    if (config.vocab_size <= 4) throw UsageError("vocabulary must contain words beyond the specials");
    if (config.layers < 1 || config.max_len < 2 || config.visual_length < 1)
      throw UsageError("decoder needs at least one layer, max_len >= 2 and a visual sequence");
    token_embedding_ = store.weight("decoder.token_embedding", {config.vocab_size, config.width}, config.width);
    visual_position_ = store.weight("decoder.visual_position", {config.visual_length, config.width}, config.width);
    for (int i = 0; i < config.layers; ++i) {
      const std::string name = "decoder.layer" + std::to_string(i + 1);
      Layer layer;
      layer.norm1 = nn::LayerNorm<T>(store, name + ".norm1", config.width);
      layer.self_attention = nn::MultiHeadCrossAttention<T>(store, name + ".self_attn", config.width, config.heads);
      layer.norm2 = nn::LayerNorm<T>(store, name + ".norm2", config.width);
      layer.cross_attention = nn::MultiHeadCrossAttention<T>(store, name + ".cross_attn", config.width, config.heads);
      layer.norm3 = nn::LayerNorm<T>(store, name + ".norm3", config.width);
      layer.ffn = nn::FeedForward<T>(store, name + ".ffn", config.width, config.ffn_width);
      layers_.push_back(layer);
    }
    final_norm_ = nn::LayerNorm<T>(store, "decoder.final_norm", config.width);
    output_ = nn::Linear<T>(store, "decoder.output", config.width, config.vocab_size);
  }

  // visual: [S, D]; tokens: [L] with L <= max_len. Returns logits [L, V].
  Tensor<T> operator()(const Tensor<T>& visual, const text::TokenSequence& tokens,
                       DecoderTrace<T>* trace = nullptr) const {
    const int length = static_cast<int>(tokens.size());
    if (length < 1 || length > config_.max_len)
      throw ShapeError("decoder input has " + std::to_string(length) + " tokens; allowed 1.." +
                       std::to_string(config_.max_len));
    if (visual.rows() != config_.visual_length || visual.cols() != config_.width)
      throw ShapeError("visual embedding " + nn::to_string(visual.shape()) + " does not match [" +
                       std::to_string(config_.visual_length) + "x" + std::to_string(config_.width) + "]");
    for (int t : tokens)
      if (t < 0 || t >= config_.vocab_size)
        throw ShapeError("token id " + std::to_string(t) + " outside vocabulary of size " +
                         std::to_string(config_.vocab_size));

    const auto positions =
        Tensor<T>::constant({length, config_.width}, sinusoidal_positions<T>(length, config_.width));
    const auto embedded = nn::add(nn::embedding(token_embedding_, tokens), positions);
    const auto memory = nn::add(visual, visual_position_);
    const auto mask = nn::causal_mask<T>(length);
    std::vector<Tensor<T>> maps, *maps_ptr = trace ? &maps : nullptr;
    const auto keep = [&] {
      if (trace) trace->attention.insert(trace->attention.end(), maps.begin(), maps.end());
    };

    auto x = embedded;
    for (const auto& layer : layers_) {
      const auto h = layer.norm1(x);
      x = nn::add(x, layer.self_attention(h, h, &mask, maps_ptr));
      keep();
      x = nn::add(x, layer.cross_attention(layer.norm2(x), memory, nullptr, maps_ptr));
      keep();
      x = nn::add(x, layer.ffn(layer.norm3(x)));
    }
    return output_(nn::add(final_norm_(x), embedded));
  }

  const DecoderConfig& config() const { return config_; }

 private:
  struct Layer {
    nn::LayerNorm<T> norm1, norm2, norm3;
    nn::MultiHeadCrossAttention<T> self_attention, cross_attention;
    nn::FeedForward<T> ffn;
  };
  DecoderConfig config_;
  Tensor<T> token_embedding_;   // [V, D]
  Tensor<T> visual_position_;   // [S, D]
  std::vector<Layer> layers_;
  nn::LayerNorm<T> final_norm_;
  nn::Linear<T> output_;
};

// Summed token cross-entropy; PAD targets are skipped.
template <class T>
Tensor<T> caption_loss(const Tensor<T>& logits, const text::TokenSequence& targets) {
  if (logits.rows() != static_cast<int>(targets.size()))
    throw ShapeError("caption_loss: " + std::to_string(targets.size()) + " targets for " +
                     nn::to_string(logits.shape()) + " logits");
  return nn::cross_entropy(logits, targets, nn::Reduction::kSum, text::Vocabulary::kPad);
}

// Teacher-forcing pair for a full [START .. END] sequence.
struct ShiftedTokens {
  text::TokenSequence input, target;
};
inline ShiftedTokens shift_tokens(const text::TokenSequence& sequence) {
  if (sequence.size() < 2) throw ShapeError("a caption sequence needs START and END");
  return {text::TokenSequence(sequence.begin(), sequence.end() - 1),
          text::TokenSequence(sequence.begin() + 1, sequence.end())};
}

}  // namespace pix4cap::model
