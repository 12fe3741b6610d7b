#pragma once

// Joint training (w_det * L_det + w_cap * L_cap), caption generation and
// evaluation.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "pix4cap/core/rng.hpp"
#include "pix4cap/data/dataset.hpp"
#include "pix4cap/metrics/metrics.hpp"
#include "pix4cap/model/pix4cap.hpp"
#include "pix4cap/nn/adam.hpp"
#include "pix4cap/nn/checkpoint.hpp"

namespace pix4cap::train {

using model::Mode;
using nn::Tensor;

enum class CaptionSampling { kAll, kFirst };

struct LossWeights {
  double det = 1.0;
  double cap = 1.0;
};

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 8;
  int epochs = 10;
  std::uint64_t seed = 0;
  LossWeights loss_weights;
  // all: per-sample caption loss averaged over the 5 references;
  // first: reference 0 only.
  CaptionSampling caption_sampling = CaptionSampling::kAll;
  int val_beam = 1;
};

inline void validate(const TrainConfig& c) {
  if (!(c.learning_rate >= 0) || !std::isfinite(c.learning_rate)) throw UsageError("learning_rate must be >= 0");
  if (c.batch_size < 1) throw UsageError("batch_size must be positive");
  if (c.epochs < 0) throw UsageError("epochs must be non-negative");
  if (c.val_beam < 1 || c.val_beam > 5) throw UsageError("val_beam must lie in 1..5");
  if (c.loss_weights.det < 0 || c.loss_weights.cap < 0) throw UsageError("loss weights must be non-negative");
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"seed", c.seed},
          {"loss_weights", {c.loss_weights.det, c.loss_weights.cap}},
          {"caption_sampling", c.caption_sampling == CaptionSampling::kAll ? "all" : "first"},
          {"val_beam", c.val_beam}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  model::reject_unknown_keys(
      j, {"learning_rate", "batch_size", "epochs", "seed", "loss_weights", "caption_sampling", "val_beam"},
      "train config");
  try {
    if (j.contains("learning_rate")) c.learning_rate = j["learning_rate"].get<double>();
    if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<int>();
    if (j.contains("epochs")) c.epochs = j["epochs"].get<int>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("loss_weights")) {
      const auto w = j["loss_weights"].get<std::vector<double>>();
      if (w.size() != 2) throw UsageError("loss_weights needs [w_det, w_cap]");
      c.loss_weights = {w[0], w[1]};
    }
    if (j.contains("caption_sampling")) {
      const auto s = j["caption_sampling"].get<std::string>();
      if (s != "all" && s != "first") throw UsageError("caption_sampling must be all or first");
      c.caption_sampling = s == "all" ? CaptionSampling::kAll : CaptionSampling::kFirst;
    }
    if (j.contains("val_beam")) c.val_beam = j["val_beam"].get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("train config: ") + e.what());
  }
  validate(c);
  return c;
}

// ---------------------------------------------------------------- losses

// Baseline mode passes no detection loss.
inline double total_loss(std::optional<double> l_det, double l_cap, const LossWeights& w = {}) {
  return (l_det ? w.det * *l_det : 0.0) + w.cap * l_cap;
}

template <class T>
Tensor<T> total_loss(const Tensor<T>& l_det, const Tensor<T>& l_cap, const LossWeights& w = {}) {
  const auto cap = nn::scale(l_cap, static_cast<T>(w.cap));
  return l_det.defined() ? nn::add(nn::scale(l_det, static_cast<T>(w.det)), cap) : cap;
}

// Tokenized references of one sample, each [START .. END].
struct PreparedSample {
  const data::BiTemporalSample* sample = nullptr;
  std::vector<text::TokenSequence> references;
};

inline std::vector<PreparedSample> prepare(const std::vector<const data::BiTemporalSample*>& samples,
                                           const text::Vocabulary& vocab, int max_len) {
  std::vector<PreparedSample> out;
  for (const auto* s : samples) {
    PreparedSample p{s, {}};
    for (const auto& c : s->captions) p.references.push_back(vocab.encode(c, max_len));
    out.push_back(std::move(p));
  }
  return out;
}

template <class T>
struct SampleLosses {
  Tensor<T> det;  // undefined in baseline mode
  Tensor<T> cap;
  Tensor<T> total;
};

template <class T>
SampleLosses<T> sample_losses(const model::Pix4CapModel<T>& net, const PreparedSample& p, const TrainConfig& config) {
  const auto enc = net.encode(p.sample->pre, p.sample->post);
  SampleLosses<T> out;
  if (enc.cd_logits.defined()) out.det = model::detection_loss(enc.cd_logits, p.sample->pseudo_mask, net.class_weights());
  const std::size_t refs = config.caption_sampling == CaptionSampling::kAll ? p.references.size() : 1;
  Tensor<T> cap;
  for (std::size_t r = 0; r < refs; ++r) {
    const auto shifted = model::shift_tokens(p.references[r]);
    const auto l = model::caption_loss(net.decode(enc.visual, shifted.input), shifted.target);
    cap = cap.defined() ? nn::add(cap, l) : l;
  }
  out.cap = refs > 1 ? nn::scale(cap, static_cast<T>(1.0 / static_cast<double>(refs))) : cap;
  out.total = total_loss(out.det, out.cap, config.loss_weights);
  return out;
}

// ------------------------------------------------------------- generation

struct Strategy {
  int beam = 1;  // 1 = greedy
  static Strategy greedy() { return {1}; }
  static Strategy beam_search(int k) { return {k}; }
};

namespace detail {

template <class T>
std::vector<double> last_log_probs(const model::Pix4CapModel<T>& net, const Tensor<T>& visual,
                                   const text::TokenSequence& prefix) {
  const auto logits = net.decode(visual, prefix);
  const int v = logits.cols();
  const auto row = logits.values().subspan(static_cast<std::size_t>(logits.rows() - 1) * v, v);
  double mx = -std::numeric_limits<double>::infinity();
  for (T x : row) mx = std::max(mx, static_cast<double>(x));
  double z = 0;
  for (T x : row) z += std::exp(static_cast<double>(x) - mx);
  const double log_z = mx + std::log(z);
  std::vector<double> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = static_cast<double>(row[i]) - log_z;
  return out;
}

}  // namespace detail

// Generated words without START; ends with END unless the max_len cap hit
// first. Beam scores are summed log-probabilities without length
// normalization; ties go to the earlier beam, then the lower token id, so a
// beam of 1 is exactly greedy.
template <class T>
text::TokenSequence generate_caption(const model::Pix4CapModel<T>& net, const Tensor<T>& visual,
                                     Strategy strategy = Strategy::greedy()) {
  if (strategy.beam < 1 || strategy.beam > 5) throw UsageError("beam size must lie in 1..5");
  const int max_len = net.config().max_len;
  struct Beam {
    text::TokenSequence tokens;  // starts with START
    double score = 0;
    bool done = false;
  };
  std::vector<Beam> beams{{{text::Vocabulary::kStart}, 0.0, false}};
  for (int step = 0; step < max_len; ++step) {
    struct Candidate {
      double score;
      int beam, token;  // token -1 carries a finished beam
    };
    std::vector<Candidate> pool;
    for (int b = 0; b < static_cast<int>(beams.size()); ++b) {
      if (beams[b].done) {
        pool.push_back({beams[b].score, b, -1});
        continue;
      }
      const auto lp = detail::last_log_probs(net, visual, beams[b].tokens);
      for (int t = 0; t < static_cast<int>(lp.size()); ++t) pool.push_back({beams[b].score + lp[t], b, t});
    }
    std::stable_sort(pool.begin(), pool.end(), [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
    std::vector<Beam> next;
    for (const auto& c : pool) {
      if (static_cast<int>(next.size()) == strategy.beam) break;
      Beam nb = beams[c.beam];
      if (c.token >= 0) {
        nb.tokens.push_back(c.token);
        nb.score = c.score;
        nb.done = c.token == text::Vocabulary::kEnd;
      }
      next.push_back(std::move(nb));
    }
    beams = std::move(next);
    if (std::all_of(beams.begin(), beams.end(), [](const Beam& b) { return b.done; })) break;
  }
  // beams are sorted by score; the first is the best
  return text::TokenSequence(beams.front().tokens.begin() + 1, beams.front().tokens.end());
}

// ------------------------------------------------------------- evaluation

struct EvalResult {
  metrics::MetricReport report;
  std::vector<std::string> ids;
  std::vector<std::string> captions;
  double pixel_accuracy = std::numeric_limits<double>::quiet_NaN();  // full mode only
  double token_accuracy = 0;  // teacher-forced over the sampled references
};

template <class T>
EvalResult evaluate(const model::Pix4CapModel<T>& net, const std::vector<const data::BiTemporalSample*>& samples,
                    Strategy strategy = Strategy::greedy(), CaptionSampling sampling = CaptionSampling::kAll) {
  EvalResult out;
  std::vector<metrics::EvalPair> corpus;
  std::size_t pixels = 0, pixels_right = 0, tokens = 0, tokens_right = 0;
  const auto& vocab = net.vocabulary();
  for (const auto* s : samples) {
    const auto enc = net.encode(s->pre, s->post);
    const auto words = vocab.decode(generate_caption(net, enc.visual, strategy));
    out.ids.push_back(s->id);
    out.captions.push_back(text::join(words));
    metrics::EvalPair pair{words, {}};
    for (const auto& c : s->captions) pair.references.push_back(text::tokenize(c));
    corpus.push_back(std::move(pair));
    if (enc.cd_logits.defined()) {
      const auto predicted = model::predict_mask(enc.cd_logits);
      for (std::size_t i = 0; i < predicted.values.size(); ++i)
        pixels_right += predicted.values[i] == s->pseudo_mask.values[i];
      pixels += predicted.values.size();
    }
    const std::size_t refs = sampling == CaptionSampling::kAll ? s->captions.size() : 1;
    for (std::size_t r = 0; r < refs; ++r) {
      const auto shifted = model::shift_tokens(vocab.encode(s->captions[r], net.config().max_len));
      const auto logits = net.decode(enc.visual, shifted.input);
      const int v = logits.cols();
      for (int t = 0; t < logits.rows(); ++t) {
        const auto row = logits.values().subspan(static_cast<std::size_t>(t) * v, v);
        const int arg = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
        if (shifted.target[t] == text::Vocabulary::kPad) continue;
        tokens_right += arg == shifted.target[t];
        ++tokens;
      }
    }
  }
  out.report = metrics::evaluate_corpus(corpus);
  if (pixels) out.pixel_accuracy = static_cast<double>(pixels_right) / pixels;
  if (tokens) out.token_accuracy = static_cast<double>(tokens_right) / tokens;
  return out;
}

// --------------------------------------------------------------- training

struct EpochRecord {
  int epoch = 0;
  std::optional<double> l_det;
  double l_cap = 0;
  double l_total = 0;
  std::optional<metrics::MetricReport> val;
};

inline nlohmann::json to_json(const EpochRecord& r) {
  nlohmann::json j{{"epoch", r.epoch}, {"l_cap", r.l_cap}, {"l_total", r.l_total}};
  j["l_det"] = r.l_det ? nlohmann::json(*r.l_det) : nlohmann::json(nullptr);
  j["val_metrics"] = r.val ? metrics::to_json(*r.val) : nlohmann::json(nullptr);
  return j;
}

struct TrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = 0;  // 0 = initial parameters (no epochs run)
  double best_val_s_star_m = std::numeric_limits<double>::quiet_NaN();
};

// Trains in place. With a non-empty validation split the parameters of the
// epoch with the best validation S*_m are restored at the end (earliest on
// ties); otherwise the last epoch is kept.
template <class T>
TrainResult train(model::Pix4CapModel<T>& net, const std::vector<const data::BiTemporalSample*>& train_split,
                  const std::vector<const data::BiTemporalSample*>& val_split, const TrainConfig& config,
                  const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  validate(config);
  if (train_split.empty()) throw DataError("the train split is empty");
  const auto prepared = prepare(train_split, net.vocabulary(), net.config().max_len);
  auto& store = net.store();
  nn::Adam<T> adam(nn::AdamConfig{config.learning_rate});
  const bool full = net.config().mode == Mode::kFull;

  TrainResult result;
  std::vector<std::vector<T>> best;
  const auto snapshot = [&] {
    best.clear();
    for (const auto& p : store.all()) best.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  };

  std::vector<std::size_t> order(prepared.size());
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(config.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);

    double sum_det = 0, sum_cap = 0, sum_total = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      const T inv_batch = static_cast<T>(1.0 / static_cast<double>(end - start));
      store.zero_grad();
      for (std::size_t i = start; i < end; ++i) {
        const auto& p = prepared[order[i]];
        const auto losses = sample_losses(net, p, config);
        const double total = losses.total.item();
        if (!std::isfinite(total))
          throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + " on sample '" + p.sample->id +
                                "' (L_total = " + std::to_string(total) + ")");
        if (losses.det.defined()) sum_det += losses.det.item();
        sum_cap += losses.cap.item();
        sum_total += total;
        nn::backward(nn::scale(losses.total, inv_batch));
      }
      adam.step(store);
    }
    const double n = static_cast<double>(prepared.size());
    EpochRecord record;
    record.epoch = epoch;
    if (full) record.l_det = sum_det / n;
    record.l_cap = sum_cap / n;
    record.l_total = sum_total / n;
    if (!val_split.empty()) {
      record.val = evaluate(net, val_split, Strategy{config.val_beam}).report;
      if (!(record.val->s_star_m <= result.best_val_s_star_m)) {  // NaN start counts as improvement
        result.best_val_s_star_m = record.val->s_star_m;
        result.best_epoch = epoch;
        snapshot();
      }
    } else {
      result.best_epoch = epoch;
    }
    result.history.push_back(record);
    if (on_epoch) on_epoch(record);
  }
  if (!best.empty()) {
    auto& params = store.all();
    for (std::size_t p = 0; p < params.size(); ++p) {
      Tensor<T> t = params[p].tensor;
      std::copy(best[p].begin(), best[p].end(), t.mutable_values().begin());
    }
  }
  return result;
}

// ------------------------------------------------------------ checkpoints

inline std::string checkpoint_config_text(const model::ModelConfig& m, const TrainConfig& t,
                                          const text::Vocabulary& vocab) {
  return nlohmann::json{{"model", model::to_json(m)}, {"train", to_json(t)}, {"vocabulary", vocab.words()}}.dump();
}

template <class T>
void save_model(const std::string& path, const model::Pix4CapModel<T>& net, const TrainConfig& t) {
  nn::save_checkpoint(path, net.store(), checkpoint_config_text(net.config(), t, net.vocabulary()));
}

template <class T>
struct LoadedModel {
  std::unique_ptr<model::Pix4CapModel<T>> net;
  TrainConfig train;
};

template <class T>
LoadedModel<T> load_model(const std::string& path) {
  const auto data = nn::read_checkpoint(path);
  nlohmann::json cfg;
  try {
    cfg = nlohmann::json::parse(data.config);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": embedded config is not JSON: " + e.what());
  }
  if (!cfg.contains("model") || !cfg.contains("train") || !cfg.contains("vocabulary"))
    throw DataError(path + ": embedded config lacks model, train or vocabulary");
  LoadedModel<T> out;
  const auto m = model::model_config_from_json(cfg["model"]);
  out.train = train_config_from_json(cfg["train"]);
  const auto vocab = text::Vocabulary::from_words(cfg["vocabulary"].get<std::vector<std::string>>());
  out.net = std::make_unique<model::Pix4CapModel<T>>(m, vocab, out.train.seed);
  nn::load_parameters(data, out.net->store());
  return out;
}

}  // namespace pix4cap::train
