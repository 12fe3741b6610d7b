#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "pix4cap/train/trainer.hpp"

namespace pix4cap::train {
namespace {

using model::ModelConfig;
using model::Pix4CapModel;

// 200 single-sample Adam steps at the default 1e-4 do not move the default
// model far enough; memorization needs a larger step.
constexpr double kOverfitLearningRate = 1e-3;

std::vector<data::BiTemporalSample> tiny_dataset(int pairs, std::uint64_t seed) {
  data::SynthConfig c;
  c.num_pairs = pairs;
  c.seed = seed;
  return data::synthesize_dataset(c);
}

std::vector<const data::BiTemporalSample*> pointers(const std::vector<data::BiTemporalSample>& samples) {
  std::vector<const data::BiTemporalSample*> out;
  for (const auto& s : samples) out.push_back(&s);
  return out;
}

text::Vocabulary vocab_of(const std::vector<data::BiTemporalSample>& samples) {
  std::vector<std::string> sentences;
  for (const auto& s : samples) sentences.insert(sentences.end(), s.captions.begin(), s.captions.end());
  return text::Vocabulary::build(sentences);
}

ModelConfig small_config(Mode mode) {
  ModelConfig c;
  c.mode = mode;
  c.widths = {4, 8, 8, 16};
  c.max_len = 12;
  return c;
}

std::vector<std::vector<float>> parameter_values(const nn::ParameterStore<float>& store) {
  std::vector<std::vector<float>> out;
  for (const auto& p : store.all()) out.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

TEST(TotalLoss, WeightedSum) {
  EXPECT_DOUBLE_EQ(total_loss(0.5, 1.5), 2.0);
  for (double x : {0.0, 0.3, 7.25}) EXPECT_DOUBLE_EQ(total_loss(x, 0.0), x);
  EXPECT_DOUBLE_EQ(total_loss(std::nullopt, 0.7), 0.7);
  EXPECT_DOUBLE_EQ(total_loss(0.5, 1.5, {2.0, 0.5}), 1.75);
  EXPECT_DOUBLE_EQ(total_loss(std::nullopt, 0.7, {2.0, 0.5}), 0.35);
}

TEST(TotalLoss, TensorFormMatchesScalarForm) {
  const auto det = nn::Tensor<double>::constant({1}, {0.25});
  const auto cap = nn::Tensor<double>::constant({1}, {1.5});
  EXPECT_DOUBLE_EQ(total_loss(det, cap, {3.0, 2.0}).item(), total_loss(0.25, 1.5, {3.0, 2.0}));
  EXPECT_DOUBLE_EQ(total_loss(nn::Tensor<double>(), cap).item(), 1.5);
}

TEST(TrainConfig, JsonRoundTripAndValidation) {
  TrainConfig c;
  c.learning_rate = 3e-4;
  c.epochs = 7;
  c.seed = 42;
  c.loss_weights = {0.5, 2.0};
  c.caption_sampling = CaptionSampling::kFirst;
  EXPECT_EQ(to_json(train_config_from_json(to_json(c))), to_json(c));
  EXPECT_THROW(train_config_from_json({{"lr", 1.0}}), UsageError);
  EXPECT_THROW(train_config_from_json({{"batch_size", 0}}), UsageError);
  EXPECT_THROW(train_config_from_json({{"caption_sampling", "some"}}), UsageError);
  EXPECT_THROW(train_config_from_json({{"loss_weights", {1.0}}}), UsageError);
}

// Element-wise update equations written out independently of nn::Adam.
TEST(Adam, MatchesReferenceUpdateOnScalarQuadratic) {
  nn::ParameterStore<double> store;
  auto x = store.add("x", {1}, {3.0});
  const double a = 2.5, target = -1.0, lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  nn::Adam<double> adam(nn::AdamConfig{lr, b1, b2, eps});
  double ref = 3.0, m = 0, v = 0;
  for (int t = 1; t <= 100; ++t) {
    store.zero_grad();
    const auto diff = nn::add(x, nn::Tensor<double>::constant({1}, {-target}));
    nn::backward(nn::scale(nn::mul(diff, diff), a / 2));  // a/2 (x - target)^2
    adam.step(store);

    const double g = a * (ref - target);
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double m_hat = m / (1 - std::pow(b1, t));
    const double v_hat = v / (1 - std::pow(b2, t));
    ref -= lr * m_hat / (std::sqrt(v_hat) + eps);
    ASSERT_NEAR(x.item(), ref, 1e-10) << "step " << t;
  }
}

TEST(Train, ZeroLearningRateLeavesParametersBitIdentical) {
  const auto samples = tiny_dataset(3, 5);
  Pix4CapModel<float> net(small_config(Mode::kFull), vocab_of(samples), 3);
  const auto before = parameter_values(net.store());
  TrainConfig c;
  c.learning_rate = 0;
  c.epochs = 2;
  c.batch_size = 2;
  train(net, pointers(samples), {}, c);
  EXPECT_EQ(parameter_values(net.store()), before);
}

TEST(Train, SameSeedGivesIdenticalHistoryAndWeights) {
  const auto samples = tiny_dataset(4, 6);
  TrainConfig c;
  c.learning_rate = 1e-3;
  c.epochs = 2;
  c.batch_size = 3;
  c.seed = 9;
  const auto run = [&] {
    Pix4CapModel<float> net(small_config(Mode::kFull), vocab_of(samples), c.seed);
    auto result = train(net, pointers(samples), {}, c);
    return std::make_pair(to_json(result.history.back()).dump(), parameter_values(net.store()));
  };
  const auto first = run();
  const auto second = run();
  EXPECT_EQ(first.first, second.first);
  EXPECT_EQ(first.second, second.second);
}

TEST(Train, BaselineRecordsNoDetectionLoss) {
  const auto samples = tiny_dataset(2, 7);
  Pix4CapModel<float> net(small_config(Mode::kBaseline), vocab_of(samples), 1);
  TrainConfig c;
  c.epochs = 1;
  const auto result = train(net, pointers(samples), {}, c);
  ASSERT_EQ(result.history.size(), 1U);
  EXPECT_FALSE(result.history[0].l_det.has_value());
  EXPECT_DOUBLE_EQ(result.history[0].l_total, result.history[0].l_cap);
  EXPECT_TRUE(to_json(result.history[0])["l_det"].is_null());
}

TEST(Train, ValidationSelectsBestEpochAndRestoresIt) {
  const auto samples = tiny_dataset(4, 8);
  const auto all = pointers(samples);
  Pix4CapModel<float> net(small_config(Mode::kFull), vocab_of(samples), 2);
  TrainConfig c;
  c.learning_rate = 1e-2;
  c.epochs = 3;
  c.batch_size = 2;
  std::vector<std::vector<std::vector<float>>> snapshots;
  const auto result = train(net, {all[0], all[1]}, {all[2], all[3]}, c,
                            [&](const EpochRecord&) { snapshots.push_back(parameter_values(net.store())); });
  ASSERT_EQ(result.history.size(), 3U);
  int best = 1;
  for (int e = 1; e <= 3; ++e) {
    ASSERT_TRUE(result.history[e - 1].val.has_value());
    if (result.history[e - 1].val->s_star_m > result.history[best - 1].val->s_star_m) best = e;
  }
  EXPECT_EQ(result.best_epoch, best);
  EXPECT_EQ(parameter_values(net.store()), snapshots[static_cast<std::size_t>(best - 1)]);
}

TEST(Train, NonFiniteLossAborts) {
  const auto samples = tiny_dataset(1, 9);
  Pix4CapModel<float> net(small_config(Mode::kFull), vocab_of(samples), 1);
  auto w = net.store().all().front().tensor;
  w.mutable_values()[0] = std::numeric_limits<float>::quiet_NaN();
  TrainConfig c;
  c.epochs = 1;
  try {
    train(net, pointers(samples), {}, c);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 1"), std::string::npos) << e.what();
  }
  EXPECT_THROW(train(net, {}, {}, c), DataError);
}

bool has_nonzero(std::span<const float> grad) {
  return std::any_of(grad.begin(), grad.end(), [](float g) { return g != 0.0f; });
}

TEST(GradientFlow, EveryParameterReceivesGradientInFullMode) {
  data::SceneSpec spec;
  spec.objects.push_back({data::ObjectKind::kBuilding, data::ChangeEvent::kAppear, {2, 3, 4, 5}});
  spec.objects.push_back({data::ObjectKind::kRoad, data::ChangeEvent::kDisappear, {10, 0, 2, 16}});
  const auto sample = data::generate_scene(spec, 1, {});
  const std::vector<data::BiTemporalSample> samples{sample};
  Pix4CapModel<float> net(small_config(Mode::kFull), vocab_of(samples), 4);
  const auto prepared = prepare(pointers(samples), net.vocabulary(), net.config().max_len);
  net.store().zero_grad();
  nn::backward(sample_losses(net, prepared[0], TrainConfig{}).total);
  for (const auto& p : net.store().all()) EXPECT_TRUE(has_nonzero(p.tensor.grad())) << p.name;
}

TEST(GradientFlow, BaselineHasNoChangeBranchAndAllItsParametersTrain) {
  const auto samples = tiny_dataset(1, 10);
  Pix4CapModel<float> net(small_config(Mode::kBaseline), vocab_of(samples), 4);
  const auto prepared = prepare(pointers(samples), net.vocabulary(), net.config().max_len);
  nn::backward(sample_losses(net, prepared[0], TrainConfig{}).total);
  for (const auto& p : net.store().all()) {
    EXPECT_NE(p.name.rfind("cd.", 0), 0U) << p.name;
    EXPECT_NE(p.name.rfind("sfa.mca1", 0), 0U) << p.name;
    EXPECT_TRUE(has_nonzero(p.tensor.grad())) << p.name;
  }
}

// Plain argmax decoding, lowest id on ties.
text::TokenSequence greedy_oracle(const Pix4CapModel<float>& net, const nn::Tensor<float>& visual) {
  text::TokenSequence seq{text::Vocabulary::kStart};
  while (static_cast<int>(seq.size()) <= net.config().max_len) {
    const auto logits = net.decode(visual, seq);
    const int v = logits.cols();
    const auto row = logits.values().subspan(static_cast<std::size_t>(logits.rows() - 1) * v, v);
    const int arg = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    seq.push_back(arg);
    if (arg == text::Vocabulary::kEnd) break;
  }
  return text::TokenSequence(seq.begin() + 1, seq.end());
}

TEST(Generate, BeamOfOneEqualsGreedyAndOutputsTerminate) {
  const auto samples = tiny_dataset(20, 11);
  auto config = small_config(Mode::kFull);
  config.max_len = 8;
  Pix4CapModel<float> net(config, vocab_of(samples), 5);
  // A few steps so END becomes reachable instead of a flat distribution.
  TrainConfig c;
  c.learning_rate = 1e-2;
  c.epochs = 2;
  c.caption_sampling = CaptionSampling::kFirst;
  train(net, pointers(samples), {}, c);
  int ended = 0;
  for (const auto& s : samples) {
    const auto visual = net.encode(s.pre, s.post).visual;
    const auto greedy = generate_caption(net, visual, Strategy::greedy());
    EXPECT_EQ(greedy, greedy_oracle(net, visual)) << s.id;
    EXPECT_EQ(generate_caption(net, visual, Strategy::beam_search(1)), greedy) << s.id;
    for (int k = 1; k <= 5; ++k) {
      const auto out = generate_caption(net, visual, Strategy::beam_search(k));
      EXPECT_LE(static_cast<int>(out.size()), config.max_len) << s.id << " beam " << k;
      EXPECT_FALSE(out.empty());
      const auto end_at = std::find(out.begin(), out.end(), text::Vocabulary::kEnd);
      EXPECT_TRUE(end_at == out.end() || end_at == out.end() - 1) << "tokens after END";
    }
    ended += !greedy.empty() && greedy.back() == text::Vocabulary::kEnd;
  }
  EXPECT_THROW(generate_caption(net, net.encode(samples[0].pre, samples[0].post).visual, Strategy::beam_search(6)),
               UsageError);
  RecordProperty("greedy_captions_ending_with_end", ended);
}

// Sequence score of a caption under teacher forcing, in the beam's units.
double sequence_log_prob(const Pix4CapModel<float>& net, const nn::Tensor<float>& visual,
                         const text::TokenSequence& generated) {
  text::TokenSequence prefix{text::Vocabulary::kStart};
  double total = 0;
  for (int token : generated) {
    const auto logits = net.decode(visual, prefix);
    const int v = logits.cols();
    const auto row = logits.values().subspan(static_cast<std::size_t>(logits.rows() - 1) * v, v);
    double mx = -1e300, z = 0;
    for (float x : row) mx = std::max(mx, static_cast<double>(x));
    for (float x : row) z += std::exp(x - mx);
    total += row[token] - mx - std::log(z);
    prefix.push_back(token);
  }
  return total;
}

TEST(Generate, WiderBeamNeverScoresBelowGreedyWhenBothFinish) {
  const auto samples = tiny_dataset(6, 12);
  auto config = small_config(Mode::kBaseline);
  config.max_len = 6;
  Pix4CapModel<float> net(config, vocab_of(samples), 6);
  for (const auto& s : samples) {
    const auto visual = net.encode(s.pre, s.post).visual;
    const auto greedy = generate_caption(net, visual, Strategy::greedy());
    const auto beam = generate_caption(net, visual, Strategy::beam_search(4));
    const auto finished = [](const text::TokenSequence& t) { return !t.empty() && t.back() == text::Vocabulary::kEnd; };
    // Without length normalization the returned beam is the best-scoring
    // survivor; when both are complete sequences it cannot lose to greedy.
    if (finished(greedy) && finished(beam)) {
      EXPECT_GE(sequence_log_prob(net, visual, beam), sequence_log_prob(net, visual, greedy) - 1e-9) << s.id;
    }
  }
}

TEST(Checkpoint, SaveLoadRestoresModelAndConfigs) {
  const auto samples = tiny_dataset(2, 13);
  auto config = small_config(Mode::kFull);
  Pix4CapModel<float> net(config, vocab_of(samples), 8);
  TrainConfig t;
  t.seed = 8;
  t.epochs = 1;
  t.learning_rate = 1e-3;
  train(net, pointers(samples), {}, t);
  const auto path = (std::filesystem::temp_directory_path() / "pix4cap_trainer_test.ckpt").string();
  save_model(path, net, t);
  const auto loaded = load_model<float>(path);
  EXPECT_EQ(model::to_json(loaded.net->config()), model::to_json(config));
  EXPECT_EQ(to_json(loaded.train), to_json(t));
  EXPECT_EQ(loaded.net->vocabulary(), net.vocabulary());
  EXPECT_EQ(parameter_values(loaded.net->store()), parameter_values(net.store()));
  std::filesystem::remove(path);
}

double smoothed(const std::vector<EpochRecord>& h, std::size_t i, std::size_t window) {
  double s = 0;
  for (std::size_t k = i; k < i + window; ++k) s += h[k].l_total;
  return s / static_cast<double>(window);
}

// One sample, default model: memorizing it is the minimum bar.
TEST(Overfit, OneSampleIsMemorized) {
  data::SceneSpec spec;
  spec.objects.push_back({data::ObjectKind::kBuilding, data::ChangeEvent::kAppear, {3, 4, 4, 4}});
  spec.objects.push_back({data::ObjectKind::kVegetation, data::ChangeEvent::kDisappear, {10, 9, 3, 5}});
  auto sample = data::generate_scene(spec, 3, {});
  sample.id = "overfit";
  const std::vector<data::BiTemporalSample> samples{sample};
  ModelConfig config;  // full mode, 64x64, default widths
  Pix4CapModel<float> net(config, vocab_of(samples), 1);
  TrainConfig c;
  c.learning_rate = kOverfitLearningRate;
  c.batch_size = 1;
  c.epochs = 200;
  c.caption_sampling = CaptionSampling::kFirst;
  const auto result = train(net, pointers(samples), {}, c);

  // Smoothed loss (window 5) strictly decreases over the first 20 epochs.
  for (std::size_t i = 1; i + 5 <= 20; ++i)
    EXPECT_LT(smoothed(result.history, i, 5), smoothed(result.history, i - 1, 5)) << "window at epoch " << i + 1;

  const auto eval = evaluate(net, pointers(samples), Strategy::greedy(), CaptionSampling::kFirst);
  EXPECT_GE(eval.token_accuracy, 0.99);
  EXPECT_GE(eval.pixel_accuracy, 0.98);
  EXPECT_EQ(eval.captions[0], text::join(text::tokenize(sample.captions[0])));
  EXPECT_DOUBLE_EQ(eval.report.bleu[3], 100.0);
}

}  // namespace
}  // namespace pix4cap::train
