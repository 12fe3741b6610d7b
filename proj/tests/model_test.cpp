#include <cmath>
#include <random>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "pix4cap/data/scene.hpp"
#include "pix4cap/model/pix4cap.hpp"
#include "pix4cap/nn/adam.hpp"
#include "pix4cap/nn/grad_check.hpp"

namespace pix4cap::model {
namespace {

using TD = Tensor<double>;
using nn::grad_check;
using nn::random_leaf;

std::vector<double> random_values(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

TD random_constant(nn::Shape shape, std::uint64_t seed) {
  const auto n = nn::numel(shape);
  return TD::constant(std::move(shape), random_values(n, seed));
}

std::set<const nn::Node<double>*> trainable_leaves(const TD& root) {
  std::set<const nn::Node<double>*> leaves, seen;
  std::vector<const nn::Node<double>*> stack{root.node()};
  while (!stack.empty()) {
    const auto* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    if (n->parents.empty() && n->requires_grad) leaves.insert(n);
    for (const auto& p : n->parents) stack.push_back(p.get());
  }
  return leaves;
}

void set_values(TD& t, const std::vector<double>& v) {
  auto dst = t.mutable_values();
  ASSERT_EQ(dst.size(), v.size());
  std::copy(v.begin(), v.end(), dst.begin());
}

// Every store parameter as a grad_check input.
std::vector<TD> parameters_of(const nn::ParameterStore<double>& store) {
  std::vector<TD> out;
  for (const auto& p : store.all()) out.push_back(p.tensor);
  return out;
}

void expect_all_near(std::span<const double> a, std::span<const double> b, double tol) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_NEAR(a[i], b[i], tol) << "element " << i;
}

// ---------------------------------------------------------------- backbone

TEST(Backbone, PyramidShapesFor64) {
  nn::ParameterStore<double> store(1);
  Backbone<double> backbone(store, {32, 64, 128, 256});
  const auto pyramid = backbone.extract_features(random_constant({64, 64, 3}, 2));
  const std::vector<nn::Shape> expected{{16, 16, 32}, {8, 8, 64}, {4, 4, 128}, {2, 2, 256}};
  for (int i = 0; i < kLevels; ++i) EXPECT_EQ(pyramid.levels[i].shape(), expected[i]) << "level " << i + 1;
}

TEST(Backbone, BothTemporalPathsReadTheSameParameterObjects) {
  nn::ParameterStore<double> store(1);
  Backbone<double> backbone(store, {4, 8, 8, 16});
  const auto image = random_constant({32, 32, 3}, 3);
  const auto pre = backbone.extract_features(image);
  const auto post = backbone.extract_features(image);
  for (int i = 0; i < kLevels; ++i) expect_all_near(pre.levels[i].values(), post.levels[i].values(), 0.0);

  const auto params = backbone.parameter_nodes();
  const std::set<const nn::Node<double>*> expected(params.begin(), params.end());
  EXPECT_EQ(trainable_leaves(pre.levels[3]), expected);
  EXPECT_EQ(trainable_leaves(post.levels[3]), expected);
  EXPECT_EQ(expected.size(), store.count());
}

TEST(Backbone, ZeroImageGivesZeroFeatures) {
  nn::ParameterStore<double> store(4);
  Backbone<double> backbone(store, {8, 8, 16, 16});
  const auto pyramid = backbone.extract_features(TD::zeros({64, 64, 3}));
  for (const auto& level : pyramid.levels)
    for (double v : level.values()) ASSERT_EQ(v, 0.0);
}

TEST(Backbone, ShiftByOneLevelFourStrideShiftsLevelFourByOneCell) {
  // Zero background and zero biases keep activations zero away from the
  // content. The level-4 receptive field spans about 300 px, so the image is
  // large enough that neither copy's activations ever reach the padding;
  // only the boundary column without a counterpart is skipped.
  nn::ParameterStore<double> store(5);
  Backbone<double> backbone(store, {4, 8, 8, 8});
  const int size = 448, shift = 32;
  std::vector<double> base(size * size * 3, 0.0), moved(size * size * 3, 0.0);
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> dist(0.1, 1.0);
  for (int y = 208; y < 240; ++y)
    for (int x = 192; x < 224; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = dist(rng);
        base[(y * size + x) * 3 + c] = v;
        moved[(y * size + x + shift) * 3 + c] = v;
      }
  const auto a = backbone.extract_features(TD::constant({size, size, 3}, base)).levels[3];
  const auto b = backbone.extract_features(TD::constant({size, size, 3}, moved)).levels[3];
  const int grid = size / 32, ch = a.dim(2);
  double energy = 0;
  for (int y = 0; y < grid; ++y)
    for (int x = 0; x + 1 < grid; ++x)
      for (int c = 0; c < ch; ++c) {
        const double va = a[(y * grid + x) * ch + c], vb = b[(y * grid + x + 1) * ch + c];
        energy += std::abs(va);
        ASSERT_NEAR(vb, va, 1e-9) << "cell (" << y << "," << x << ") channel " << c;
      }
  EXPECT_GT(energy, 0.0);
}

TEST(Backbone, RejectsSizesThatAreNotMultiplesOf32) {
  nn::ParameterStore<double> store(1);
  Backbone<double> backbone(store, {4, 4, 4, 4});
  try {
    backbone.extract_features(TD::zeros({48, 64, 3}));
    FAIL() << "expected a shape error";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("multiples of 32"), std::string::npos) << e.what();
  }
}

// ------------------------------------------------------------ change branch

TEST(BitemporalFuse, EqualInputsGiveZeroDifference) {
  nn::ParameterStore<double> store(1);
  ChangeDetectionBranch<double> cd(store, {4, 4, 8, 8}, 2);
  const auto x = random_constant({8, 8, 4}, 7);
  FuseTrace<double> trace;
  cd.fuse_level(0, x, x, &trace);
  for (double v : trace.difference.values()) ASSERT_EQ(v, 0.0);
}

TEST(BitemporalFuse, ShapesOfStackAndOutput) {
  nn::ParameterStore<double> store(1);
  ChangeDetectionBranch<double> cd(store, {16, 32, 64, 64}, 2);
  FuseTrace<double> trace;
  const auto out = cd.fuse_level(2, random_constant({8, 8, 64}, 1), random_constant({8, 8, 64}, 2), &trace);
  EXPECT_EQ(out.shape(), (nn::Shape{8, 8, 64}));
  EXPECT_EQ(trace.stacked.shape(), (nn::Shape{8, 8, 192}));
}

TEST(BitemporalFuse, HandSetReducerSelectsDifference) {
  const int c = 5;
  std::vector<double> w(3 * c * c, 0.0);  // [1, 1, 3c, c]
  for (int k = 0; k < c; ++k) w[(2 * c + k) * c + k] = 1.0;
  const auto weight = TD::constant({1, 1, 3 * c, c}, w);
  const auto bias = TD::zeros({c});
  const auto a = random_constant({4, 6, c}, 11), b = random_constant({4, 6, c}, 12);
  const auto out = bitemporal_fuse<double>(a, b, [&](const TD& x) { return nn::conv2d(x, weight, bias, 1, 0); });
  for (std::size_t i = 0; i < out.size(); ++i) ASSERT_NEAR(out[i], b[i] - a[i], 1e-15);
}

TEST(BitemporalFuse, DifferenceIsAntisymmetric) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto a = random_constant({3, 5, 4}, seed * 2), b = random_constant({3, 5, 4}, seed * 2 + 1);
    FuseTrace<double> ab, ba;
    const auto identity = [](const TD& x) { return x; };
    bitemporal_fuse<double>(a, b, identity, &ab);
    bitemporal_fuse<double>(b, a, identity, &ba);
    for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(ab.difference[i], -ba.difference[i]);
  }
}

TEST(BitemporalFuse, RejectsShapeMismatch) {
  const auto identity = [](const TD& x) { return x; };
  EXPECT_THROW(bitemporal_fuse<double>(TD::zeros({4, 4, 2}), TD::zeros({4, 4, 3}), identity), ShapeError);
}

FusedPyramid<double> random_fused(int image, const std::array<int, kLevels>& widths, std::uint64_t seed,
                                  bool leaves = false) {
  FusedPyramid<double> f;
  for (int i = 0; i < kLevels; ++i) {
    const int s = image / kLevelStrides[i];
    f.levels[i] = leaves ? random_leaf({s, s, widths[i]}, seed + i) : random_constant({s, s, widths[i]}, seed + i);
  }
  return f;
}

TEST(ChangeHead, LogitsMatchInputResolution) {
  const std::array<int, kLevels> widths{4, 8, 8, 8};
  nn::ParameterStore<double> store(2);
  ChangeDetectionBranch<double> cd(store, widths, 2);
  EXPECT_EQ(cd.decode(random_fused(64, widths, 3)).shape(), (nn::Shape{64, 64, 2}));

  nn::ParameterStore<double> store3(2);
  ChangeDetectionBranch<double> cd3(store3, widths, 3);
  nn::ParameterStore<double> bstore(2);
  Backbone<double> backbone(bstore, widths);
  for (auto [h, w] : std::vector<std::pair<int, int>>{{32, 32}, {64, 32}, {96, 64}}) {
    const auto pre = backbone.extract_features(random_constant({h, w, 3}, 1));
    const auto post = backbone.extract_features(random_constant({h, w, 3}, 2));
    EXPECT_EQ(cd3.decode(cd3.fuse(pre, post)).shape(), (nn::Shape{h, w, 3}));
  }
}

TEST(ChangeHead, ZeroFeaturesGiveUniformProbabilities) {
  const std::array<int, kLevels> widths{4, 8, 8, 8};
  nn::ParameterStore<double> store(2);
  ChangeDetectionBranch<double> cd(store, widths, 2);
  FusedPyramid<double> f;
  for (int i = 0; i < kLevels; ++i) f.levels[i] = TD::zeros({64 / kLevelStrides[i], 64 / kLevelStrides[i], widths[i]});
  const auto logits = cd.decode(f);
  for (double v : logits.values()) ASSERT_EQ(v, 0.0);
  const auto p = nn::softmax(nn::reshape(logits, {64 * 64, 2}));
  for (double v : p.values()) ASSERT_DOUBLE_EQ(v, 0.5);
}

TEST(ChangeHead, RejectsMismatchedPyramid) {
  nn::ParameterStore<double> store(2);
  ChangeDetectionBranch<double> cd(store, {4, 8, 8, 8}, 2);
  EXPECT_THROW(cd.decode(random_fused(64, {4, 8, 8, 16}, 1)), ShapeError);
}

TEST(ChangeHead, GradientsMatchFiniteDifferences) {
  // Level-1 grid 8x8 (32x32 image).
  const std::array<int, kLevels> widths{3, 4, 4, 4};
  nn::ParameterStore<double> store(9);
  ChangeDetectionBranch<double> cd(store, widths, 2);
  const auto fused = random_fused(32, widths, 20, true);
  auto inputs = parameters_of(store);
  for (const auto& level : fused.levels) inputs.push_back(level);
  nn::GradCheckOptions options;
  options.max_elements_per_input = 12;
  const auto report = grad_check([&](const std::vector<TD>&) { return cd.decode(fused); }, inputs, options);
  EXPECT_TRUE(report.passed()) << report.failures.size() << " failures";
  EXPECT_LT(report.max_relative_error, 1e-4);
  EXPECT_GT(report.checked, 300U);
}

TEST(DetectionLoss, ConfidentCorrectPredictionGivesZero) {
  data::Mask mask(2, 3);
  mask.values = {0, 1, 1, 0, 0, 1};
  std::vector<double> logits;
  for (auto m : mask.values) {
    logits.push_back(m == 0 ? 1000.0 : -1000.0);
    logits.push_back(m == 1 ? 1000.0 : -1000.0);
  }
  EXPECT_EQ(detection_loss(TD::constant({2, 3, 2}, logits), mask).item(), 0.0);
}

TEST(DetectionLoss, UniformPredictionGivesLn2) {
  data::Mask mask(4, 4);
  for (std::size_t i = 0; i < mask.values.size(); i += 3) mask.values[i] = 1;
  EXPECT_NEAR(detection_loss(TD::zeros({4, 4, 2}), mask).item(), std::log(2.0), 1e-12);
}

TEST(DetectionLoss, QuarterProbabilityGivesLn4) {
  data::Mask mask(1, 1);
  // p(class 0) = 1 / (1 + e^{ln 3}) = 0.25
  EXPECT_NEAR(detection_loss(TD::constant({1, 1, 2}, {0.0, std::log(3.0)}), mask).item(), std::log(4.0), 1e-12);
}

TEST(DetectionLoss, MatchesBruteForceOnRandomInstances) {
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    const int classes = 2 + static_cast<int>(seed % 3);
    const auto logits = random_values(16 * classes, seed, -4.0, 4.0);
    data::Mask mask(4, 4);
    std::mt19937_64 rng(seed + 100);
    for (auto& v : mask.values) v = static_cast<std::uint8_t>(rng() % classes);
    double expected = 0;
    for (int p = 0; p < 16; ++p) {
      double z = 0;
      for (int c = 0; c < classes; ++c) z += std::exp(logits[p * classes + c]);
      expected += -std::log(std::exp(logits[p * classes + mask.values[p]]) / z);
    }
    expected /= 16;
    const double loss = detection_loss(TD::constant({4, 4, classes}, logits), mask).item();
    EXPECT_GE(loss, 0.0);
    EXPECT_NEAR(loss, expected, 1e-12);
  }
}

TEST(DetectionLoss, RejectsLabelOutsideClassRange) {
  data::Mask mask(2, 2);
  mask.values[3] = 2;
  EXPECT_THROW(detection_loss(TD::zeros({2, 2, 2}), mask), DataError);
}

TEST(ChangeBranch, TwoHundredStepsFitOneSamplePseudoLabel) {
  data::SceneSpec spec;
  spec.objects.push_back({data::ObjectKind::kBuilding, data::ChangeEvent::kAppear, {2, 3, 6, 6}});
  spec.objects.push_back({data::ObjectKind::kBuilding, data::ChangeEvent::kDisappear, {10, 9, 4, 5}});
  spec.objects.push_back({data::ObjectKind::kRoad, data::ChangeEvent::kNone, {0, 0, 1, 16}});
  const auto sample = data::generate_scene(spec, 3, {});
  ASSERT_GT(sample.pseudo_mask.count(1), 500);

  const std::array<int, kLevels> widths{8, 16, 16, 16};
  nn::ParameterStore<float> store(4);
  Backbone<float> backbone(store, widths);
  ChangeDetectionBranch<float> cd(store, widths, 2);
  nn::Adam<float> adam(nn::AdamConfig{1e-2});
  const auto pre = image_tensor<float>(sample.pre), post = image_tensor<float>(sample.post);
  const auto forward = [&] { return cd.decode(cd.fuse(backbone.extract_features(pre), backbone.extract_features(post))); };
  for (int step = 0; step < 200; ++step) {
    store.zero_grad();
    nn::backward(detection_loss(forward(), sample.pseudo_mask));
    adam.step(store);
  }
  const auto predicted = predict_mask(forward());
  int correct = 0;
  for (std::size_t i = 0; i < predicted.values.size(); ++i) correct += predicted.values[i] == sample.pseudo_mask.values[i];
  EXPECT_GT(correct / static_cast<double>(predicted.values.size()), 0.98);
}

// ----------------------------------------------------------- caption branch

nn::Linear<double> identity_projection(nn::ParameterStore<double>& store, int c) {
  nn::Linear<double> proj(store, "proj", c, c);
  std::vector<double> eye(c * c, 0.0);
  for (int i = 0; i < c; ++i) eye[i * c + i] = 1.0;
  set_values(proj.weight, eye);
  return proj;
}

TEST(DiffEmbed, EqualInputsGiveBiasPlusOne) {
  nn::ParameterStore<double> store(1);
  nn::Linear<double> proj(store, "proj", 6, 6);
  const auto bias = random_values(6, 3);
  set_values(proj.bias, bias);
  const auto x = random_constant({2, 2, 6}, 4);
  const auto out = diff_embed(x, x, proj);
  ASSERT_EQ(out.shape(), (nn::Shape{4, 6}));
  for (int s = 0; s < 4; ++s)
    for (int c = 0; c < 6; ++c) EXPECT_NEAR(out[s * 6 + c], bias[c] + 1.0, 1e-12);
}

TEST(DiffEmbed, ParallelVectorsWithIdentityProjection) {
  nn::ParameterStore<double> store(1);
  const auto proj = identity_projection(store, 5);
  const auto x = random_constant({2, 3, 5}, 8);
  std::vector<double> doubled(x.values().begin(), x.values().end());
  for (auto& v : doubled) v *= 2;
  const auto out = diff_embed(x, TD::constant({2, 3, 5}, doubled), proj);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(out[i], x[i] + 1.0, 1e-12);
}

TEST(DiffEmbed, OrthogonalVectorsAddZeroCosine) {
  nn::ParameterStore<double> store(1);
  const auto proj = identity_projection(store, 4);
  const auto a = TD::constant({1, 2, 4}, {1, 2, 0, 0, 0, 0, 3, 0});
  const auto b = TD::constant({1, 2, 4}, {0, 0, 5, 1, 1, 0, 0, 2});
  const auto out = diff_embed(a, b, proj);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(out[i], b[i] - a[i], 1e-12);
}

TEST(DiffEmbed, SwappingInputsNegatesOnlyTheLinearTerm) {
  nn::ParameterStore<double> store(1);
  const auto proj = identity_projection(store, 4);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto a = random_constant({2, 2, 4}, seed * 2), b = random_constant({2, 2, 4}, seed * 2 + 1);
    const auto ab = diff_embed(a, b, proj), ba = diff_embed(b, a, proj);
    const auto cos = nn::cosine_rows(flatten_grid(a), flatten_grid(b));
    for (int s = 0; s < 4; ++s)
      for (int c = 0; c < 4; ++c) {
        const double lin_ab = ab[s * 4 + c] - cos[s], lin_ba = ba[s * 4 + c] - cos[s];
        EXPECT_NEAR(lin_ab, -lin_ba, 1e-12);
      }
  }
}

TEST(DiffEmbed, RejectsShapeMismatch) {
  nn::ParameterStore<double> store(1);
  nn::Linear<double> proj(store, "proj", 4, 4);
  EXPECT_THROW(diff_embed(TD::zeros({2, 2, 4}), TD::zeros({1, 2, 4}), proj), ShapeError);
}

TEST(CrossAttention, SingleKeyReturnsProjectedValue) {
  nn::ParameterStore<double> store(5);
  nn::MultiHeadCrossAttention<double> mca(store, "mca", 6, 3);
  const auto q = random_constant({4, 6}, 1), kv = random_constant({1, 6}, 2);
  std::vector<TD> maps;
  const auto out = mca(q, kv, nullptr, &maps);
  for (const auto& m : maps)
    for (double w : m.values()) EXPECT_EQ(w, 1.0);
  const auto expected = kv.matrix() * mca.weights.value.matrix() * mca.weights.output.matrix();
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 6; ++c) EXPECT_NEAR(out[r * 6 + c], expected(0, c), 1e-12);
}

TEST(CrossAttention, RowsSumToOne) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    nn::ParameterStore<double> store(seed);
    nn::MultiHeadCrossAttention<double> mca(store, "mca", 8, 4);
    std::vector<TD> maps;
    mca(random_constant({3 + static_cast<int>(seed % 4), 8}, seed), random_constant({5, 8}, seed + 50), nullptr, &maps);
    ASSERT_EQ(maps.size(), 4U);
    for (const auto& m : maps)
      for (int r = 0; r < m.rows(); ++r) {
        double s = 0;
        for (int c = 0; c < m.cols(); ++c) s += m[r * m.cols() + c];
        EXPECT_NEAR(s, 1.0, 1e-6);
      }
  }
}

TEST(CrossAttention, TwoQueriesThreeKeysByHand) {
  // C = 2, two heads of width 1, so the scale is 1.
  // Q = x_q I, K = x_c [[0,1],[1,0]], V = x_c diag(1,2), W_o swaps channels.
  nn::AttentionWeights<double> w{TD::constant({2, 2}, {1, 0, 0, 1}), TD::constant({2, 2}, {0, 1, 1, 0}),
                                 TD::constant({2, 2}, {1, 0, 0, 2}), TD::constant({2, 2}, {0, 1, 1, 0})};
  const auto x_q = TD::constant({2, 2}, {1, 2, 0, 1});
  const auto x_c = TD::constant({3, 2}, {1, 0, 0, 1, 1, 1});
  const auto out = nn::multi_head_cross_attention(x_q, x_c, w, 2);
  const double e = std::exp(1.0), e2 = std::exp(2.0);
  // head 1: q = (1, 0), k = (0, 1, 1), v = (1, 0, 1)
  const double h11 = (1 + e) / (1 + 2 * e);  // scores (0, 1, 1)
  const double h21 = 2.0 / 3.0;              // scores (0, 0, 0)
  // head 2: q = (2, 1), k = (1, 0, 1), v = (0, 2, 2)
  const double h12 = (2 + 2 * e2) / (1 + 2 * e2);  // scores (2, 0, 2)
  const double h22 = (2 + 2 * e) / (1 + 2 * e);    // scores (1, 0, 1)
  const std::vector<double> expected{h12, h11, h22, h21};
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(out[i], expected[i], 1e-12) << i;
}

TEST(CrossAttention, RejectsIndivisibleWidth) {
  nn::AttentionWeights<double> w{TD::zeros({6, 6}), TD::zeros({6, 6}), TD::zeros({6, 6}), TD::zeros({6, 6})};
  EXPECT_THROW(nn::multi_head_cross_attention(TD::zeros({2, 6}), TD::zeros({2, 6}), w, 4), ShapeError);
}

TEST(SemanticFusion, ZeroedFirstOutputProjectionMatchesBaseline) {
  nn::ParameterStore<double> full_store(3), base_store(3);
  SemanticFusion<double> full(full_store, Mode::kFull, 8, 2, 16);
  SemanticFusion<double> base(base_store, Mode::kBaseline, 8, 2, 16);
  const auto x1 = random_constant({2, 2, 8}, 1), x2 = random_constant({2, 2, 8}, 2), xf = random_constant({2, 2, 8}, 3);
  const auto a = full(x1, x2, xf), b = base(x1, x2, std::nullopt);
  double gap = 0;
  for (std::size_t i = 0; i < a.size(); ++i) gap = std::max(gap, std::abs(a[i] - b[i]));
  EXPECT_GT(gap, 1e-6);
  auto w_o = full.first_attention().weights.output;
  set_values(w_o, std::vector<double>(64, 0.0));
  expect_all_near(full(x1, x2, xf).values(), b.values(), 1e-14);
}

TEST(SemanticFusion, PreservesSequenceLengthAndWidth) {
  nn::ParameterStore<double> store(3);
  Backbone<double> backbone(store, {4, 8, 8, 16});
  ChangeDetectionBranch<double> cd(store, {4, 8, 8, 16}, 2);
  SemanticFusion<double> sfa(store, Mode::kFull, 16, 4, 64);
  const auto pre = backbone.extract_features(random_constant({64, 64, 3}, 1));
  const auto post = backbone.extract_features(random_constant({64, 64, 3}, 2));
  const auto fused = cd.fuse(pre, post);
  EXPECT_EQ(sfa(pre.levels[3], post.levels[3], fused.levels[3]).shape(), (nn::Shape{4, 16}));
}

TEST(SemanticFusion, ModeAndInputMustAgree) {
  nn::ParameterStore<double> store(3);
  SemanticFusion<double> full(store, Mode::kFull, 8, 2, 16);
  nn::ParameterStore<double> store2(3);
  SemanticFusion<double> base(store2, Mode::kBaseline, 8, 2, 16);
  const auto x = random_constant({2, 2, 8}, 1);
  EXPECT_THROW(base(x, x, x), UsageError);
  EXPECT_THROW(full(x, x, std::nullopt), UsageError);
  EXPECT_EQ(store2.find("sfa.mca1.w_o"), nullptr);
  EXPECT_NE(store.find("sfa.mca1.w_o"), nullptr);
}

TEST(SemanticFusion, FullModeGradientsMatchFiniteDifferences) {
  nn::ParameterStore<double> store(12);
  SemanticFusion<double> sfa(store, Mode::kFull, 8, 2, 16);
  const auto x1 = random_leaf({2, 2, 8}, 1), x2 = random_leaf({2, 2, 8}, 2), xf = random_leaf({2, 2, 8}, 3);
  auto inputs = parameters_of(store);
  inputs.insert(inputs.end(), {x1, x2, xf});
  const auto report = grad_check([&](const std::vector<TD>&) { return sfa(x1, x2, xf); }, inputs);
  EXPECT_TRUE(report.passed()) << report.failures.size() << " failures";
  EXPECT_LT(report.max_relative_error, 1e-4);
}

DecoderConfig toy_decoder(int layers = 1) {
  DecoderConfig c;
  c.vocab_size = 11;
  c.width = 8;
  c.heads = 2;
  c.ffn_width = 16;
  c.layers = layers;
  c.max_len = 8;
  c.visual_length = 4;
  return c;
}

TEST(CaptionDecoder, LogitsShape) {
  nn::ParameterStore<double> store(2);
  CaptionDecoder<double> decoder(store, toy_decoder());
  EXPECT_EQ(decoder(random_constant({4, 8}, 1), {1, 5, 6, 7, 2}).shape(), (nn::Shape{5, 11}));
}

TEST(CaptionDecoder, CausalForEveryPrefixLength) {
  nn::ParameterStore<double> store(2);
  CaptionDecoder<double> decoder(store, toy_decoder(2));
  const auto visual = random_constant({4, 8}, 1);
  const text::TokenSequence tokens{1, 4, 9, 5, 10, 6};
  const auto reference = decoder(visual, tokens);
  const int v = 11;
  for (std::size_t changed = 1; changed < tokens.size(); ++changed) {
    auto perturbed = tokens;
    perturbed[changed] = perturbed[changed] == 7 ? 8 : 7;
    const auto out = decoder(visual, perturbed);
    for (std::size_t t = 0; t < changed; ++t)
      for (int k = 0; k < v; ++k)
        ASSERT_EQ(out[t * v + k], reference[t * v + k]) << "token " << changed << " leaked into position " << t;
    double moved = 0;
    for (int k = 0; k < v; ++k) moved += std::abs(out[changed * v + k] - reference[changed * v + k]);
    EXPECT_GT(moved, 0.0);
  }
}

TEST(CaptionDecoder, AttentionRowsSumToOneInEveryLayer) {
  nn::ParameterStore<double> store(2);
  CaptionDecoder<double> decoder(store, toy_decoder(2));
  DecoderTrace<double> trace;
  decoder(random_constant({4, 8}, 1), {1, 4, 5, 6}, &trace);
  ASSERT_EQ(trace.attention.size(), 8U);  // 2 layers x (self + cross) x 2 heads
  for (const auto& m : trace.attention)
    for (int r = 0; r < m.rows(); ++r) {
      double s = 0;
      for (int c = 0; c < m.cols(); ++c) s += m[r * m.cols() + c];
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(CaptionDecoder, RejectsOutOfVocabularyToken) {
  nn::ParameterStore<double> store(2);
  CaptionDecoder<double> decoder(store, toy_decoder());
  EXPECT_THROW(decoder(random_constant({4, 8}, 1), {1, 11}), ShapeError);
  EXPECT_THROW(decoder(random_constant({4, 8}, 1), text::TokenSequence(9, 1)), ShapeError);
}

TEST(CaptionDecoder, GradientsMatchFiniteDifferences) {
  nn::ParameterStore<double> store(21);
  CaptionDecoder<double> decoder(store, toy_decoder());
  const auto visual = random_leaf({4, 8}, 5);
  auto inputs = parameters_of(store);
  inputs.push_back(visual);
  nn::GradCheckOptions options;
  options.max_elements_per_input = 40;
  const auto report =
      grad_check([&](const std::vector<TD>&) { return decoder(visual, {1, 4, 9, 5}); }, inputs, options);
  EXPECT_TRUE(report.passed()) << report.failures.size() << " failures";
  EXPECT_LT(report.max_relative_error, 1e-4);
}

TEST(CaptionLoss, CertainCorrectPredictionGivesZero) {
  const text::TokenSequence target{5, 6, 2};
  std::vector<double> logits(3 * 8, -1000.0);
  for (int t = 0; t < 3; ++t) logits[t * 8 + target[t]] = 1000.0;
  EXPECT_EQ(caption_loss(TD::constant({3, 8}, logits), target).item(), 0.0);
}

TEST(CaptionLoss, UniformOverSixteenWordsForThreeSteps) {
  EXPECT_NEAR(caption_loss(TD::zeros({3, 16}), {4, 9, 2}).item(), 3 * std::log(16.0), 1e-12);
}

TEST(CaptionLoss, PadTailContributesNothing) {
  const auto logits = random_values(6 * 10, 4);
  const auto short_loss = caption_loss(TD::constant({4, 10}, {logits.begin(), logits.begin() + 40}), {4, 7, 8, 2});
  const auto padded = caption_loss(TD::constant({6, 10}, logits), {4, 7, 8, 2, 0, 0});
  EXPECT_DOUBLE_EQ(short_loss.item(), padded.item());
}

TEST(CaptionLoss, MatchesBruteForceOnRandomInstances) {
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    const int steps = 2 + static_cast<int>(seed % 5), v = 6 + static_cast<int>(seed % 7);
    const auto logits = random_values(steps * v, seed, -3, 3);
    std::mt19937_64 rng(seed);
    text::TokenSequence target(steps);
    for (auto& t : target) t = static_cast<int>(rng() % v);
    double expected = 0;
    for (int t = 0; t < steps; ++t) {
      if (target[t] == text::Vocabulary::kPad) continue;
      double z = 0;
      for (int k = 0; k < v; ++k) z += std::exp(logits[t * v + k]);
      expected -= std::log(std::exp(logits[t * v + target[t]]) / z);
    }
    EXPECT_NEAR(caption_loss(TD::constant({steps, v}, logits), target).item(), expected, 1e-11);
  }
}

TEST(CaptionLoss, RejectsLengthMismatch) {
  EXPECT_THROW(caption_loss(TD::zeros({3, 8}), {4, 2}), ShapeError);
}

// --------------------------------------------------------------- vocabulary

TEST(Vocabulary, SpecialsFirstThenSortedWords) {
  const auto v = text::Vocabulary::build({"A road appears.", "the building  disappears"});
  EXPECT_EQ(v.words(), (std::vector<std::string>{"<pad>", "<start>", "<end>", "<unk>", "a", "appears", "building",
                                                 "disappears", "road", "the"}));
  EXPECT_EQ(v.id("zebra"), text::Vocabulary::kUnk);
}

TEST(Vocabulary, EncodeDecodeRoundTripAndLengthCap) {
  const auto v = text::Vocabulary::build({"a road appears at the top"});
  const auto seq = v.encode("A road appears at the top", 20);
  EXPECT_EQ(seq.front(), text::Vocabulary::kStart);
  EXPECT_EQ(seq.back(), text::Vocabulary::kEnd);
  EXPECT_EQ(text::join(v.decode(seq)), "a road appears at the top");
  EXPECT_EQ(v.encode("a road appears at the top", 4).size(), 5U);  // START + 3 words + END
}

TEST(Vocabulary, SaveLoadRoundTrip) {
  const auto v = text::Vocabulary::build({"two trees disappear", "no change"});
  const auto path = (std::filesystem::temp_directory_path() / "pix4cap_vocab_test.txt").string();
  v.save(path);
  EXPECT_EQ(text::Vocabulary::load(path), v);
  std::filesystem::remove(path);
  EXPECT_THROW(text::Vocabulary::from_words({"a", "b"}), DataError);
}

// -------------------------------------------------------------------- model

TEST(ModelConfig, JsonRoundTripAndUnknownKeys) {
  ModelConfig c;
  c.mode = Mode::kBaseline;
  c.widths = {8, 16, 16, 32};
  c.max_len = 12;
  const auto back = model_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_THROW(model_config_from_json({{"width", 3}}), UsageError);
  EXPECT_THROW(model_config_from_json({{"heads", 5}}), UsageError);
  EXPECT_THROW(model_config_from_json({{"image_size", 48}}), ShapeError);
}

TEST(Model, BaselineHasNoChangeBranchOrFirstAttention) {
  ModelConfig c;
  c.widths = {4, 8, 8, 16};
  const auto vocab = text::Vocabulary::build({"a building appears"});
  c.mode = Mode::kBaseline;
  Pix4CapModel<double> base(c, vocab, 1);
  c.mode = Mode::kFull;
  Pix4CapModel<double> full(c, vocab, 1);
  for (const auto& p : base.store().all()) {
    EXPECT_NE(p.name.rfind("cd.", 0), 0U) << p.name;
    EXPECT_NE(p.name.rfind("sfa.mca1", 0), 0U) << p.name;
  }
  EXPECT_GT(full.store().count(), base.store().count());
  // Shared parameters start identical in both modes.
  for (const auto& p : base.store().all()) {
    const auto* q = full.store().find(p.name);
    ASSERT_NE(q, nullptr) << p.name;
    expect_all_near(p.tensor.values(), q->tensor.values(), 0.0);
  }
}

TEST(Model, EncodeShapes) {
  ModelConfig c;
  c.widths = {4, 8, 8, 16};
  const auto vocab = text::Vocabulary::build({"a building appears"});
  Pix4CapModel<double> model(c, vocab, 1);
  const auto sample = data::generate_scene(data::SceneSpec{}, 1, {});
  const auto e = model.encode(sample.pre, sample.post);
  EXPECT_EQ(e.cd_logits.shape(), (nn::Shape{64, 64, 2}));
  EXPECT_EQ(e.visual.shape(), (nn::Shape{4, 16}));
  EXPECT_EQ(model.decode(e.visual, {1, 4}).shape(), (nn::Shape{2, vocab.size()}));
}

}  // namespace
}  // namespace pix4cap::model
