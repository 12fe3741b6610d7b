#pragma once

// Procedural bi-temporal scenes. A scene is a grid of square cells; every
// object covers a cell rectangle and either appears, disappears or stays.
// Rendering is deterministic in (spec, seed), and the five captions are drawn
// from a closed template grammar that can be parsed back into the
// (kind, event) set it describes.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pix4cap/core/errors.hpp"
#include "pix4cap/core/rng.hpp"
#include "pix4cap/data/corrupt.hpp"
#include "pix4cap/data/image.hpp"

namespace pix4cap::data {

enum class ObjectKind { kBuilding, kRoad, kVegetation };
enum class ChangeEvent { kAppear, kDisappear, kNone };
enum class Split { kTrain, kVal, kTest };

inline const char* to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& text) {
  if (text == "train") return Split::kTrain;
  if (text == "val") return Split::kVal;
  if (text == "test") return Split::kTest;
  throw DataError("unknown split '" + text + "' (expected train, val or test)");
}

inline const char* to_string(ObjectKind kind) {
  switch (kind) {
    case ObjectKind::kBuilding: return "building";
    case ObjectKind::kRoad: return "road";
    case ObjectKind::kVegetation: return "vegetation";
  }
  return "?";
}

inline const char* to_string(ChangeEvent event) {
  switch (event) {
    case ChangeEvent::kAppear: return "appear";
    case ChangeEvent::kDisappear: return "disappear";
    case ChangeEvent::kNone: return "none";
  }
  return "?";
}

// Rectangle in grid cells.
struct CellRect {
  int row = 0, col = 0, height = 1, width = 1;

  bool overlaps(const CellRect& o) const {
    return row < o.row + o.height && o.row < row + height && col < o.col + o.width && o.col < col + width;
  }
};

struct SceneObject {
  ObjectKind kind = ObjectKind::kBuilding;
  ChangeEvent event = ChangeEvent::kNone;
  CellRect cells;
};

struct SceneSpec {
  int image_size = 64;
  int grid_size = 16;
  std::vector<SceneObject> objects;
  double illumination_delta = 0.0;  // global brightness shift of the post image, [-0.3, 0.3]
  double noise_sigma = 0.0;         // per-pixel Gaussian noise on both images

  int cell_px() const { return image_size / grid_size; }
};

// How pseudo-labels are derived from the ground truth.
struct PseudoLabelOptions {
  CorruptionParams corruption;
  bool all_classes = false;  // false: only changed buildings are labeled
};

struct BiTemporalSample {
  std::string id;
  RgbImage pre, post;
  Mask gt_mask, pseudo_mask;
  std::vector<std::string> captions;
  Split split = Split::kTrain;
};

inline constexpr int kCaptionsPerSample = 5;

// Throws DataError naming the broken invariant.
inline void validate(const BiTemporalSample& s) {
  const auto fail = [&](const std::string& what) { throw DataError("sample '" + s.id + "': " + what); };
  if (s.pre.height != s.post.height || s.pre.width != s.post.width) fail("pre/post image sizes differ");
  if (s.pre.height % 32 != 0 || s.pre.width % 32 != 0 || s.pre.height == 0)
    fail("image size " + std::to_string(s.pre.height) + "x" + std::to_string(s.pre.width) +
         " is not a positive multiple of 32");
  for (const Mask* m : {&s.gt_mask, &s.pseudo_mask}) {
    if (m->height != s.pre.height || m->width != s.pre.width) fail("mask size does not match image size");
    for (auto v : m->values)
      if (v > 1) fail("mask is not binary");
  }
  if (static_cast<int>(s.captions.size()) != kCaptionsPerSample)
    fail("expected 5 captions, found " + std::to_string(s.captions.size()));
}

inline void validate(const SceneSpec& spec) {
  if (spec.grid_size <= 0 || spec.image_size % spec.grid_size != 0)
    throw DataError("scene: grid size must divide the image size");
  if (spec.image_size <= 0 || spec.image_size % 32 != 0)
    throw DataError("scene: image size must be a positive multiple of 32");
  if (!(std::abs(spec.illumination_delta) <= 0.3)) throw DataError("scene: illumination delta outside [-0.3, 0.3]");
  if (!(spec.noise_sigma >= 0.0)) throw DataError("scene: noise sigma must be >= 0");
  for (std::size_t i = 0; i < spec.objects.size(); ++i) {
    const auto& r = spec.objects[i].cells;
    if (r.row < 0 || r.col < 0 || r.height <= 0 || r.width <= 0 || r.row + r.height > spec.grid_size ||
        r.col + r.width > spec.grid_size)
      throw DataError("scene: object " + std::to_string(i) + " footprint leaves the image");
    for (std::size_t j = 0; j < i; ++j)
      if (r.overlaps(spec.objects[j].cells))
        throw DataError("scene: objects " + std::to_string(j) + " and " + std::to_string(i) +
                        " overlap (at most one event per cell)");
  }
}

// ---------------------------------------------------------------------------
// Caption grammar

namespace grammar {

struct Template {
  const char* singular;
  const char* plural;
};

// {n} count word, {k} kind noun, {p} position phrase (may be empty).
inline constexpr std::array<Template, 12> kAppear{{
    {"{n} {k} appears {p}", "{n} {k} appear {p}"},
    {"{n} new {k} appears {p}", "{n} new {k} appear {p}"},
    {"{n} {k} has been built {p}", "{n} {k} have been built {p}"},
    {"{n} new {k} is built {p}", "{n} new {k} are built {p}"},
    {"there is {n} new {k} {p}", "there are {n} new {k} {p}"},
    {"{n} {k} is added {p}", "{n} {k} are added {p}"},
    {"{p} {n} new {k} appears", "{p} {n} new {k} appear"},
    {"{n} {k} emerges {p}", "{n} {k} emerge {p}"},
    {"{n} new {k} has been added {p}", "{n} new {k} have been added {p}"},
    {"{n} {k} is constructed {p}", "{n} {k} are constructed {p}"},
    {"{n} {k} shows up {p}", "{n} {k} show up {p}"},
    {"{p} there is {n} new {k}", "{p} there are {n} new {k}"},
}};

inline constexpr std::array<Template, 12> kDisappear{{
    {"{n} {k} disappears {p}", "{n} {k} disappear {p}"},
    {"{n} {k} is removed {p}", "{n} {k} are removed {p}"},
    {"{n} {k} has been removed {p}", "{n} {k} have been removed {p}"},
    {"{n} {k} is demolished {p}", "{n} {k} are demolished {p}"},
    {"{n} {k} is gone {p}", "{n} {k} are gone {p}"},
    {"{n} {k} has disappeared {p}", "{n} {k} have disappeared {p}"},
    {"{p} {n} {k} disappears", "{p} {n} {k} disappear"},
    {"{n} {k} vanishes {p}", "{n} {k} vanish {p}"},
    {"{n} {k} is torn down {p}", "{n} {k} are torn down {p}"},
    {"{n} {k} no longer exists {p}", "{n} {k} no longer exist {p}"},
    {"{n} old {k} is removed {p}", "{n} old {k} are removed {p}"},
    {"{p} {n} {k} has been removed", "{p} {n} {k} have been removed"},
}};

inline constexpr std::array<const char*, 6> kNoChange{{
    "the scene is the same as before",
    "there is no difference",
    "nothing has changed",
    "the two images are the same",
    "no change has occurred",
    "the scene remains unchanged",
}};

inline constexpr std::array<const char*, 9> kPositions{{
    "at the top left", "at the top", "at the top right",
    "on the left", "in the center", "on the right",
    "at the bottom left", "at the bottom", "at the bottom right",
}};

inline const char* noun(ObjectKind kind, bool plural) {
  switch (kind) {
    case ObjectKind::kBuilding: return plural ? "buildings" : "building";
    case ObjectKind::kRoad: return plural ? "roads" : "road";
    case ObjectKind::kVegetation: return plural ? "trees" : "tree";
  }
  return "?";
}

inline const char* count_word(int count) {
  static constexpr std::array<const char*, 5> kWords{{"a", "a", "two", "three", "four"}};
  return count >= 0 && count < 5 ? kWords[static_cast<std::size_t>(count)] : "many";
}

// 3 x 3 region index of a footprint's center.
inline int region_of(const CellRect& r, int grid) {
  const double cy = r.row + r.height / 2.0, cx = r.col + r.width / 2.0;
  const auto third = [grid](double v) { return std::min(2, static_cast<int>(3.0 * v / grid)); };
  return third(cy) * 3 + third(cx);
}

inline std::string fill(const std::string& pattern, const std::string& n, const std::string& k,
                        const std::string& p) {
  std::string out;
  for (std::size_t i = 0; i < pattern.size(); ++i) {
    if (pattern[i] == '{' && i + 2 < pattern.size() && pattern[i + 2] == '}') {
      const char key = pattern[i + 1];
      out += key == 'n' ? n : key == 'k' ? k : p;
      i += 2;
    } else {
      out += pattern[i];
    }
  }
  std::istringstream words(out);
  std::string word, joined;
  while (words >> word) joined += (joined.empty() ? "" : " ") + word;
  return joined;
}

}  // namespace grammar

struct CaptionGroup {
  ObjectKind kind;
  ChangeEvent event;
  int count = 0;
  std::set<int> regions;
};

// Changed objects grouped by (kind, event), in kind-then-event order.
inline std::vector<CaptionGroup> caption_groups(const SceneSpec& spec) {
  std::map<std::pair<int, int>, CaptionGroup> groups;
  for (const auto& o : spec.objects) {
    if (o.event == ChangeEvent::kNone) continue;
    auto& g = groups[{static_cast<int>(o.kind), static_cast<int>(o.event)}];
    g.kind = o.kind;
    g.event = o.event;
    ++g.count;
    g.regions.insert(grammar::region_of(o.cells, spec.grid_size));
  }
  std::vector<CaptionGroup> out;
  for (auto& [key, g] : groups) out.push_back(g);
  return out;
}

// Renders caption number `variant` (0..11 for changes, 0..5 for no change).
// The position phrase is used only when exactly one group exists and all of
// its objects share a region; multi-group captions stay short.
inline std::string render_caption(const std::vector<CaptionGroup>& groups, int variant) {
  if (groups.empty())
    return grammar::kNoChange[static_cast<std::size_t>(variant) % grammar::kNoChange.size()];
  std::string caption;
  for (const auto& g : groups) {
    const auto& table = g.event == ChangeEvent::kAppear ? grammar::kAppear : grammar::kDisappear;
    const auto& t = table[static_cast<std::size_t>(variant) % table.size()];
    const bool plural = g.count > 1;
    const std::string pos = (groups.size() == 1 && g.regions.size() == 1)
                                ? grammar::kPositions[static_cast<std::size_t>(*g.regions.begin())]
                                : "";
    const auto clause = grammar::fill(plural ? t.plural : t.singular, grammar::count_word(g.count),
                                      grammar::noun(g.kind, plural), pos);
    caption += (caption.empty() ? "" : " and ") + clause;
  }
  return caption;
}

// Recovers the (kind, event) set a caption describes; empty for no change.
inline std::set<std::pair<ObjectKind, ChangeEvent>> parse_caption(const std::string& caption) {
  static const std::set<std::string> kAppearWords{"appears", "appear", "new",    "built", "added",
                                                  "emerges", "emerge",  "constructed", "shows", "show"};
  static const std::set<std::string> kDisappearWords{
      "disappears", "disappear", "removed", "demolished", "gone",  "disappeared",
      "vanishes",   "vanish",    "torn",    "longer",     "exists", "exist"};
  std::set<std::pair<ObjectKind, ChangeEvent>> out;
  std::istringstream in(caption);
  std::string word;
  std::vector<std::vector<std::string>> clauses(1);
  while (in >> word) {
    if (word == "and") {
      clauses.emplace_back();
    } else {
      clauses.back().push_back(word);
    }
  }
  for (const auto& clause : clauses) {
    std::optional<ObjectKind> kind;
    std::optional<ChangeEvent> event;
    for (const auto& w : clause) {
      if (w == "building" || w == "buildings") kind = ObjectKind::kBuilding;
      if (w == "road" || w == "roads") kind = ObjectKind::kRoad;
      if (w == "tree" || w == "trees") kind = ObjectKind::kVegetation;
      if (kDisappearWords.count(w)) event = ChangeEvent::kDisappear;
      if (!event && kAppearWords.count(w)) event = ChangeEvent::kAppear;
    }
    if (kind && event) out.insert({*kind, *event});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rendering

namespace detail {

struct Color {
  float r, g, b;
};

inline void paint_rect(RgbImage& img, int y0, int x0, int h, int w, Color c,
                       const std::vector<float>& texture, float border_shade) {
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const bool border = border_shade != 0.0f && (y == 0 || x == 0 || y == h - 1 || x == w - 1);
      const float t = texture[static_cast<std::size_t>(y) * w + x] + (border ? border_shade : 0.0f);
      img.at(y0 + y, x0 + x, 0) = c.r + t;
      img.at(y0 + y, x0 + x, 1) = c.g + t;
      img.at(y0 + y, x0 + x, 2) = c.b + t;
    }
}

}  // namespace detail

// Union of the pixel footprints of objects with event != none, optionally
// restricted to one kind.
inline Mask change_mask(const SceneSpec& spec, std::optional<ObjectKind> only = std::nullopt) {
  Mask mask(spec.image_size, spec.image_size);
  const int px = spec.cell_px();
  for (const auto& o : spec.objects) {
    if (o.event == ChangeEvent::kNone || (only && o.kind != *only)) continue;
    for (int y = o.cells.row * px; y < (o.cells.row + o.cells.height) * px; ++y)
      for (int x = o.cells.col * px; x < (o.cells.col + o.cells.width) * px; ++x) mask.at(y, x) = 1;
  }
  return mask;
}

inline BiTemporalSample generate_scene(const SceneSpec& spec, std::uint64_t seed,
                                       const PseudoLabelOptions& pseudo = {}) {
  validate(spec);
  Rng rng(derive_seed(seed, "scene"));
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  const int size = spec.image_size, px = spec.cell_px();

  // Shared background: soil/grass base color with a smooth low-frequency field.
  static constexpr std::array<detail::Color, 3> kGround{{{0.55f, 0.50f, 0.40f},
                                                         {0.45f, 0.52f, 0.35f},
                                                         {0.60f, 0.57f, 0.50f}}};
  const auto ground = kGround[rng() % kGround.size()];
  const float fy = 1.0f + 3.0f * unit(rng), fx = 1.0f + 3.0f * unit(rng), phase = 6.28f * unit(rng);
  RgbImage background(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const float wave = 0.04f * std::sin(fy * 6.2832f * y / size + phase) * std::cos(fx * 6.2832f * x / size);
      background.at(y, x, 0) = ground.r + wave;
      background.at(y, x, 1) = ground.g + wave;
      background.at(y, x, 2) = ground.b + wave;
    }

  RgbImage pre = background, post = background;
  static constexpr std::array<detail::Color, 4> kRoofs{{{0.78f, 0.78f, 0.80f},
                                                        {0.72f, 0.32f, 0.26f},
                                                        {0.45f, 0.52f, 0.68f},
                                                        {0.92f, 0.91f, 0.88f}}};
  for (const auto& o : spec.objects) {
    const int h = o.cells.height * px, w = o.cells.width * px;
    std::vector<float> texture(static_cast<std::size_t>(h) * w, 0.0f);
    detail::Color color{};
    float border = 0.0f;
    switch (o.kind) {
      case ObjectKind::kBuilding:
        color = kRoofs[rng() % kRoofs.size()];
        border = -0.25f;
        for (auto& t : texture) t = 0.02f * (unit(rng) - 0.5f);
        break;
      case ObjectKind::kRoad:
        color = {0.30f, 0.30f, 0.32f};
        for (auto& t : texture) t = 0.03f * (unit(rng) - 0.5f);
        break;
      case ObjectKind::kVegetation:
        color = {0.18f, 0.45f, 0.17f};
        for (auto& t : texture) t = 0.16f * (unit(rng) - 0.5f);
        break;
    }
    const int y0 = o.cells.row * px, x0 = o.cells.col * px;
    if (o.event != ChangeEvent::kAppear) detail::paint_rect(pre, y0, x0, h, w, color, texture, border);
    if (o.event != ChangeEvent::kDisappear) detail::paint_rect(post, y0, x0, h, w, color, texture, border);
  }

  std::normal_distribution<float> noise(0.0f, static_cast<float>(spec.noise_sigma));
  const auto finish = [&](RgbImage& img, float shift) {
    for (auto& v : img.pixels) {
      if (spec.noise_sigma > 0) v += noise(rng);
      v = std::clamp(v + shift, 0.0f, 1.0f);
    }
  };
  finish(pre, 0.0f);
  finish(post, static_cast<float>(spec.illumination_delta));

  BiTemporalSample sample;
  sample.pre = std::move(pre);
  sample.post = std::move(post);
  sample.gt_mask = change_mask(spec);
  const auto labeled = pseudo.all_classes ? sample.gt_mask : change_mask(spec, ObjectKind::kBuilding);
  sample.pseudo_mask = corrupt_mask(labeled, pseudo.corruption, seed);

  const auto groups = caption_groups(spec);
  std::vector<int> variants(groups.empty() ? grammar::kNoChange.size() : grammar::kAppear.size());
  std::iota(variants.begin(), variants.end(), 0);
  std::shuffle(variants.begin(), variants.end(), rng);
  for (int i = 0; i < kCaptionsPerSample; ++i) sample.captions.push_back(render_caption(groups, variants[i]));
  return sample;
}

// ---------------------------------------------------------------------------
// Random scene specs for dataset synthesis

struct SceneSampler {
  int image_size = 64;
  int grid_size = 16;
  double max_illumination = 0.15;
  double max_noise_sigma = 0.03;
};

namespace detail {

inline ObjectKind random_kind(Rng& rng) {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  return u < 0.6 ? ObjectKind::kBuilding : u < 0.8 ? ObjectKind::kRoad : ObjectKind::kVegetation;
}

inline bool place(SceneSpec& spec, ObjectKind kind, ChangeEvent event, Rng& rng) {
  std::uniform_int_distribution<int> small(2, 4), length(4, 8), coin(0, 1);
  CellRect r;
  if (kind == ObjectKind::kRoad) {
    const bool horizontal = coin(rng) != 0;
    r.height = horizontal ? 1 : length(rng);
    r.width = horizontal ? length(rng) : 1;
  } else {
    r.height = small(rng);
    r.width = small(rng);
  }
  for (int attempt = 0; attempt < 50; ++attempt) {
    r.row = std::uniform_int_distribution<int>(0, spec.grid_size - r.height)(rng);
    r.col = std::uniform_int_distribution<int>(0, spec.grid_size - r.width)(rng);
    // Keep one free cell between objects.
    const CellRect halo{r.row - 1, r.col - 1, r.height + 2, r.width + 2};
    if (std::none_of(spec.objects.begin(), spec.objects.end(),
                     [&](const SceneObject& o) { return halo.overlaps(o.cells); })) {
      spec.objects.push_back({kind, event, r});
      return true;
    }
  }
  return false;
}

}  // namespace detail

// Changed scenes get 1-3 changed objects forming at most two caption groups,
// plus up to two static objects; unchanged scenes get 0-3 static objects.
inline SceneSpec random_scene_spec(const SceneSampler& sampler, bool changed, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "scene_spec"));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SceneSpec spec;
  spec.image_size = sampler.image_size;
  spec.grid_size = sampler.grid_size;
  spec.illumination_delta = (2.0 * unit(rng) - 1.0) * sampler.max_illumination;
  spec.noise_sigma = unit(rng) * sampler.max_noise_sigma;

  if (changed) {
    for (;;) {
      spec.objects.clear();
      const double u = unit(rng);
      const int n = u < 0.5 ? 1 : u < 0.8 ? 2 : 3;
      for (int i = 0; i < n; ++i) {
        const auto event = unit(rng) < 0.5 ? ChangeEvent::kAppear : ChangeEvent::kDisappear;
        detail::place(spec, detail::random_kind(rng), event, rng);
      }
      const auto groups = caption_groups(spec);
      if (!groups.empty() && groups.size() <= 2) break;
    }
  }
  const int statics = std::uniform_int_distribution<int>(0, changed ? 2 : 3)(rng);
  for (int i = 0; i < statics; ++i) detail::place(spec, detail::random_kind(rng), ChangeEvent::kNone, rng);
  return spec;
}

}  // namespace pix4cap::data
