#pragma once

// Command implementations behind the pix4cap tool. Each command resolves its
// options (defaults, then an optional JSON config file, then flags), writes
// the resolved config as config.json and a manifest.json into its output
// directory, and reports failures through the typed errors mapped to exit
// codes by the tool.

#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "pix4cap/cli/plot.hpp"
#include "pix4cap/data/corrupt.hpp"
#include "pix4cap/data/dataset.hpp"
#include "pix4cap/train/trainer.hpp"

namespace pix4cap::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kToolVersion = "0.1.0";

// Exit codes: stable contract for scripts.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitDivergence = 4;

// ------------------------------------------------------------------ files

inline json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError(path.string() + ": " + e.what());
  }
}

inline void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

// Creates `dir`. A non-empty directory is an error unless `force`, in which
// case its contents are removed first so no stale files survive.
inline void prepare_output_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_directory(dir)) throw UsageError(dir.string() + " exists and is not a directory");
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw UsageError("output directory " + dir.string() + " is not empty (pass --force to replace it)");
    for (const auto& entry : fs::directory_iterator(dir)) fs::remove_all(entry.path());
  }
  fs::create_directories(dir);
}

inline void ensure_dir(const fs::path& dir) {
  if (fs::exists(dir) && !fs::is_directory(dir)) throw UsageError(dir.string() + " exists and is not a directory");
  fs::create_directories(dir);
}

// Output paths are recorded relative to the output directory, so the
// manifest does not depend on where a run was written.
inline json manifest(const std::string& command, const json& config, const json& inputs,
                     const std::vector<std::string>& outputs, const json& summary) {
  return {{"tool", "pix4cap"},   {"version", kToolVersion}, {"command", command}, {"config", config},
          {"inputs", inputs},    {"outputs", outputs},      {"summary", summary}};
}

// ------------------------------------------------------------------ synth

struct SynthOptions {
  int num_pairs = 100;
  double changed_fraction = 0.5;
  std::string noise = "light";
  double val_fraction = 0.1;
  double test_fraction = 0.2;
  std::uint64_t seed = 0;
  int image_size = 64;
  bool label_all_classes = false;
};

inline json to_json(const SynthOptions& o) {
  return {{"num_pairs", o.num_pairs},         {"changed_fraction", o.changed_fraction},
          {"noise", o.noise},                 {"val_fraction", o.val_fraction},
          {"test_fraction", o.test_fraction}, {"seed", o.seed},
          {"image_size", o.image_size},       {"label_all_classes", o.label_all_classes}};
}

inline SynthOptions synth_options_from_json(const json& j, SynthOptions o = {}) {
  model::reject_unknown_keys(j,
                             {"num_pairs", "changed_fraction", "noise", "val_fraction", "test_fraction", "seed",
                              "image_size", "label_all_classes"},
                             "synth config");
  try {
    if (j.contains("num_pairs")) o.num_pairs = j["num_pairs"].get<int>();
    if (j.contains("changed_fraction")) o.changed_fraction = j["changed_fraction"].get<double>();
    if (j.contains("noise")) o.noise = j["noise"].get<std::string>();
    if (j.contains("val_fraction")) o.val_fraction = j["val_fraction"].get<double>();
    if (j.contains("test_fraction")) o.test_fraction = j["test_fraction"].get<double>();
    if (j.contains("seed")) o.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("image_size")) o.image_size = j["image_size"].get<int>();
    if (j.contains("label_all_classes")) o.label_all_classes = j["label_all_classes"].get<bool>();
  } catch (const json::exception& e) {
    throw UsageError(std::string("synth config: ") + e.what());
  }
  return o;
}

inline data::SynthConfig synth_config(const SynthOptions& o) {
  const auto fraction_ok = [](double f) { return f >= 0.0 && f <= 1.0; };
  if (!fraction_ok(o.val_fraction) || !fraction_ok(o.test_fraction))
    throw UsageError("val_fraction and test_fraction must lie in [0, 1]");
  if (o.image_size < 32 || o.image_size % 32 != 0) throw UsageError("image_size must be a positive multiple of 32");
  data::SynthConfig c;
  c.num_pairs = o.num_pairs;
  c.changed_fraction = o.changed_fraction;
  c.num_val = static_cast<int>(std::floor(o.val_fraction * o.num_pairs + 1e-9));
  c.num_test = static_cast<int>(std::floor(o.test_fraction * o.num_pairs + 1e-9));
  c.seed = o.seed;
  c.sampler.image_size = o.image_size;
  c.pseudo.corruption = data::corruption_preset(o.noise);
  c.pseudo.all_classes = o.label_all_classes;
  return c;
}

struct SynthSummary {
  int pairs = 0, changed = 0, train = 0, val = 0, test = 0;
};

inline SynthSummary cmd_synth(const fs::path& out, const SynthOptions& options, bool force) {
  const auto config = synth_config(options);
  const auto samples = data::synthesize_dataset(config);
  prepare_output_dir(out, force);
  data::write_dataset(samples, out);

  SynthSummary s;
  s.pairs = static_cast<int>(samples.size());
  s.changed = data::changed_count(config);
  s.val = config.num_val;
  s.test = config.num_test;
  s.train = s.pairs - s.val - s.test;
  write_json_file(out / "config.json", to_json(options));
  write_json_file(out / "manifest.json",
                  manifest("synth", to_json(options), json::object(),
                           {"A/", "B/", "label/", "gt/", "captions.json", "config.json"},
                           {{"pairs", s.pairs},
                            {"changed", s.changed},
                            {"unchanged", s.pairs - s.changed},
                            {"train", s.train},
                            {"val", s.val},
                            {"test", s.test}}));
  return s;
}

// ------------------------------------------------------------------ train

struct TrainOptions {
  model::ModelConfig model;
  train::TrainConfig train;
};

inline json to_json(const TrainOptions& o) { return {{"model", model::to_json(o.model)}, {"train", train::to_json(o.train)}}; }

inline TrainOptions train_options_from_json(const json& j, TrainOptions o = {}) {
  model::reject_unknown_keys(j, {"model", "train"}, "train config file");
  if (j.contains("model")) o.model = model::model_config_from_json(j["model"], o.model);
  if (j.contains("train")) o.train = train::train_config_from_json(j["train"], o.train);
  return o;
}

inline std::vector<data::BiTemporalSample> load_data(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("dataset directory " + dir.string() + " does not exist");
  return data::load_dataset(dir);
}

inline std::vector<const data::BiTemporalSample*> require_split(const std::vector<data::BiTemporalSample>& samples,
                                                                data::Split split, const fs::path& dir) {
  auto out = data::select_split(samples, split);
  if (out.empty()) throw DataError("dataset " + dir.string() + " has no '" + data::to_string(split) + "' split");
  return out;
}

inline text::Vocabulary training_vocabulary(const std::vector<const data::BiTemporalSample*>& split) {
  std::vector<std::string> sentences;
  for (const auto* s : split) sentences.insert(sentences.end(), s->captions.begin(), s->captions.end());
  return text::Vocabulary::build(sentences);
}

struct TrainSummary {
  int best_epoch = 0;
  double best_val_s_star_m = std::numeric_limits<double>::quiet_NaN();
  std::vector<train::EpochRecord> history;
};

// Writes model.ckpt, train_log.jsonl (one record per epoch), config.json and
// manifest.json. The image size comes from the data.
inline TrainSummary cmd_train(const fs::path& data_dir, const fs::path& out, TrainOptions options, bool force,
                              std::ostream* progress = nullptr) {
  const auto samples = load_data(data_dir);
  const auto train_split = require_split(samples, data::Split::kTrain, data_dir);
  const auto val_split = data::select_split(samples, data::Split::kVal);
  options.model.image_size = train_split.front()->pre.height;
  if (train_split.front()->pre.width != options.model.image_size)
    throw DataError("training images must be square, got " + std::to_string(train_split.front()->pre.height) + "x" +
                    std::to_string(train_split.front()->pre.width));
  model::validate(options.model);
  train::validate(options.train);

  prepare_output_dir(out, force);
  model::Pix4CapModel<float> net(options.model, training_vocabulary(train_split), options.train.seed);
  std::ofstream log(out / "train_log.jsonl");
  if (!log) throw DataError("cannot write " + (out / "train_log.jsonl").string());
  const auto on_epoch = [&](const train::EpochRecord& r) {
    log << train::to_json(r).dump() << '\n';
    log.flush();
    if (progress) {
      *progress << "epoch " << r.epoch << "/" << options.train.epochs << "  L_total " << r.l_total << "  L_cap "
                << r.l_cap;
      if (r.l_det) *progress << "  L_det " << *r.l_det;
      if (r.val) *progress << "  val S*_m " << r.val->s_star_m;
      *progress << std::endl;
    }
  };
  const auto result = train::train(net, train_split, val_split, options.train, on_epoch);
  train::save_model((out / "model.ckpt").string(), net, options.train);

  TrainSummary s{result.best_epoch, result.best_val_s_star_m, result.history};
  json summary{{"epochs", options.train.epochs},
               {"best_epoch", s.best_epoch},
               {"train_pairs", train_split.size()},
               {"val_pairs", val_split.size()},
               {"vocabulary_size", net.vocabulary().size()},
               {"parameters", net.store().scalar_count()}};
  summary["best_val_S*_m"] = std::isnan(s.best_val_s_star_m) ? json(nullptr) : json(s.best_val_s_star_m);
  summary["final_L_total"] = s.history.empty() ? json(nullptr) : json(s.history.back().l_total);
  write_json_file(out / "config.json", to_json(options));
  write_json_file(out / "manifest.json",
                  manifest("train", to_json(options), {{"data", data_dir.string()}},
                           {"model.ckpt", "train_log.jsonl", "config.json"}, summary));
  return s;
}

// ------------------------------------------------------------------- eval

struct EvalOptions {
  std::string split = "test";
  int beam = 1;
};

inline json to_json(const EvalOptions& o) { return {{"split", o.split}, {"beam", o.beam}}; }

inline EvalOptions eval_options_from_json(const json& j, EvalOptions o = {}) {
  model::reject_unknown_keys(j, {"split", "beam"}, "eval config");
  try {
    if (j.contains("split")) o.split = j["split"].get<std::string>();
    if (j.contains("beam")) o.beam = j["beam"].get<int>();
  } catch (const json::exception& e) {
    throw UsageError(std::string("eval config: ") + e.what());
  }
  return o;
}

inline std::string row_name(const model::ModelConfig& c) {
  return c.mode == model::Mode::kFull ? "Pix4Cap (full)" : "Baseline";
}

// Writes metrics.json, table.txt, captions.json, config.json and
// manifest.json.
inline train::EvalResult cmd_eval(const fs::path& ckpt, const fs::path& data_dir, const fs::path& out,
                                  const EvalOptions& options) {
  if (options.split != "train" && options.split != "val" && options.split != "test")
    throw UsageError("--split must be train, val or test, got '" + options.split + "'");
  const auto split = data::parse_split(options.split);
  if (options.beam < 1 || options.beam > 5) throw UsageError("--beam must lie in 1..5");
  const auto loaded = train::load_model<float>(ckpt.string());
  const auto samples = load_data(data_dir);
  const auto chosen = require_split(samples, split, data_dir);
  for (const auto* s : chosen)
    if (s->pre.height != loaded.net->config().image_size || s->pre.width != loaded.net->config().image_size)
      throw DataError("sample '" + s->id + "' is " + std::to_string(s->pre.height) + "x" +
                      std::to_string(s->pre.width) + " but the model expects " +
                      std::to_string(loaded.net->config().image_size));

  // Token accuracy is teacher-forced on the references the model was trained on.
  auto result = train::evaluate(*loaded.net, chosen, train::Strategy{options.beam}, loaded.train.caption_sampling);
  ensure_dir(out);
  json metrics{{"split", options.split}, {"metrics", metrics::to_json(result.report)}};
  metrics["cd_pixel_accuracy"] = std::isnan(result.pixel_accuracy) ? json(nullptr) : json(result.pixel_accuracy);
  metrics["teacher_forced_token_accuracy"] = result.token_accuracy;
  write_json_file(out / "metrics.json", metrics);
  write_text_file(out / "table.txt", metrics::format_table({{row_name(loaded.net->config()), result.report}}));
  json captions = json::array();
  for (std::size_t i = 0; i < chosen.size(); ++i)
    captions.push_back({{"id", result.ids[i]}, {"caption", result.captions[i]}, {"references", chosen[i]->captions}});
  write_json_file(out / "captions.json", captions);
  write_json_file(out / "config.json", to_json(options));
  write_json_file(out / "manifest.json",
                  manifest("eval", to_json(options), {{"ckpt", ckpt.string()}, {"data", data_dir.string()}},
                           {"metrics.json", "table.txt", "captions.json", "config.json"}, metrics));
  return result;
}

// ------------------------------------------------------------------ infer

struct InferResult {
  std::string caption;
  std::optional<data::Mask> mask;  // full mode only
};

// Prints nothing itself; writes mask.png (full mode), config.json and
// manifest.json into `out`.
inline InferResult cmd_infer(const fs::path& ckpt, const fs::path& pre_path, const fs::path& post_path,
                             const fs::path& out, int beam) {
  if (beam < 1 || beam > 5) throw UsageError("--beam must lie in 1..5");
  const auto loaded = train::load_model<float>(ckpt.string());
  const auto pre = data::read_rgb_png(pre_path.string());
  const auto post = data::read_rgb_png(post_path.string());
  const int size = loaded.net->config().image_size;
  for (const auto* img : {&pre, &post})
    if (img->height != size || img->width != size)
      throw DataError("input image is " + std::to_string(img->height) + "x" + std::to_string(img->width) +
                      " but the model expects " + std::to_string(size) + "x" + std::to_string(size));

  const auto enc = loaded.net->encode(pre, post);
  InferResult r;
  r.caption = text::join(loaded.net->vocabulary().decode(train::generate_caption(*loaded.net, enc.visual, {beam})));
  ensure_dir(out);
  std::vector<std::string> outputs{"config.json"};
  json summary{{"caption", r.caption}};
  if (enc.cd_logits.defined()) {
    r.mask = model::predict_mask(enc.cd_logits);
    data::write_mask_png((out / "mask.png").string(), *r.mask);
    outputs.push_back("mask.png");
    summary["changed_fraction"] = static_cast<double>(r.mask->count(1)) / static_cast<double>(r.mask->values.size());
  }
  const json config{{"beam", beam}};
  write_json_file(out / "config.json", config);
  write_json_file(out / "manifest.json",
                  manifest("infer", config,
                           {{"ckpt", ckpt.string()}, {"pre", pre_path.string()}, {"post", post_path.string()}},
                           outputs, summary));
  return r;
}

// ------------------------------------------------------------------- plot

// File stem for a logged scalar: lowercase, '*' -> "star", other
// punctuation -> '_'.
inline std::string scalar_file_stem(const std::string& name) {
  std::string out;
  for (char c : name) {
    if (c == '*') out += "_star_";
    else if (std::isalnum(static_cast<unsigned char>(c))) out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    else out += '_';
  }
  std::string squeezed;
  for (char c : out)
    if (!(c == '_' && (squeezed.empty() || squeezed.back() == '_'))) squeezed += c;
  while (!squeezed.empty() && squeezed.back() == '_') squeezed.pop_back();
  return squeezed;
}

// One PNG per logged scalar: the epoch losses plus every numeric validation
// metric. Scalars that are null in every record (l_det in baseline mode) are
// not logged and get no image.
inline std::vector<std::string> cmd_plot(const fs::path& log_path, const fs::path& out) {
  std::ifstream in(log_path);
  if (!in) throw DataError("cannot open log " + log_path.string());
  std::vector<std::string> names;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> series;
  const auto add = [&](const std::string& name, double epoch, const json& v) {
    if (!v.is_number()) return;
    if (!series.count(name)) names.push_back(name);
    series[name].first.push_back(epoch);
    series[name].second.push_back(v.get<double>());
  };
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json r;
    try {
      r = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError(log_path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (!r.is_object() || !r.contains("epoch") || !r["epoch"].is_number())
      throw DataError(log_path.string() + ":" + std::to_string(line_no) + ": record lacks an epoch");
    const double epoch = r["epoch"].get<double>();
    for (const char* key : {"l_det", "l_cap", "l_total"})
      if (r.contains(key)) add(key, epoch, r[key]);
    if (r.contains("val_metrics") && r["val_metrics"].is_object())
      for (const auto& [key, value] : r["val_metrics"].items())
        if (key != "pairs") add("val " + key, epoch, value);
  }
  if (names.empty()) throw DataError(log_path.string() + " holds no scalar records");
  ensure_dir(out);
  std::vector<std::string> files;
  for (const auto& name : names) {
    const auto file = scalar_file_stem(name) + ".png";
    render_curve((out / file).string(), name, series[name].first, series[name].second);
    files.push_back(file);
  }
  write_json_file(out / "config.json", json::object());
  auto outputs = files;
  outputs.push_back("config.json");
  write_json_file(out / "manifest.json",
                  manifest("plot", json::object(), {{"log", log_path.string()}}, outputs, {{"curves", names}}));
  return files;
}

}  // namespace pix4cap::cli
