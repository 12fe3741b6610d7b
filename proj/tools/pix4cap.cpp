// pix4cap command-line tool: synth, train, eval, infer, plot.
//
// Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric divergence.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "pix4cap/cli/commands.hpp"

namespace {

using namespace pix4cap;
namespace fs = std::filesystem;

template <class T>
void override_if(const std::optional<T>& flag, T& target) {
  if (flag) target = *flag;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint change detection and change captioning for bi-temporal images"};
  app.require_subcommand(1);
  app.set_version_flag("--version", cli::kToolVersion);

  // synth
  auto* synth = app.add_subcommand("synth", "Write a synthetic bi-temporal dataset");
  std::string synth_out, synth_config;
  std::optional<int> num_pairs, image_size;
  std::optional<double> changed_fraction, val_fraction, test_fraction;
  std::optional<std::string> noise;
  std::optional<std::uint64_t> synth_seed;
  bool synth_force = false;
  synth->add_option("--out", synth_out, "Output dataset directory")->required();
  synth->add_option("--config", synth_config, "JSON config file (flags override it)");
  synth->add_option("--num-pairs", num_pairs, "Number of image pairs");
  synth->add_option("--changed-fraction", changed_fraction, "Fraction of pairs that contain a change");
  synth->add_option("--noise", noise, "Pseudo-label corruption preset: none, light or heavy");
  synth->add_option("--val-fraction", val_fraction, "Fraction of pairs in the val split");
  synth->add_option("--test-fraction", test_fraction, "Fraction of pairs in the test split");
  synth->add_option("--image-size", image_size, "Image side in pixels (multiple of 32)");
  synth->add_option("--seed", synth_seed, "Random seed");
  synth->add_flag("--force", synth_force, "Replace the contents of a non-empty output directory");

  // train
  auto* train = app.add_subcommand("train", "Train a model and write a checkpoint and log");
  std::string train_data, train_out, train_config;
  std::optional<std::string> mode;
  std::optional<int> epochs, batch_size;
  std::optional<double> learning_rate;
  std::optional<std::uint64_t> train_seed;
  bool train_force = false;
  train->add_option("--data", train_data, "Dataset directory")->required();
  train->add_option("--out", train_out, "Output run directory")->required();
  train->add_option("--config", train_config, "JSON config file with model and train sections");
  train->add_option("--mode", mode, "full or baseline");
  train->add_option("--epochs", epochs, "Number of epochs");
  train->add_option("--batch-size", batch_size, "Samples per Adam step");
  train->add_option("--lr", learning_rate, "Adam learning rate");
  train->add_option("--seed", train_seed, "Seed for initialization and shuffling");
  train->add_flag("--force", train_force, "Replace the contents of a non-empty output directory");

  // eval
  auto* eval = app.add_subcommand("eval", "Score a checkpoint on a dataset split");
  std::string eval_ckpt, eval_data, eval_out, eval_config;
  std::optional<std::string> split;
  std::optional<int> eval_beam;
  eval->add_option("--ckpt", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--data", eval_data, "Dataset directory")->required();
  eval->add_option("--out", eval_out, "Output directory (default: eval_<split> next to the checkpoint)");
  eval->add_option("--config", eval_config, "JSON config file");
  eval->add_option("--split", split, "train, val or test (default test)");
  eval->add_option("--beam", eval_beam, "Beam size 1..5 (1 = greedy)");

  // infer
  auto* infer = app.add_subcommand("infer", "Caption one image pair and write its change mask");
  std::string infer_ckpt, infer_pre, infer_post, infer_out = ".";
  int infer_beam = 1;
  infer->add_option("--ckpt", infer_ckpt, "Checkpoint file")->required();
  infer->add_option("--pre", infer_pre, "Pre-change image (PNG)")->required();
  infer->add_option("--post", infer_post, "Post-change image (PNG)")->required();
  infer->add_option("--out", infer_out, "Output directory for mask.png")->capture_default_str();
  infer->add_option("--beam", infer_beam, "Beam size 1..5 (1 = greedy)")->capture_default_str();

  // plot
  auto* plot = app.add_subcommand("plot", "Render one curve image per logged scalar");
  std::string plot_log, plot_out;
  plot->add_option("--log", plot_log, "train_log.jsonl from a training run")->required();
  plot->add_option("--out", plot_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? cli::kExitOk : cli::kExitUsage;
  }

  try {
    if (*synth) {
      cli::SynthOptions o;
      if (!synth_config.empty()) o = cli::synth_options_from_json(cli::read_json_file(synth_config), o);
      override_if(num_pairs, o.num_pairs);
      override_if(changed_fraction, o.changed_fraction);
      override_if(noise, o.noise);
      override_if(val_fraction, o.val_fraction);
      override_if(test_fraction, o.test_fraction);
      override_if(image_size, o.image_size);
      override_if(synth_seed, o.seed);
      const auto s = cli::cmd_synth(synth_out, o, synth_force);
      std::cout << "wrote " << s.pairs << " pairs (" << s.changed << " changed; train " << s.train << ", val "
                << s.val << ", test " << s.test << ") to " << synth_out << "\n";
    } else if (*train) {
      cli::TrainOptions o;
      if (!train_config.empty()) o = cli::train_options_from_json(cli::read_json_file(train_config), o);
      if (mode) o.model.mode = model::parse_mode(*mode);
      override_if(epochs, o.train.epochs);
      override_if(batch_size, o.train.batch_size);
      override_if(learning_rate, o.train.learning_rate);
      override_if(train_seed, o.train.seed);
      const auto s = cli::cmd_train(train_data, train_out, o, train_force, &std::cerr);
      std::cout << "best epoch " << s.best_epoch << "; checkpoint " << (fs::path(train_out) / "model.ckpt").string()
                << "\n";
    } else if (*eval) {
      cli::EvalOptions o;
      if (!eval_config.empty()) o = cli::eval_options_from_json(cli::read_json_file(eval_config), o);
      override_if(split, o.split);
      override_if(eval_beam, o.beam);
      const fs::path out = eval_out.empty() ? fs::path(eval_ckpt).parent_path() / ("eval_" + o.split) : fs::path(eval_out);
      const auto r = cli::cmd_eval(eval_ckpt, eval_data, out, o);
      std::ifstream table(out / "table.txt");
      std::cout << table.rdbuf();
      if (!std::isnan(r.pixel_accuracy)) std::cout << "CD pixel accuracy: " << r.pixel_accuracy << "\n";
      for (const auto& w : r.report.warnings) std::cerr << "warning: " << w << "\n";
    } else if (*infer) {
      const auto r = cli::cmd_infer(infer_ckpt, infer_pre, infer_post, infer_out, infer_beam);
      std::cout << r.caption << "\n";
      if (!r.mask) std::cerr << "baseline checkpoint: no change mask\n";
    } else if (*plot) {
      for (const auto& f : cli::cmd_plot(plot_log, plot_out)) std::cout << (fs::path(plot_out) / f).string() << "\n";
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return cli::kExitUsage;
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return cli::kExitDivergence;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return cli::kExitData;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return cli::kExitData;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return cli::kExitData;
  }
  return cli::kExitOk;
}
