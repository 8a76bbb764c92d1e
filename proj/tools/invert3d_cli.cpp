// invert3d: command-line front end for the pipeline.
//
//   invert3d <command> [--config FILE] [--seed N] [--out-dir DIR] [--override key=value]... [flags]
//   invert3d rerun RUN_DIR [--out-dir DIR]
//
// Each run writes a fresh directory under --out-dir and prints its manifest on stdout.
// Failures print one JSON error record on stderr and exit with the code of their kind.

#include "invert3d/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace invert3d;

namespace {

struct Options {
  std::string command;
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "runs";
  std::vector<std::string> overrides;
  std::optional<int> resolution;
  std::optional<double> lambda;
  std::optional<double> attention_factor;
  std::optional<std::string> loss_mode;
  std::optional<double> lr;
  std::optional<std::string> baseline;
  std::vector<std::string> source, target, style;
  std::map<std::string, std::string> inputs;
  std::string run_dir;
};

/// Stage whose learning rate --lr controls.
std::string lr_key(const std::string& command) {
  if (command == "train-codec") return "codec.learning_rate";
  if (command == "train-denoiser") return "train.learning_rate";
  if (command == "reconstruct") return "sds.scene_learning_rate";
  return "inversion.learning_rate";
}

json build_config(const Options& o) {
  json cfg = o.config_path.empty() ? default_config() : load_config_file(o.config_path);
  for (const auto& a : o.overrides) apply_override(cfg, a);
  if (o.seed) cfg["seed"] = *o.seed;
  if (o.resolution) apply_override(cfg, "resolution=" + std::to_string(*o.resolution));
  if (o.lambda) cfg["edit"]["lambda"] = *o.lambda;
  if (o.attention_factor) cfg["edit"]["attention_factor"] = *o.attention_factor;
  if (o.loss_mode) cfg["inversion"]["loss_mode"] = to_string(loss_mode_from_string(*o.loss_mode));
  if (o.lr) apply_override(cfg, lr_key(o.command) + "=" + json(*o.lr).dump());
  if (o.baseline) cfg["inversion"]["baseline"] = *o.baseline;
  if (!o.source.empty()) cfg["edit"]["source"] = o.source;
  if (!o.target.empty()) cfg["edit"]["target"] = o.target;
  if (!o.style.empty()) cfg["edit"]["style"] = o.style;
  for (const auto& [k, v] : o.inputs)
    if (!v.empty()) cfg["inputs"][k] = std::filesystem::absolute(v).string();
  return cfg;
}

int report_error(ErrorKind k, const std::string& message) {
  std::cerr << error_record(k, message).dump() << std::endl;
  return exit_code(k);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Camera-conditioned 3D textual inversion at desk scale"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&o](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "JSON config; missing keys take their defaults");
    sub->add_option("--seed", o.seed, "Root seed");
    sub->add_option("--out-dir", o.out_dir, "Directory that receives the run directory")->capture_default_str();
    sub->add_option("--override", o.overrides, "Dotted key=value override (repeatable)");
    sub->add_option("--resolution", o.resolution, "Render and training resolution");
    sub->add_option("--lambda", o.lambda, "Edit delta scale");
    sub->add_option("--attention-factor", o.attention_factor, "Cross-attention factor c on style words");
    sub->add_option("--loss-mode", o.loss_mode, "epsilon_prediction or latent_reconstruction");
    sub->add_option("--lr", o.lr, "Learning rate of the command's optimiser");
    sub->add_option("--baseline", o.baseline, "invert: 3d (camera-conditioned) or 2d (single view)");
    sub->add_option("--source", o.source, "edit: source words");
    sub->add_option("--target", o.target, "edit: target words");
    sub->add_option("--style", o.style, "edit: style words");
    for (const char* name : {"corpus", "codec", "denoiser", "embedding", "run"})
      sub->add_option(std::string("--") + name, o.inputs[name], std::string("Input artifact: ") + name);
  };

  const std::map<std::string, std::string> help = {
      {"gen-data", "Write the synthetic captioned corpus"},
      {"train-codec", "Train or export the latent codec"},
      {"train-denoiser", "Train the camera-conditioned denoiser"},
      {"invert", "Invert a scene into a pseudo-token embedding"},
      {"reconstruct", "Distil a splat scene from an embedding"},
      {"edit", "Edit an embedding and generate the edited views"},
      {"ablate", "Embedding-size ablation"},
      {"eval", "Metrics report for a run directory"}};
  for (const auto& name : command_names()) {
    auto* sub = app.add_subcommand(name, help.at(name));
    add_common(sub);
    sub->callback([&o, name] { o.command = name; });
  }
  auto* rerun = app.add_subcommand("rerun", "Re-execute a run from its manifest and compare artifact hashes");
  rerun->add_option("run_dir", o.run_dir, "Run directory")->required();
  rerun->add_option("--out-dir", o.out_dir, "Where the new run directory goes (default: beside the original)");
  rerun->callback([&o] { o.command = "rerun"; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return report_error(ErrorKind::usage, e.what());
  }

  try {
    if (o.command == "rerun") {
      const bool explicit_out = rerun->count("--out-dir") > 0;
      const RerunReport r = rerun_from_manifest(o.run_dir, explicit_out ? std::optional<std::filesystem::path>(o.out_dir)
                                                                         : std::nullopt);
      std::cout << json{{"original", r.original.string()}, {"rerun", r.rerun.string()},
                        {"identical", r.identical()}, {"mismatched", r.mismatched}}.dump(2)
                << std::endl;
      if (!r.identical()) {
        std::cerr << json{{"error", "rerun_mismatch"}, {"exit_code", kExitMismatch}, {"mismatched", r.mismatched}}.dump()
                  << std::endl;
        return kExitMismatch;
      }
      return 0;
    }
    const RunResult r = run_command(o.command, build_config(o), o.out_dir);
    std::cout << r.manifest.dump(2) << std::endl;
    return 0;
  } catch (const Error& e) {
    return report_error(e.kind(), e.what());
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "internal"}, {"exit_code", 1}, {"message", e.what()}}.dump() << std::endl;
    return 1;
  }
}
