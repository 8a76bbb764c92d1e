#pragma once
// Experiment harness: JSON configuration with dotted overrides, the reference
// toy setup, metrics, the embedding-size ablation and the CLI commands with
// their append-only run directories and manifests.

#include "invert3d/codec.hpp"
#include "invert3d/denoiser.hpp"
#include "invert3d/distill.hpp"
#include "invert3d/errors.hpp"
#include "invert3d/inversion.hpp"
#include "invert3d/io.hpp"
#include "invert3d/personalize.hpp"
#include "invert3d/scene.hpp"
#include "invert3d/text_embed.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace invert3d {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Metrics

inline constexpr double kPsnrCap = 99.0;

/// 10 log10(1 / MSE) for images in [0, 1]; identical images report kPsnrCap.
inline double psnr(const Image& a, const Image& b) {
  require(a.same_shape(b) && a.pixels.size() == b.pixels.size(), ErrorKind::configuration, "psnr needs equal shapes");
  const double mse = mean_squared_error(a, b);
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

inline double mean_view_psnr(const std::vector<Image>& generated, const Scene& scene, const std::vector<Camera>& cameras) {
  require(generated.size() == cameras.size() && !cameras.empty(), ErrorKind::configuration, "one image per camera");
  double s = 0.0;
  for (std::size_t v = 0; v < cameras.size(); ++v) s += psnr(generated[v], render(scene, cameras[v]));
  return s / static_cast<double>(cameras.size());
}

// ---------------------------------------------------------------------------
// Configuration

/// Every recognised key with its default. Files and overrides may only set keys that exist here.
inline json default_config() {
  return json::parse(R"({
  "seed": 0,
  "resolution": 32,
  "vocabulary": {"dim": 64, "seed": 0},
  "corpus": {"num_splats": 12, "seed": 100, "extent": 1.0},
  "rig": {"azimuth_min": 0.0, "azimuth_max": 360.0, "elevation_min": -30.0, "elevation_max": 30.0,
          "radius": 2.5, "fov_y": 40.0},
  "codec": {"mode": "orthonormal", "patch_size": 4, "latent_channels": 48, "hidden": 96,
            "epochs": 50, "batch_size": 8, "learning_rate": 0.003, "views_per_scene": 16},
  "schedule": {"beta_start": 0.00085, "beta_end": 0.012, "timesteps": 1000},
  "denoiser": {"base_channels": 32, "attention_heads": 2, "levels": 2, "views_per_step": 4,
               "max_prompt_length": 64},
  "train": {"steps": 10000, "groups_per_step": 4, "learning_rate": 0.001, "view_pool": 64,
            "per_channel_scale": false},
  "inversion": {"steps": 600, "learning_rate": 0.005, "views_per_iteration": 4,
                "loss_mode": "epsilon_prediction", "num_vectors": 32, "init_word": "object",
                "template": ["S*"], "zero_camera": false, "baseline": "3d", "scene_index": 0,
                "adam_beta1": 0.9, "adam_beta2": 0.999, "adam_epsilon": 1e-8},
  "evaluation": {"heldout_cameras": 4, "heldout_seed": 999, "generation_steps": 50},
  "sds": {"iterations": 300, "scene_learning_rate": 0.01, "t_min": 20, "t_max": 980,
          "weight_fn": "one_minus_alpha_bar", "views_per_iteration": 4, "initial_splats": 64,
          "background": [1.0, 1.0, 1.0], "turnaround_every": 100},
  "edit": {"source": [], "target": [], "lambda": 1.0, "style": [], "attention_factor": 2.0,
           "mode": "post_softmax", "reconstruct": false},
  "ablate": {"sizes": [1, 4, 32], "seeds": [0, 1, 2]},
  "inputs": {"corpus": "", "codec": "", "denoiser": "", "embedding": "", "run": ""}
})");
}

namespace config_detail {

inline void merge_checked(json& base, const json& patch, const std::string& prefix) {
  require(patch.is_object(), ErrorKind::schema, "configuration section '" + prefix + "' must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    require(base.contains(it.key()), ErrorKind::schema, "unknown configuration key '" + key + "'");
    json& slot = base[it.key()];
    if (slot.is_object()) {
      merge_checked(slot, it.value(), key);
    } else {
      const bool number_ok = slot.is_number() && it.value().is_number();
      require(number_ok || slot.type() == it.value().type(), ErrorKind::schema,
              "configuration key '" + key + "' has the wrong type");
      slot = it.value();
    }
  }
}

}  // namespace config_detail

/// Defaults with `patch` merged on top; unknown keys and type changes are schema errors.
inline json resolve_config(const json& patch) {
  json cfg = default_config();
  if (!patch.is_null()) config_detail::merge_checked(cfg, patch, "");
  return cfg;
}

inline json load_config_file(const std::string& path) {
  const auto bytes = read_file(path);
  try {
    return resolve_config(json::parse(bytes.begin(), bytes.end()));
  } catch (const json::parse_error& e) {
    fail(ErrorKind::schema, "config " + path + " is not valid JSON: " + e.what());
  }
}

/// Applies "a.b.c=value"; the value is read as JSON when it parses, else as a string.
inline void apply_override(json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  require(eq != std::string::npos && eq > 0, ErrorKind::usage, "override must look like key=value: " + assignment);
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json patch = value;
  std::vector<std::string> keys;
  for (std::size_t start = 0;;) {
    const auto dot = path.find('.', start);
    keys.push_back(path.substr(start, dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  for (auto it = keys.rbegin(); it != keys.rend(); ++it) patch = json{{*it, patch}};
  config_detail::merge_checked(cfg, patch, "");
}

template <typename T>
T cfg_get(const json& cfg, const std::string& section, const std::string& key) {
  try {
    return cfg.at(section).at(key).get<T>();
  } catch (const json::exception& e) {
    fail(ErrorKind::schema, "bad configuration value " + section + "." + key + ": " + e.what());
  }
}

inline CameraRig rig_from(const json& cfg) {
  const int res = cfg.at("resolution").get<int>();
  require(res >= 1, ErrorKind::configuration, "resolution must be positive");
  CameraRig r;
  r.azimuth_min = cfg_get<double>(cfg, "rig", "azimuth_min");
  r.azimuth_max = cfg_get<double>(cfg, "rig", "azimuth_max");
  r.elevation_min = cfg_get<double>(cfg, "rig", "elevation_min");
  r.elevation_max = cfg_get<double>(cfg, "rig", "elevation_max");
  r.radius = cfg_get<double>(cfg, "rig", "radius");
  r.fov_y = cfg_get<double>(cfg, "rig", "fov_y");
  r.height = r.width = res;
  return r;
}

inline Vocabulary vocabulary_from(const json& cfg) {
  return default_vocabulary(cfg_get<int>(cfg, "vocabulary", "dim"), cfg_get<std::uint64_t>(cfg, "vocabulary", "seed"));
}

inline CodecConfig codec_config_from(const json& cfg) {
  const auto mode = codec_mode_from_string(cfg_get<std::string>(cfg, "codec", "mode"));
  const int p = cfg_get<int>(cfg, "codec", "patch_size");
  if (mode == CodecMode::orthonormal) return CodecConfig::orthonormal(p);
  return CodecConfig::learned(p, cfg_get<int>(cfg, "codec", "latent_channels"), cfg_get<int>(cfg, "codec", "hidden"));
}

inline DiffusionSchedule schedule_from(const json& cfg) {
  return make_schedule(cfg_get<double>(cfg, "schedule", "beta_start"), cfg_get<double>(cfg, "schedule", "beta_end"),
                       cfg_get<int>(cfg, "schedule", "timesteps"));
}

inline DenoiserConfig denoiser_config_from(const json& cfg) {
  DenoiserConfig d;
  d.base_channels = cfg_get<int>(cfg, "denoiser", "base_channels");
  d.attention_heads = cfg_get<int>(cfg, "denoiser", "attention_heads");
  d.levels = cfg_get<int>(cfg, "denoiser", "levels");
  d.views_per_step = cfg_get<int>(cfg, "denoiser", "views_per_step");
  d.max_prompt_length = cfg_get<int>(cfg, "denoiser", "max_prompt_length");
  return d;
}

inline std::uint64_t root_seed(const json& cfg) { return cfg.at("seed").get<std::uint64_t>(); }

/// Per-stage seed fanned out from the root seed.
inline std::uint64_t stage_seed(const json& cfg, std::string_view stage) { return derive_seed(root_seed(cfg), stage); }

inline DenoiserTrainOptions train_options_from(const json& cfg) {
  DenoiserTrainOptions o;
  o.steps = cfg_get<int>(cfg, "train", "steps");
  o.groups_per_step = cfg_get<int>(cfg, "train", "groups_per_step");
  o.learning_rate = cfg_get<double>(cfg, "train", "learning_rate");
  o.view_pool = cfg_get<int>(cfg, "train", "view_pool");
  o.per_channel_scale = cfg_get<bool>(cfg, "train", "per_channel_scale");
  o.seed = stage_seed(cfg, "train-denoiser");
  o.rig = rig_from(cfg);
  return o;
}

inline InversionConfig inversion_config_from(const json& cfg) {
  InversionConfig c;
  c.steps = cfg_get<int>(cfg, "inversion", "steps");
  c.learning_rate = cfg_get<double>(cfg, "inversion", "learning_rate");
  c.views_per_iteration = cfg_get<int>(cfg, "inversion", "views_per_iteration");
  c.loss_mode = loss_mode_from_string(cfg_get<std::string>(cfg, "inversion", "loss_mode"));
  c.num_vectors = cfg_get<int>(cfg, "inversion", "num_vectors");
  c.init_word = cfg_get<std::string>(cfg, "inversion", "init_word");
  c.prompt_template = cfg_get<std::vector<std::string>>(cfg, "inversion", "template");
  c.zero_camera = cfg_get<bool>(cfg, "inversion", "zero_camera");
  c.adam_beta1 = cfg_get<double>(cfg, "inversion", "adam_beta1");
  c.adam_beta2 = cfg_get<double>(cfg, "inversion", "adam_beta2");
  c.adam_epsilon = cfg_get<double>(cfg, "inversion", "adam_epsilon");
  c.seed = stage_seed(cfg, "invert");
  c.rig = rig_from(cfg);
  return c;
}

inline SDSConfig sds_config_from(const json& cfg) {
  SDSConfig c;
  c.iterations = cfg_get<int>(cfg, "sds", "iterations");
  c.scene_learning_rate = cfg_get<double>(cfg, "sds", "scene_learning_rate");
  c.t_min = cfg_get<int>(cfg, "sds", "t_min");
  c.t_max = cfg_get<int>(cfg, "sds", "t_max");
  c.weight_fn = weight_fn_from_string(cfg_get<std::string>(cfg, "sds", "weight_fn"));
  c.views_per_iteration = cfg_get<int>(cfg, "sds", "views_per_iteration");
  c.seed = stage_seed(cfg, "reconstruct");
  c.rig = rig_from(cfg);
  return c;
}

inline ControlMode control_mode_from_string(const std::string& s) {
  if (s == "post_softmax") return ControlMode::post_softmax;
  if (s == "pre_softmax") return ControlMode::pre_softmax;
  fail(ErrorKind::configuration, "unknown attention control mode '" + s + "'");
}

inline EditRequest edit_request_from(const json& cfg) {
  EditRequest r;
  r.source_words = cfg_get<std::vector<std::string>>(cfg, "edit", "source");
  r.target_words = cfg_get<std::vector<std::string>>(cfg, "edit", "target");
  r.lambda = cfg_get<double>(cfg, "edit", "lambda");
  r.style_words = cfg_get<std::vector<std::string>>(cfg, "edit", "style");
  r.attention_factor = cfg_get<double>(cfg, "edit", "attention_factor");
  r.mode = control_mode_from_string(cfg_get<std::string>(cfg, "edit", "mode"));
  r.seed = stage_seed(cfg, "edit");
  return r;
}

// ---------------------------------------------------------------------------
// Reference toy setup

/// Six captioned scenes with distinct palettes and backgrounds.
inline std::vector<CaptionedScene> reference_corpus(int num_splats = 12, std::uint64_t seed = 100, double extent = 1.0) {
  struct Def {
    std::vector<std::string> caption;
    std::vector<Vec3> palette;
    Vec3 background;
  };
  const std::vector<Def> defs = {
      {{"red", "toy"}, {Vec3(0.9, 0.15, 0.15), Vec3(0.95, 0.85, 0.2)}, Vec3(1.0, 1.0, 1.0)},
      {{"blue", "vase"}, {Vec3(0.15, 0.25, 0.9), Vec3(0.9, 0.9, 0.9)}, Vec3(0.1, 0.1, 0.1)},
      {{"green", "lamp"}, {Vec3(0.2, 0.8, 0.25), Vec3(0.1, 0.1, 0.1)}, Vec3(0.55, 0.75, 0.95)},
      {{"yellow", "chair"}, {Vec3(0.95, 0.85, 0.15), Vec3(0.5, 0.3, 0.1)}, Vec3(0.3, 0.3, 0.3)},
      {{"purple", "bird"}, {Vec3(0.6, 0.2, 0.8), Vec3(0.95, 0.6, 0.2)}, Vec3(0.95, 0.9, 0.7)},
      {{"orange", "car"}, {Vec3(0.95, 0.5, 0.1), Vec3(0.2, 0.2, 0.6)}, Vec3(0.2, 0.35, 0.2)},
  };
  std::vector<CaptionedScene> out;
  for (std::size_t i = 0; i < defs.size(); ++i)
    out.push_back({make_synthetic_scene({.num_splats = num_splats,
                                         .seed = seed + i,
                                         .palette = defs[i].palette,
                                         .extent = extent,
                                         .background = defs[i].background}),
                   defs[i].caption});
  return out;
}

inline std::vector<CaptionedScene> corpus_from_config(const json& cfg) {
  return reference_corpus(cfg_get<int>(cfg, "corpus", "num_splats"), cfg_get<std::uint64_t>(cfg, "corpus", "seed"),
                          cfg_get<double>(cfg, "corpus", "extent"));
}

inline json corpus_to_json(const std::vector<CaptionedScene>& corpus) {
  json items = json::array();
  for (const auto& c : corpus) items.push_back({{"caption", c.caption}, {"scene", scene_to_json(c.scene)}});
  return {{"scenes", items}};
}

inline std::vector<CaptionedScene> corpus_from_json(const json& j) {
  std::vector<CaptionedScene> out;
  try {
    for (const auto& item : j.at("scenes"))
      out.push_back({scene_from_json(item.at("scene")), item.at("caption").get<std::vector<std::string>>()});
  } catch (const json::exception& e) {
    fail(ErrorKind::schema, std::string("bad corpus document: ") + e.what());
  }
  return out;
}

inline std::vector<Camera> heldout_cameras(const json& cfg) {
  Rng rng = make_rng(cfg_get<std::uint64_t>(cfg, "evaluation", "heldout_seed"));
  std::vector<Camera> cams;
  const CameraRig rig = rig_from(cfg);
  for (int i = 0; i < cfg_get<int>(cfg, "evaluation", "heldout_cameras"); ++i) cams.push_back(sample_camera(rng, rig));
  return cams;
}

/// Trained reference models plus the corpus they were trained on.
struct ReferenceSetup {
  json config;
  std::vector<CaptionedScene> corpus;
  Codec codec;
  Vocabulary vocab;
  DiffusionSchedule schedule;
  Denoiser denoiser;
  std::vector<double> loss_curve;

  [[nodiscard]] FrozenModels models() const { return {denoiser, codec, vocab, schedule}; }
  [[nodiscard]] const Scene& scene() const {
    return corpus.at(static_cast<std::size_t>(cfg_get<int>(config, "inversion", "scene_index"))).scene;
  }
  [[nodiscard]] std::vector<Camera> heldout() const { return heldout_cameras(config); }
};

inline ReferenceSetup build_reference_setup(const json& cfg) {
  ReferenceSetup r{cfg, corpus_from_config(cfg), Codec(codec_config_from(cfg)), vocabulary_from(cfg), schedule_from(cfg), {}, {}};
  require(r.codec.trained(), ErrorKind::configuration, "the reference setup uses the orthonormal codec");
  auto res = train_denoiser(r.corpus, r.codec, r.vocab, denoiser_config_from(cfg), r.schedule, train_options_from(cfg));
  r.denoiser = std::move(res.denoiser);
  r.loss_curve = std::move(res.loss_curve);
  return r;
}

// ---------------------------------------------------------------------------
// Embedding-size ablation

struct AblationRow {
  int num_vectors = 0;
  std::uint64_t seed = 0;
  double final_loss = 0.0;        // deterministic held-out evaluation loss of z*
  double final_trace_loss = 0.0;  // mean of the last 50 trace losses
  double final_psnr = 0.0;        // mean held-out PSNR of views generated from z*
};

struct AblationTable {
  std::vector<AblationRow> rows;

  /// Mean of each column over seeds, per N, in first-seen order.
  [[nodiscard]] std::vector<AblationRow> summary() const {
    std::vector<AblationRow> out;
    std::vector<int> counts;
    for (const auto& r : rows) {
      auto it = std::find_if(out.begin(), out.end(), [&](const AblationRow& o) { return o.num_vectors == r.num_vectors; });
      if (it == out.end()) {
        out.push_back({r.num_vectors, 0, 0.0, 0.0, 0.0});
        counts.push_back(0);
        it = out.end() - 1;
      }
      const auto k = static_cast<std::size_t>(it - out.begin());
      it->final_loss += r.final_loss;
      it->final_trace_loss += r.final_trace_loss;
      it->final_psnr += r.final_psnr;
      ++counts[k];
    }
    for (std::size_t k = 0; k < out.size(); ++k) {
      out[k].final_loss /= counts[k];
      out[k].final_trace_loss /= counts[k];
      out[k].final_psnr /= counts[k];
    }
    return out;
  }
};

inline AblationTable ablate_embedding_size(const std::vector<int>& sizes, const std::vector<std::uint64_t>& seeds,
                                           const InversionConfig& base, const FrozenModels& m, const Scene& scene,
                                           const std::vector<Camera>& heldout, int generation_steps) {
  require(!sizes.empty() && !seeds.empty(), ErrorKind::configuration, "ablation needs sizes and seeds");
  AblationTable table;
  for (int n : sizes) {
    for (std::uint64_t seed : seeds) {
      InversionConfig c = base;
      c.num_vectors = n;
      c.seed = seed;
      const InversionResult r = invert3d(scene, m, c);
      AblationRow row;
      row.num_vectors = n;
      row.seed = seed;
      EvaluationOptions eo;
      eo.prompt_template = c.prompt_template;
      eo.loss_mode = c.loss_mode;
      row.final_loss = evaluate_embedding(m, r.z_star, scene, heldout, eo);
      const std::size_t len = r.trace.loss.size(), w = std::min<std::size_t>(50, len);
      row.final_trace_loss = mean_of(r.trace.loss, len - w, len);
      row.final_psnr =
          mean_view_psnr(generate_views(r.z_star, heldout, m, generation_steps, seed, nullptr, c.prompt_template).images,
                         scene, heldout);
      table.rows.push_back(row);
    }
  }
  return table;
}

inline json to_json(const AblationTable& t) {
  json rows = json::array(), summary = json::array();
  for (const auto& r : t.rows)
    rows.push_back({{"num_vectors", r.num_vectors}, {"seed", r.seed}, {"final_loss", r.final_loss},
                    {"final_trace_loss", r.final_trace_loss}, {"final_psnr", r.final_psnr}});
  for (const auto& r : t.summary())
    summary.push_back({{"num_vectors", r.num_vectors}, {"final_loss", r.final_loss},
                       {"final_trace_loss", r.final_trace_loss}, {"final_psnr", r.final_psnr}});
  return {{"rows", rows}, {"summary", summary}};
}

// ---------------------------------------------------------------------------
// Metrics report

inline constexpr const char* kMetricsSchema = "invert3d.metrics/1";

/// Empty when `report` follows the metrics schema, otherwise one message per violation.
inline std::vector<std::string> validate_metrics_report(const json& report) {
  std::vector<std::string> errs;
  auto need = [&](const char* key, auto pred, const char* what) {
    if (!report.contains(key) || !pred(report.at(key))) errs.push_back(std::string(key) + " must be " + what);
  };
  if (!report.is_object()) return {"report must be an object"};
  need("schema", [](const json& v) { return v.is_string() && v.get<std::string>() == kMetricsSchema; }, kMetricsSchema);
  need("run_id", [](const json& v) { return v.is_string(); }, "a string");
  need("command", [](const json& v) { return v.is_string(); }, "a string");
  need("per_view_psnr", [](const json& v) {
    if (!v.is_array()) return false;
    for (const auto& x : v)
      if (!x.is_number() || x.get<double>() < 0.0 || x.get<double>() > kPsnrCap) return false;
    return true;
  }, "an array of numbers in [0, 99]");
  need("mean_psnr", [](const json& v) { return v.is_null() || v.is_number(); }, "a number or null");
  need("latent_mse", [](const json& v) { return v.is_null() || (v.is_number() && v.get<double>() >= 0.0); },
       "a non-negative number or null");
  need("loss_traces", [](const json& v) {
    if (!v.is_object()) return false;
    for (const auto& [k, arr] : v.items()) {
      if (!arr.is_array()) return false;
      for (const auto& x : arr)
        if (!x.is_number()) return false;
    }
    return true;
  }, "an object of numeric arrays");
  need("ablation", [](const json& v) {
    if (!v.is_array()) return false;
    for (const auto& r : v)
      if (!r.is_object() || !r.contains("num_vectors") || !r.contains("final_loss") || !r.contains("final_psnr") ||
          !r["num_vectors"].is_number_integer() || !r["final_loss"].is_number() || !r["final_psnr"].is_number())
        return false;
    return true;
  }, "an array of {num_vectors, final_loss, final_psnr}");
  return errs;
}

// ---------------------------------------------------------------------------
// Runs

inline int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::usage: return 2;
    case ErrorKind::configuration: return 3;
    case ErrorKind::missing_artifact: return 4;
    case ErrorKind::schema: return 5;
    case ErrorKind::numerical: return 6;
  }
  return 1;
}

inline constexpr int kExitMismatch = 7;

inline json error_record(ErrorKind k, const std::string& message) {
  return {{"error", to_string(k)}, {"exit_code", exit_code(k)}, {"message", message}};
}

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names = {"gen-data", "train-codec", "train-denoiser", "invert",
                                                 "reconstruct", "edit", "ablate", "eval"};
  return names;
}

/// One run in progress: owns a fresh directory and records every artifact it writes.
class RunContext {
 public:
  RunContext(std::string command, json config, const std::filesystem::path& out_root)
      : command_(std::move(command)), config_(std::move(config)), out_root_(out_root) {}

  [[nodiscard]] const json& config() const { return config_; }
  [[nodiscard]] const std::string& command() const { return command_; }
  [[nodiscard]] const std::string& run_id() const { return run_id_; }
  [[nodiscard]] const std::filesystem::path& dir() const { return dir_; }

  /// Resolves and hashes a named input; empty config value means "not provided".
  /// A directory input is identified by the hash of its manifest.json.
  std::optional<std::string> input(const std::string& name) {
    const std::string p = config_.at("inputs").at(name).get<std::string>();
    if (p.empty()) return std::nullopt;
    require(std::filesystem::exists(p), ErrorKind::missing_artifact, "input '" + name + "' not found: " + p);
    const std::string hashed = std::filesystem::is_directory(p) ? (std::filesystem::path(p) / "manifest.json").string() : p;
    inputs_[name] = {{"path", p}, {"sha256", sha256_file(hashed)}};
    return p;
  }

  std::string require_input(const std::string& name) {
    auto p = input(name);
    require(p.has_value(), ErrorKind::missing_artifact, "command '" + command_ + "' needs inputs." + name);
    return *p;
  }

  /// Creates the run directory; call after all inputs are resolved. The run id is a hash of
  /// command, config and input hashes, so a repeated run shares its id and lands in a suffixed directory.
  void open() {
    json key = {{"command", command_}, {"config", config_}, {"inputs", inputs_}};
    run_id_ = command_ + "-" + sha256_hex(key.dump()).substr(0, 12);
    std::filesystem::create_directories(out_root_);
    for (int k = 1;; ++k) {
      const std::string name = k == 1 ? run_id_ : run_id_ + "-" + std::to_string(k);
      if (std::filesystem::create_directory(out_root_ / name)) {
        dir_ = out_root_ / name;
        return;
      }
    }
  }

  [[nodiscard]] std::string path(const std::string& rel) const { return (dir_ / rel).string(); }

  /// Records an artifact already written at `rel`.
  void record(const std::string& rel) {
    const std::string p = path(rel);
    require(std::filesystem::exists(p), ErrorKind::missing_artifact, "artifact was not written: " + p);
    outputs_[rel] = sha256_file(p);
  }

  void write_text_artifact(const std::string& rel, const std::string& text) {
    std::filesystem::create_directories(std::filesystem::path(path(rel)).parent_path());
    write_text(path(rel), text);
    record(rel);
  }
  void write_json_artifact(const std::string& rel, const json& j) { write_text_artifact(rel, j.dump(2) + "\n"); }
  void write_png_artifact(const std::string& rel, const Image& img) {
    std::filesystem::create_directories(std::filesystem::path(path(rel)).parent_path());
    write_png(path(rel), img);
    record(rel);
  }
  void write_npy_artifact(const std::string& rel, const std::vector<double>& data, const std::vector<std::size_t>& shape) {
    std::filesystem::create_directories(std::filesystem::path(path(rel)).parent_path());
    write_npy(path(rel), data, shape);
    record(rel);
  }

  void note(const std::string& key, json value) { notes_[key] = std::move(value); }

  [[nodiscard]] json manifest() const {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char ts[32];
    std::strftime(ts, sizeof ts, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    json seeds = {{"root", root_seed(config_)}};
    for (const char* s : {"train-codec", "train-denoiser", "invert", "reconstruct", "edit", "ablate"})
      seeds[s] = stage_seed(config_, s);
    return {{"run_id", run_id_},   {"directory", dir_.string()}, {"timestamp", ts},
            {"command", command_}, {"config", config_},          {"seeds", seeds},
            {"inputs", inputs_},   {"outputs", outputs_},        {"notes", notes_}};
  }

  void finish() { write_text(path("manifest.json"), manifest().dump(2) + "\n"); }

 private:
  std::string command_;
  json config_;
  std::filesystem::path out_root_;
  std::filesystem::path dir_;
  std::string run_id_;
  json inputs_ = json::object();
  json outputs_ = json::object();
  json notes_ = json::object();
};

namespace run_detail {

inline std::vector<CaptionedScene> corpus(RunContext& ctx) {
  if (auto p = ctx.input("corpus")) {
    const auto bytes = read_file(*p);
    try {
      return corpus_from_json(json::parse(bytes.begin(), bytes.end()));
    } catch (const json::parse_error& e) {
      fail(ErrorKind::schema, "corpus " + *p + " is not valid JSON: " + e.what());
    }
  }
  return corpus_from_config(ctx.config());
}

inline Codec codec(RunContext& ctx) {
  if (auto p = ctx.input("codec")) {
    Codec c = Codec::load(*p);
    require(c.trained(), ErrorKind::configuration, "codec checkpoint is untrained: " + *p);
    return c;
  }
  Codec c(codec_config_from(ctx.config()));
  require(c.trained(), ErrorKind::missing_artifact, "a learned codec needs inputs.codec from train-codec");
  return c;
}

inline Denoiser denoiser(RunContext& ctx) {
  Denoiser d = Denoiser::load(ctx.require_input("denoiser"));
  require(d.trained(), ErrorKind::configuration, "denoiser checkpoint is untrained");
  return d;
}

inline PseudoToken embedding(RunContext& ctx) { return load_embedding(ctx.require_input("embedding")).first; }

inline const Scene& target_scene(const RunContext& ctx, const std::vector<CaptionedScene>& corpus) {
  const int i = cfg_get<int>(ctx.config(), "inversion", "scene_index");
  require(i >= 0 && i < static_cast<int>(corpus.size()), ErrorKind::configuration, "inversion.scene_index out of range");
  return corpus[static_cast<std::size_t>(i)].scene;
}

inline std::string curve_csv(const std::string& col, const std::vector<double>& xs) {
  CsvTable t{{"step", col}, {}};
  for (std::size_t i = 0; i < xs.size(); ++i) t.add({std::to_string(i), csv_number(xs[i])});
  return t.str();
}

inline std::vector<double> read_curve(const std::string& path, const std::string& col) {
  const auto bytes = read_file(path);
  const CsvTable t = parse_csv(std::string(bytes.begin(), bytes.end()));
  const auto it = std::find(t.header.begin(), t.header.end(), col);
  require(it != t.header.end(), ErrorKind::schema, "column '" + col + "' missing from " + path);
  const auto k = static_cast<std::size_t>(it - t.header.begin());
  std::vector<double> out;
  for (const auto& r : t.rows) out.push_back(std::stod(r[k]));
  return out;
}

inline Image turnaround(const Scene& s, const CameraRig& rig) { return image_grid([&] {
  std::vector<Image> views;
  for (const auto& c : turntable_cameras(rig, 4, 15.0)) views.push_back(render(s, c));
  return views;
}(), 4); }

// Commands

inline void gen_data(RunContext& ctx) {
  const auto corpus = corpus_from_config(ctx.config());
  ctx.open();
  ctx.write_json_artifact("corpus.json", corpus_to_json(corpus));
  std::vector<Image> previews;
  for (const auto& c : corpus)
    for (const auto& cam : turntable_cameras(rig_from(ctx.config()), 4, 15.0)) previews.push_back(render(c.scene, cam));
  ctx.write_png_artifact("preview.png", image_grid(previews, 4));
}

inline void train_codec_cmd(RunContext& ctx) {
  const json& cfg = ctx.config();
  const auto corpus = run_detail::corpus(ctx);
  ctx.open();
  const CodecConfig cc = codec_config_from(cfg);
  if (cc.mode == CodecMode::orthonormal) {
    Codec c(cc);
    c.save(ctx.path("codec.iv3w"));
    ctx.record("codec.iv3w");
    ctx.note("training", "orthonormal codec needs no training");
    return;
  }
  const CameraRig rig = rig_from(cfg);
  std::vector<Image> data;
  Rng rng = make_rng(derive_seed(stage_seed(cfg, "train-codec"), "views"));
  for (const auto& item : corpus)
    for (int i = 0; i < cfg_get<int>(cfg, "codec", "views_per_scene"); ++i) data.push_back(render(item.scene, sample_camera(rng, rig)));
  CodecTrainOptions opt;
  opt.epochs = cfg_get<int>(cfg, "codec", "epochs");
  opt.batch_size = cfg_get<int>(cfg, "codec", "batch_size");
  opt.learning_rate = cfg_get<double>(cfg, "codec", "learning_rate");
  opt.seed = stage_seed(cfg, "train-codec");
  const auto res = train_codec(data, cc, opt);
  res.codec.save(ctx.path("codec.iv3w"));
  ctx.record("codec.iv3w");
  ctx.write_text_artifact("loss_trace.csv", curve_csv("loss", res.epoch_loss));
}

inline void train_denoiser_cmd(RunContext& ctx) {
  const json& cfg = ctx.config();
  const auto corpus = run_detail::corpus(ctx);
  const Codec c = run_detail::codec(ctx);
  ctx.open();
  auto res = train_denoiser(corpus, c, vocabulary_from(cfg), denoiser_config_from(cfg), schedule_from(cfg),
                            train_options_from(cfg));
  json info = res.denoiser.training_info();
  info["run_id"] = ctx.run_id();
  res.denoiser.mark_trained(info);
  res.denoiser.save(ctx.path("denoiser.iv3w"));
  ctx.record("denoiser.iv3w");
  ctx.write_text_artifact("loss_trace.csv", curve_csv("loss", res.loss_curve));
}

inline void invert_cmd(RunContext& ctx) {
  const json& cfg = ctx.config();
  const auto corpus = run_detail::corpus(ctx);
  const Codec c = run_detail::codec(ctx);
  const Denoiser d = run_detail::denoiser(ctx);
  ctx.open();
  const Vocabulary vocab = vocabulary_from(cfg);
  const DiffusionSchedule s = schedule_from(cfg);
  const FrozenModels m{d, c, vocab, s};
  const Scene& scene = target_scene(ctx, corpus);
  const InversionConfig ic = inversion_config_from(cfg);
  const std::string baseline = cfg_get<std::string>(cfg, "inversion", "baseline");
  require(baseline == "3d" || baseline == "2d", ErrorKind::configuration, "inversion.baseline must be 3d or 2d");
  InversionResult r;
  if (baseline == "2d") {
    const Image target = render(scene, baseline_camera(ic.rig));
    ctx.write_png_artifact("target.png", target);
    r = invert2d(target, m, ic);
  } else {
    r = invert3d(scene, m, ic);
  }
  save_embedding(ctx.path("embedding.iv3d"), r.z_star, {ic.init_word, ic.seed, ctx.run_id(), r.z_star.name});
  ctx.record("embedding.iv3d");
  CsvTable trace{{"step", "loss", "timestep"}, {}};
  for (int v = 0; v < ic.views_per_iteration; ++v) {
    trace.header.push_back("azimuth_" + std::to_string(v));
    trace.header.push_back("elevation_" + std::to_string(v));
  }
  for (std::size_t i = 0; i < r.trace.loss.size(); ++i) {
    std::vector<std::string> row = {std::to_string(i), csv_number(r.trace.loss[i]), std::to_string(r.trace.timesteps[i])};
    for (const auto& cam : r.trace.cameras[i]) {
      row.push_back(csv_number(cam.azimuth));
      row.push_back(csv_number(cam.elevation));
    }
    trace.add(row);
  }
  ctx.write_text_artifact("trace.csv", trace.str());
  const std::size_t n = r.trace.loss.size(), w = std::min<std::size_t>(50, n);
  EvaluationOptions eo;
  eo.prompt_template = ic.prompt_template;
  eo.zero_camera = ic.zero_camera;
  eo.loss_mode = ic.loss_mode;
  ctx.write_json_artifact("summary.json", {{"first_window_mean", mean_of(r.trace.loss, 0, w)},
                                           {"last_window_mean", mean_of(r.trace.loss, n - w, n)},
                                           {"heldout_loss", evaluate_embedding(m, r.z_star, scene, heldout_cameras(cfg), eo)}});
}

inline void reconstruct_cmd(RunContext& ctx) {
  const json& cfg = ctx.config();
  const Codec c = run_detail::codec(ctx);
  const Denoiser d = run_detail::denoiser(ctx);
  const PseudoToken z = run_detail::embedding(ctx);
  ctx.open();
  const Vocabulary vocab = vocabulary_from(cfg);
  const DiffusionSchedule s = schedule_from(cfg);
  const FrozenModels m{d, c, vocab, s};
  const SDSConfig sc = sds_config_from(cfg);
  const auto bg = cfg_get<std::vector<double>>(cfg, "sds", "background");
  require(bg.size() == 3, ErrorKind::configuration, "sds.background needs 3 values");
  const Scene initial = initial_cloud(derive_seed(sc.seed, "init"), cfg_get<int>(cfg, "sds", "initial_splats"), 0.8,
                                      Vec3(bg[0], bg[1], bg[2]));
  const int every = cfg_get<int>(cfg, "sds", "turnaround_every");
  const auto r = reconstruct(z, initial, sc, m, nullptr, [&](int it, const Scene& sc_now) {
    if (every > 0 && (it + 1) % every == 0) {
      char name[48];
      std::snprintf(name, sizeof name, "turnaround/iter_%05d.png", it + 1);
      ctx.write_png_artifact(name, turnaround(sc_now, rig_from(cfg)));
    }
  });
  ctx.write_json_artifact("scene.json", scene_to_json(r.scene));
  CsvTable t{{"iteration", "timestep", "weighted_residual"}, {}};
  for (std::size_t i = 0; i < r.residual_trace.size(); ++i)
    t.add({std::to_string(i), std::to_string(r.timesteps[i]), csv_number(r.residual_trace[i])});
  ctx.write_text_artifact("trace.csv", t.str());
  ctx.write_png_artifact("turnaround.png", turnaround(r.scene, rig_from(cfg)));
}

inline void edit_cmd(RunContext& ctx) {
  const json& cfg = ctx.config();
  const Codec c = run_detail::codec(ctx);
  const Denoiser d = run_detail::denoiser(ctx);
  const PseudoToken z = run_detail::embedding(ctx);
  ctx.open();
  const Vocabulary vocab = vocabulary_from(cfg);
  const DiffusionSchedule s = schedule_from(cfg);
  const FrozenModels m{d, c, vocab, s};
  const EditRequest req = edit_request_from(cfg);
  const int steps = cfg_get<int>(cfg, "evaluation", "generation_steps");
  const auto cams = heldout_cameras(cfg);
  const auto out = personalize_views(z, req, cams, m, steps, true);
  ctx.write_png_artifact("edited_views.png", image_grid(out.views.images, 4));
  ctx.write_png_artifact("original_views.png", image_grid(generate_views(z, cams, m, steps, req.seed).images, 4));
  save_embedding(ctx.path("edited_embedding.iv3d"), out.plan.z_edit, {"", req.seed, ctx.run_id(), z.name});
  ctx.record("edited_embedding.iv3d");
  // One array per (layer, timestep): heads x queries x keys, before and after control.
  std::map<std::pair<int, int>, std::vector<const AttentionMap*>> groups;
  for (const auto& map : out.views.maps) groups[{map.layer, map.timestep}].push_back(&map);
  for (const auto& [key, maps] : groups) {
    const auto q = static_cast<std::size_t>(maps[0]->weights.rows()), k = static_cast<std::size_t>(maps[0]->weights.cols());
    std::vector<double> w, a;
    for (const auto* mp : maps)
      for (Eigen::Index i = 0; i < mp->weights.rows(); ++i)
        for (Eigen::Index j = 0; j < mp->weights.cols(); ++j) {
          w.push_back(mp->weights(i, j));
          a.push_back(mp->applied(i, j));
        }
    char stem[64];
    std::snprintf(stem, sizeof stem, "attention/layer%d_t%04d", key.first, key.second);
    ctx.write_npy_artifact(std::string(stem) + "_weights.npy", w, {maps.size(), q, k});
    ctx.write_npy_artifact(std::string(stem) + "_applied.npy", a, {maps.size(), q, k});
  }
  ctx.note("request", {{"source", req.source_words}, {"target", req.target_words}, {"lambda", req.lambda},
                       {"style", req.style_words}, {"attention_factor", req.attention_factor},
                       {"control_columns", out.plan.control.token_indices}});
  if (cfg_get<bool>(cfg, "edit", "reconstruct")) {
    const SDSConfig sc = sds_config_from(cfg);
    const auto bg = cfg_get<std::vector<double>>(cfg, "sds", "background");
    const Scene initial = initial_cloud(derive_seed(sc.seed, "init"), cfg_get<int>(cfg, "sds", "initial_splats"), 0.8,
                                        Vec3(bg.at(0), bg.at(1), bg.at(2)));
    const auto r = personalize_scene(z, req, sc, initial, m);
    ctx.write_json_artifact("scene.json", scene_to_json(r.scene));
    ctx.write_text_artifact("trace.csv", curve_csv("weighted_residual", r.residual_trace));
    ctx.write_png_artifact("turnaround.png", turnaround(r.scene, rig_from(cfg)));
  }
}

inline void ablate_cmd(RunContext& ctx) {
  const json& cfg = ctx.config();
  const auto corpus = run_detail::corpus(ctx);
  const Codec c = run_detail::codec(ctx);
  const Denoiser d = run_detail::denoiser(ctx);
  ctx.open();
  const Vocabulary vocab = vocabulary_from(cfg);
  const DiffusionSchedule s = schedule_from(cfg);
  const FrozenModels m{d, c, vocab, s};
  std::vector<std::uint64_t> seeds;
  for (auto k : cfg_get<std::vector<std::uint64_t>>(cfg, "ablate", "seeds")) seeds.push_back(derive_seed(stage_seed(cfg, "ablate"), "seed", k));
  const auto table = ablate_embedding_size(cfg_get<std::vector<int>>(cfg, "ablate", "sizes"), seeds,
                                           inversion_config_from(cfg), m, target_scene(ctx, corpus),
                                           heldout_cameras(cfg), cfg_get<int>(cfg, "evaluation", "generation_steps"));
  ctx.write_json_artifact("ablation.json", to_json(table));
  CsvTable t{{"num_vectors", "seed", "final_loss", "final_trace_loss", "final_psnr"}, {}};
  for (const auto& r : table.rows)
    t.add({std::to_string(r.num_vectors), std::to_string(r.seed), csv_number(r.final_loss), csv_number(r.final_trace_loss),
           csv_number(r.final_psnr)});
  ctx.write_text_artifact("ablation.csv", t.str());
}

inline json read_json_file(const std::string& path) {
  const auto bytes = read_file(path);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    fail(ErrorKind::schema, path + " is not valid JSON: " + e.what());
  }
}

/// Checks that every output listed in a run's manifest still hashes to its recorded value.
inline json verified_manifest(const std::filesystem::path& run_dir) {
  const json man = read_json_file((run_dir / "manifest.json").string());
  require(man.contains("outputs") && man.contains("command") && man.contains("config"), ErrorKind::schema,
          "incomplete manifest in " + run_dir.string());
  for (const auto& [rel, hash] : man.at("outputs").items())
    require(sha256_file((run_dir / rel).string()) == hash.get<std::string>(), ErrorKind::schema,
            "artifact " + rel + " no longer matches its manifest hash");
  return man;
}

inline void eval_cmd(RunContext& ctx) {
  const std::filesystem::path run_dir = ctx.config().at("inputs").at("run").get<std::string>();
  require(!run_dir.empty() && std::filesystem::is_directory(run_dir), ErrorKind::missing_artifact,
          "eval needs inputs.run pointing at a run directory");
  const json man = verified_manifest(run_dir);
  ctx.input("run");
  ctx.open();
  const std::string command = man.at("command").get<std::string>();
  const json& rcfg = man.at("config");
  json report = {{"schema", kMetricsSchema}, {"run_id", man.value("run_id", "")}, {"command", command},
                 {"per_view_psnr", json::array()}, {"mean_psnr", nullptr}, {"latent_mse", nullptr},
                 {"loss_traces", json::object()}, {"ablation", json::array()}};
  auto out = [&](const char* rel) { return (run_dir / rel).string(); };
  if (command == "train-denoiser" || command == "train-codec") {
    if (std::filesystem::exists(out("loss_trace.csv"))) report["loss_traces"]["training"] = read_curve(out("loss_trace.csv"), "loss");
  } else if (command == "invert" || command == "reconstruct") {
    const json& inputs = man.at("inputs");
    const auto corpus = inputs.contains("corpus")
                            ? corpus_from_json(read_json_file(inputs["corpus"]["path"].get<std::string>()))
                            : corpus_from_config(rcfg);
    const int idx = cfg_get<int>(rcfg, "inversion", "scene_index");
    const Scene& scene = corpus.at(static_cast<std::size_t>(idx)).scene;
    const auto cams = heldout_cameras(rcfg);
    std::vector<Image> views;
    if (command == "invert") {
      report["loss_traces"]["inversion"] = read_curve(out("trace.csv"), "loss");
      const Codec c = inputs.contains("codec") ? Codec::load(inputs["codec"]["path"].get<std::string>())
                                               : Codec(codec_config_from(rcfg));
      const Denoiser d = Denoiser::load(inputs.at("denoiser").at("path").get<std::string>());
      const Vocabulary vocab = vocabulary_from(rcfg);
      const DiffusionSchedule s = schedule_from(rcfg);
      const FrozenModels m{d, c, vocab, s};
      const PseudoToken z = load_embedding(out("embedding.iv3d")).first;
      const auto g = generate_views(z, cams, m, cfg_get<int>(rcfg, "evaluation", "generation_steps"),
                                    stage_seed(rcfg, "eval"), nullptr,
                                    cfg_get<std::vector<std::string>>(rcfg, "inversion", "template"));
      views = g.images;
      double se = 0.0;
      std::size_t count = 0;
      for (std::size_t v = 0; v < cams.size(); ++v) {
        const Latent gt = c.encode(render(scene, cams[v]));
        const Latent gen = d.normalizer().denormalize(g.latents[v]);
        for (std::size_t k = 0; k < gt.values.size(); ++k) se += std::pow(gt.values[k] - gen.values[k], 2);
        count += gt.values.size();
      }
      report["latent_mse"] = se / static_cast<double>(count);
    } else {
      report["loss_traces"]["sds_residual"] = read_curve(out("trace.csv"), "weighted_residual");
      const Scene rec = scene_from_json(read_json_file(out("scene.json")));
      for (const auto& cam : cams) views.push_back(render(rec, cam));
    }
    double sum = 0.0;
    for (std::size_t v = 0; v < cams.size(); ++v) {
      const double p = psnr(views[v], render(scene, cams[v]));
      report["per_view_psnr"].push_back(p);
      sum += p;
    }
    report["mean_psnr"] = sum / static_cast<double>(cams.size());
  } else if (command == "ablate") {
    report["ablation"] = read_json_file(out("ablation.json")).at("summary");
  }
  const auto errs = validate_metrics_report(report);
  require(errs.empty(), ErrorKind::schema, "metrics report violates its schema: " + (errs.empty() ? "" : errs[0]));
  ctx.write_json_artifact("metrics.json", report);
}

}  // namespace run_detail

struct RunResult {
  std::filesystem::path dir;
  json manifest;
};

/// Executes one CLI command into a fresh directory under `out_root`.
inline RunResult run_command(const std::string& command, const json& config, const std::filesystem::path& out_root) {
  static const std::map<std::string, std::function<void(RunContext&)>> table = {
      {"gen-data", run_detail::gen_data},       {"train-codec", run_detail::train_codec_cmd},
      {"train-denoiser", run_detail::train_denoiser_cmd}, {"invert", run_detail::invert_cmd},
      {"reconstruct", run_detail::reconstruct_cmd}, {"edit", run_detail::edit_cmd},
      {"ablate", run_detail::ablate_cmd},       {"eval", run_detail::eval_cmd}};
  const auto it = table.find(command);
  require(it != table.end(), ErrorKind::usage, "unknown command '" + command + "'");
  RunContext ctx(command, resolve_config(config), out_root);
  it->second(ctx);
  ctx.finish();
  return {ctx.dir(), ctx.manifest()};
}

struct RerunReport {
  std::filesystem::path original;
  std::filesystem::path rerun;
  std::vector<std::string> mismatched;  // outputs whose hashes differ or that are missing
  [[nodiscard]] bool identical() const { return mismatched.empty(); }
};

/// Re-executes a run from its manifest and compares every output hash.
inline RerunReport rerun_from_manifest(const std::filesystem::path& run_dir, std::optional<std::filesystem::path> out_root = {}) {
  const json man = run_detail::verified_manifest(run_dir);
  for (const auto& [name, rec] : man.at("inputs").items()) {
    const std::string p = rec.at("path").get<std::string>();
    if (name == "run") continue;
    require(std::filesystem::exists(p), ErrorKind::missing_artifact, "input " + name + " is gone: " + p);
    require(sha256_file(p) == rec.at("sha256").get<std::string>(), ErrorKind::schema,
            "input " + name + " changed since the run: " + p);
  }
  const RunResult again = run_command(man.at("command").get<std::string>(), man.at("config"),
                                      out_root.value_or(run_dir.parent_path()));
  RerunReport rep{run_dir, again.dir, {}};
  const json& before = man.at("outputs");
  const json& after = again.manifest.at("outputs");
  for (const auto& [rel, hash] : before.items())
    if (!after.contains(rel) || after.at(rel) != hash) rep.mismatched.push_back(rel);
  for (const auto& [rel, hash] : after.items())
    if (!before.contains(rel)) rep.mismatched.push_back(rel);
  return rep;
}

}  // namespace invert3d
