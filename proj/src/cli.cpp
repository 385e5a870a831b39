// SPDX-License-Identifier: Apache-2.0
#include "maskcycle/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "maskcycle/errors.hpp"
#include "maskcycle/evaluation.hpp"
#include "maskcycle/image_io.hpp"
#include "maskcycle/mask.hpp"
#include "maskcycle/nets.hpp"
#include "maskcycle/service.hpp"
#include "maskcycle/trainer.hpp"

namespace fs = std::filesystem;

namespace maskcycle {

namespace {

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void require_file(const fs::path& path, const std::string& what) {
  if (!fs::is_regular_file(path)) throw InputError(what + " not found: " + path.string());
}

void require_dir(const fs::path& path, const std::string& what) {
  if (!fs::is_directory(path)) throw InputError(what + " not found: " + path.string());
}

void check_scales(const std::vector<double>& scales) {
  if (scales.empty()) throw ParameterError("at least one scale is required");
  for (double s : scales)
    if (!(s > 0.0 && s <= 1.0)) throw ParameterError("scales must lie in (0, 1]");
}

/// --scheme accepts an inline JSON object, a path to a JSON file, or a variant
/// name whose parameters come from the remaining flags.
struct SchemeArgs {
  std::string spec = "multi-rectangles";
  std::optional<double> scale;
  std::optional<double> threshold;
  std::optional<int> min_max_num_rects;
  std::optional<double> min_sum_rel_area;
  std::optional<int> min_rect_size;
  std::optional<int> max_rect_size;

  void add_to(CLI::App* app) {
    app->add_option("--scheme", spec, "Variant name, inline JSON object or JSON file");
    app->add_option("--scale", scale, "Scale for centered-square and round");
    app->add_option("--threshold", threshold, "Threshold for attention-binarize");
    app->add_option("--min-max-num-rects", min_max_num_rects, "multi-rectangles: upper bound of the rectangle count floor");
    app->add_option("--min-sum-rel-area", min_sum_rel_area, "multi-rectangles: total relative area to reach");
    app->add_option("--min-rect-size", min_rect_size, "multi-rectangles: smallest side in pixels");
    app->add_option("--max-rect-size", max_rect_size, "multi-rectangles: largest side in pixels");
  }

  bool has_params() const {
    return scale || threshold || min_max_num_rects || min_sum_rel_area || min_rect_size || max_rect_size;
  }

  nlohmann::json to_json() const {
    nlohmann::json json;
    if (!spec.empty() && spec.front() == '{') {
      try {
        json = nlohmann::json::parse(spec);
      } catch (const nlohmann::json::exception& e) {
        throw ParameterError(std::string("--scheme: ") + e.what());
      }
    } else if (spec.size() > 5 && spec.ends_with(".json")) {
      json = read_json_file(spec);
    } else {
      json = {{"variant", spec}};
    }
    if (!json.is_object()) throw ParameterError("--scheme must describe a JSON object");
    if (scale) json["scale"] = *scale;
    if (threshold) json["threshold"] = *threshold;
    if (min_max_num_rects) json["min_max_num_rects"] = *min_max_num_rects;
    if (min_sum_rel_area) json["min_sum_rel_area"] = *min_sum_rel_area;
    if (min_rect_size) json["min_rect_size"] = *min_rect_size;
    if (max_rect_size) json["max_rect_size"] = *max_rect_size;
    return json;
  }
};

// ---- train -------------------------------------------------------------------------

struct TrainArgs {
  std::string config_path;
  std::string resume;
  bool dump_config = false;
  int log_every = 50;
  SchemeArgs scheme;
  bool scheme_given = false;
  std::optional<std::string> data_root, out_dir, criterion;
  std::optional<int> resolution, batch_size, max_images, generator_filters, discriminator_filters, encoder_filters,
      residual_blocks, buffer_capacity;
  std::optional<std::int64_t> iterations, checkpoint_every, snapshot_every, lr_decay_start;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr, lambda_gan_masked, lambda_cyc_masked, lambda_cyc, lambda_idt;
  bool no_flip = false, crop_jitter = false;
};

void add_train(CLI::App& app, TrainArgs& a) {
  auto* cmd = app.add_subcommand("train", "Train a model pair on an unpaired dataset");
  cmd->add_option("--config", a.config_path, "JSON training config; flags override its values");
  cmd->add_option("--resume", a.resume, "Continue from a checkpoint");
  cmd->add_flag("--dump-config", a.dump_config, "Print the effective config and exit");
  cmd->add_option("--log-every", a.log_every, "Print a loss line every N iterations (0 = quiet)");
  cmd->add_option("--data-root", a.data_root, "Folder holding trainA/ trainB/ testA/ testB/");
  cmd->add_option("--out", a.out_dir, "Output directory");
  cmd->add_option("--resolution", a.resolution);
  cmd->add_option("--batch-size", a.batch_size);
  cmd->add_option("--max-images", a.max_images);
  cmd->add_option("--iterations", a.iterations);
  cmd->add_option("--checkpoint-every", a.checkpoint_every);
  cmd->add_option("--snapshot-every", a.snapshot_every);
  cmd->add_option("--lr-decay-start", a.lr_decay_start);
  cmd->add_option("--seed", a.seed);
  cmd->add_option("--lr", a.lr);
  cmd->add_option("--lambda-gan-masked", a.lambda_gan_masked);
  cmd->add_option("--lambda-cyc-masked", a.lambda_cyc_masked);
  cmd->add_option("--lambda-cyc", a.lambda_cyc);
  cmd->add_option("--lambda-idt", a.lambda_idt);
  cmd->add_option("--criterion", a.criterion, "least-squares or log");
  cmd->add_option("--generator-filters", a.generator_filters);
  cmd->add_option("--discriminator-filters", a.discriminator_filters);
  cmd->add_option("--encoder-filters", a.encoder_filters);
  cmd->add_option("--residual-blocks", a.residual_blocks);
  cmd->add_option("--buffer-capacity", a.buffer_capacity);
  cmd->add_flag("--no-flip", a.no_flip);
  cmd->add_flag("--crop-jitter", a.crop_jitter);
  a.scheme.add_to(cmd);
}

TrainConfig build_train_config(const TrainArgs& a, const CLI::App& cmd) {
  nlohmann::json json = nlohmann::json::object();
  if (!a.config_path.empty()) {
    json = read_json_file(a.config_path);
  } else if (!a.resume.empty()) {
    require_file(a.resume, "checkpoint");
    json = load_checkpoint(a.resume).config;
    json.erase("iterations");
  }
  if (!json.is_object()) throw ParameterError("training config must be a JSON object");
  const auto set = [&](const char* group, const char* key, const auto& value) {
    if (!value) return;
    if (group) json[group][key] = *value;
    else json[key] = *value;
  };
  set("dataset", "root", a.data_root);
  set("dataset", "resolution", a.resolution);
  set("dataset", "batch_size", a.batch_size);
  set("dataset", "max_images", a.max_images);
  if (a.no_flip) json["dataset"]["flip"] = false;
  if (a.crop_jitter) json["dataset"]["crop_jitter"] = true;
  set(nullptr, "out_dir", a.out_dir);
  set(nullptr, "iterations", a.iterations);
  set(nullptr, "checkpoint_every", a.checkpoint_every);
  set(nullptr, "snapshot_every", a.snapshot_every);
  set(nullptr, "lr_decay_start", a.lr_decay_start);
  set(nullptr, "seed", a.seed);
  set(nullptr, "learning_rate", a.lr);
  set(nullptr, "criterion", a.criterion);
  set(nullptr, "buffer_capacity", a.buffer_capacity);
  set("weights", "lambda_gan_masked", a.lambda_gan_masked);
  set("weights", "lambda_cyc_masked", a.lambda_cyc_masked);
  set("weights", "lambda_cyc", a.lambda_cyc);
  set("weights", "lambda_idt", a.lambda_idt);
  set("net", "generator_filters", a.generator_filters);
  set("net", "discriminator_filters", a.discriminator_filters);
  set("net", "encoder_filters", a.encoder_filters);
  set("net", "residual_blocks", a.residual_blocks);
  if (a.resolution && json.contains("net")) json["net"]["resolution"] = *a.resolution;
  if (cmd.count("--scheme") > 0 || a.scheme.has_params()) {
    auto scheme = a.scheme;
    if (cmd.count("--scheme") == 0 && json.contains("scheme")) scheme.spec = json["scheme"].dump();
    json["scheme"] = scheme.to_json();
  }
  auto config = train_config_from_json(json);
  config.validate();
  return config;
}

int cmd_train(const TrainArgs& a, const CLI::App& cmd, std::ostream& out) {
  const auto config = build_train_config(a, cmd);
  if (a.dump_config) {
    out << to_json(config).dump(2) << "\n";
    return 0;
  }
  if (!a.resume.empty()) require_file(a.resume, "checkpoint");
  require_dir(config.dataset.folder('A'), "domain A folder");
  require_dir(config.dataset.folder('B'), "domain B folder");

  std::optional<fs::path> resume;
  if (!a.resume.empty()) resume = a.resume;
  const int every = a.log_every;
  const auto checkpoint = fit(config, resume, [&](std::int64_t it, const LossReport& report) {
    if (every > 0 && it % every == 0) out << report.to_json(it).dump() << std::endl;
  });
  out << "finished at iteration " << checkpoint.iteration << "; final checkpoint "
      << (config.out_dir / "final.pt").string() << "\n";
  return 0;
}

// ---- masks -------------------------------------------------------------------------

struct MasksArgs {
  SchemeArgs scheme;
  int size = 128;
  int count = 1;
  std::uint64_t seed = 0;
  std::string out_dir = "masks";
  std::string attention;
};

void add_masks(CLI::App& app, MasksArgs& a) {
  auto* cmd = app.add_subcommand("masks", "Sample masks and write them as 1-bit PNGs");
  a.scheme.add_to(cmd);
  cmd->add_option("--size", a.size, "Mask side in pixels");
  cmd->add_option("--count", a.count, "Number of masks");
  cmd->add_option("--seed", a.seed);
  cmd->add_option("--out", a.out_dir, "Output directory");
  cmd->add_option("--attention", a.attention, "Grayscale attention map for attention-binarize");
}

int cmd_masks(const MasksArgs& a, std::ostream& out) {
  if (a.size < 1 || a.size > 4096) throw ParameterError("--size must be in [1, 4096]");
  if (a.count < 1) throw ParameterError("--count must be positive");
  const auto scheme = scheme_from_json(a.scheme.to_json());
  validate_scheme(scheme);
  const bool attention = std::holds_alternative<AttentionBinarize>(scheme);
  if (attention && a.attention.empty()) throw ParameterError("attention-binarize needs --attention");
  if (attention) require_file(a.attention, "attention map");

  fs::create_directories(a.out_dir);
  Rng rng(a.seed);
  for (int i = 0; i < a.count; ++i) {
    Mask mask = attention ? resize_nearest(binarize_attention(read_attention_map(a.attention),
                                                              std::get<AttentionBinarize>(scheme).threshold),
                                           a.size)
                          : sample_mask(a.size, scheme, rng);
    char name[32];
    std::snprintf(name, sizeof(name), "mask_%04d.png", i);
    const auto path = fs::path(a.out_dir) / name;
    write_mask(path, mask);
    out << path.string() << " coverage=" << mask.coverage() << "\n";
  }
  return 0;
}

// ---- translate ---------------------------------------------------------------------

struct TranslateArgs {
  std::string checkpoint, direction = "a2b", image, mask, out = "translated.png";
};

void add_translate(CLI::App& app, TranslateArgs& a) {
  auto* cmd = app.add_subcommand("translate", "Translate one image with an optional mask");
  cmd->add_option("--ckpt", a.checkpoint, "Checkpoint file")->required();
  cmd->add_option("--dir", a.direction, "a2b or b2a");
  cmd->add_option("--image", a.image, "Input PNG or JPEG")->required();
  cmd->add_option("--mask", a.mask, "Binary mask PNG; default translates the whole image");
  cmd->add_option("--out", a.out, "Output PNG");
}

int cmd_translate(const TranslateArgs& a, std::ostream& out) {
  if (a.direction != "a2b" && a.direction != "b2a") throw ParameterError("--dir must be a2b or b2a");
  require_file(a.checkpoint, "checkpoint");
  require_file(a.image, "image");
  if (!a.mask.empty()) require_file(a.mask, "mask");
  const auto raw = read_image(a.image);
  std::optional<Mask> mask;
  if (!a.mask.empty()) mask = read_mask(a.mask);

  auto checkpoint = load_checkpoint(a.checkpoint);
  checkpoint.models.eval();
  const int size = checkpoint.models.config.resolution;
  const Mask m = mask ? resize_nearest(*mask, size) : Mask::full(size);
  torch::NoGradGuard no_grad;
  auto& generator = a.direction == "a2b" ? checkpoint.models.g_ab : checkpoint.models.g_ba;
  write_png(a.out, to_raw(translate(generator, resize_bilinear(to_tensor(raw), size), m)));
  out << "wrote " << a.out << "\n";
  return 0;
}

// ---- fid-matrix --------------------------------------------------------------------

struct FidArgs {
  std::string checkpoint, data_root, extractor = "toy-mnist", direction = "B", out = "fid.json", heatmap;
  std::vector<double> scales{0.5, 0.8, 1.0};
  bool train_half = false;
  bool no_cache = false;
  int max_images = 0;
  std::uint64_t seed = 0;
};

void add_fid(CLI::App& app, FidArgs& a) {
  auto* cmd = app.add_subcommand("fid-matrix", "Pairwise FID between real and generated sets");
  cmd->add_option("--ckpt", a.checkpoint, "Checkpoint file")->required();
  cmd->add_option("--data-root", a.data_root, "Dataset root; defaults to the one stored in the checkpoint");
  cmd->add_option("--extractor", a.extractor, "Feature extractor id (toy-mnist, inception)");
  cmd->add_option("--direction", a.direction, "Target domain of the generated sets: A or B");
  cmd->add_option("--scales", a.scales, "Centered-square mask scales")->delimiter(',');
  cmd->add_flag("--train-half", a.train_half, "Add a random half of the train split as a reference set");
  cmd->add_flag("--no-cache", a.no_cache, "Recompute real-data statistics");
  cmd->add_option("--max-images", a.max_images, "Cap on images per set");
  cmd->add_option("--seed", a.seed);
  cmd->add_option("--out", a.out, "Report JSON");
  cmd->add_option("--heatmap", a.heatmap, "Heatmap PNG");
}

int cmd_fid(const FidArgs& a, std::ostream& out) {
  check_scales(a.scales);
  if (a.direction != "A" && a.direction != "B") throw ParameterError("--direction must be A or B");
  if (a.max_images < 0 || a.max_images == 1) throw ParameterError("--max-images must be 0 or at least 2");
  require_file(a.checkpoint, "checkpoint");
  auto extractor = make_extractor(a.extractor);

  auto checkpoint = load_checkpoint(a.checkpoint);
  fs::path root = a.data_root;
  if (root.empty()) {
    const auto& cfg = checkpoint.config;
    if (cfg.contains("dataset") && cfg["dataset"].contains("root")) root = cfg["dataset"]["root"].get<std::string>();
  }
  if (root.empty()) throw ParameterError("--data-root is required for this checkpoint");
  require_dir(root, "dataset root");

  FidMatrixOptions options;
  options.scales = a.scales;
  options.direction = a.direction == "A" ? Direction::A : Direction::B;
  options.include_train_half = a.train_half;
  options.max_images = a.max_images;
  options.seed = a.seed;
  if (!a.no_cache) options.cache_dir = default_cache_dir();

  const auto report = fid_matrix(checkpoint.models, root, *extractor, options);
  const auto json = report.to_json();
  const auto text = json.dump(2);
  write_file_atomic(a.out, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  if (!a.heatmap.empty()) write_png(a.heatmap, report.matrix.heatmap());
  out << json["matrix"].dump() << "\n";
  for (const auto& [name, holds] : report.comparisons) out << (holds ? "holds:  " : "fails:  ") << name << "\n";
  return 0;
}

// ---- grid --------------------------------------------------------------------------

struct GridArgs {
  std::string checkpoint, direction = "a2b", data_root, out = "grid.png";
  std::vector<std::string> images;
  std::vector<double> scales{0.3, 0.5, 0.8, 1.0};
  int count = 4;
  bool round = false, no_square = false;
};

void add_grid(CLI::App& app, GridArgs& a) {
  auto* cmd = app.add_subcommand("grid", "Render sources x masks translation grids");
  cmd->add_option("--ckpt", a.checkpoint, "Checkpoint file")->required();
  cmd->add_option("--dir", a.direction, "a2b or b2a");
  cmd->add_option("--images", a.images, "Source images; default takes --count from the test split");
  cmd->add_option("--data-root", a.data_root, "Dataset root; defaults to the one stored in the checkpoint");
  cmd->add_option("--count", a.count, "Sources taken from the test split");
  cmd->add_option("--scales", a.scales, "Mask scales")->delimiter(',');
  cmd->add_flag("--round", a.round, "Add round masks");
  cmd->add_flag("--no-square", a.no_square, "Drop centered-square masks");
  cmd->add_option("--out", a.out, "Output PNG");
}

int cmd_grid(const GridArgs& a, std::ostream& out) {
  if (a.direction != "a2b" && a.direction != "b2a") throw ParameterError("--dir must be a2b or b2a");
  check_scales(a.scales);
  if (a.no_square && !a.round) throw ParameterError("--no-square without --round leaves no masks");
  if (a.images.empty() && a.count < 1) throw ParameterError("--count must be positive");
  require_file(a.checkpoint, "checkpoint");
  for (const auto& path : a.images) require_file(path, "image");

  auto checkpoint = load_checkpoint(a.checkpoint);
  checkpoint.models.eval();
  const int size = checkpoint.models.config.resolution;
  std::vector<torch::Tensor> sources;
  if (!a.images.empty()) {
    for (const auto& path : a.images) sources.push_back(resize_bilinear(to_tensor(read_image(path)), size));
  } else {
    fs::path root = a.data_root;
    if (root.empty() && checkpoint.config.contains("dataset"))
      root = checkpoint.config["dataset"].value("root", std::string{});
    if (root.empty()) throw ParameterError("--data-root or --images is required for this checkpoint");
    const auto folder = root / (a.direction == "a2b" ? "testA" : "testB");
    ImageFolder images(folder, size, a.count);
    for (std::size_t i = 0; i < images.size(); ++i) sources.push_back(images[i]);
  }
  const auto masks = grid_masks(size, a.scales, !a.no_square, a.round);
  auto& generator = a.direction == "a2b" ? checkpoint.models.g_ab : checkpoint.models.g_ba;
  const auto grid = render_output_grid(generator, sources, masks);
  write_png(a.out, to_raw(grid.sheet));
  out << "wrote " << a.out << " (" << grid.rows << "x" << grid.cols << ")\n";
  return 0;
}

// ---- serve -------------------------------------------------------------------------

struct ServeArgs {
  std::string checkpoint, host = "127.0.0.1";
  int port = 8787;
  std::vector<std::string> cors{"*"};
  std::size_t max_payload_mb = 10;
};

void add_serve(CLI::App& app, ServeArgs& a) {
  auto* cmd = app.add_subcommand("serve", "Serve a checkpoint over HTTP");
  cmd->add_option("--ckpt", a.checkpoint, "Checkpoint file")->required();
  cmd->add_option("--host", a.host);
  cmd->add_option("--port", a.port);
  cmd->add_option("--cors-origin", a.cors, "Allowed origins (repeatable; * allows any)");
  cmd->add_option("--max-payload-mb", a.max_payload_mb);
}

int cmd_serve(const ServeArgs& a, std::ostream& out) {
  if (a.port < 0 || a.port > 65535) throw ParameterError("--port must be in [0, 65535]");
  if (a.max_payload_mb == 0) throw ParameterError("--max-payload-mb must be positive");
  require_file(a.checkpoint, "checkpoint");
  ServiceOptions options;
  options.host = a.host;
  options.port = a.port;
  options.cors_origins = a.cors;
  options.max_payload_bytes = a.max_payload_mb * 1024 * 1024;
  InferenceService service(options);
  service.load(fs::path(a.checkpoint));
  out << "serving " << a.checkpoint << " on http://" << a.host << ":" << a.port << std::endl;
  if (!service.listen()) throw Error("cannot listen on " + a.host + ":" + std::to_string(a.port));
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Mask-conditioned unpaired image translation"};
  app.name("maskcycle");
  app.require_subcommand(1);
  TrainArgs train;
  MasksArgs masks;
  TranslateArgs translate_args;
  FidArgs fid;
  GridArgs grid;
  ServeArgs serve;
  add_train(app, train);
  add_masks(app, masks);
  add_translate(app, translate_args);
  add_fid(app, fid);
  add_grid(app, grid);
  add_serve(app, serve);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    const auto* cmd = app.get_subcommands().front();
    const auto name = cmd->get_name();
    if (name == "train") return cmd_train(train, *cmd, out);
    if (name == "masks") return cmd_masks(masks, out);
    if (name == "translate") return cmd_translate(translate_args, out);
    if (name == "fid-matrix") return cmd_fid(fid, out);
    if (name == "grid") return cmd_grid(grid, out);
    if (name == "serve") return cmd_serve(serve, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return is_validation_error(e) ? 1 : 2;
  } catch (const c10::Error& e) {
    err << "error: " << e.what_without_backtrace() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

int run_cli(int argc, const char* const* argv) { return run_cli(argc, argv, std::cout, std::cerr); }

}  // namespace maskcycle
