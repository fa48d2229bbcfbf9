// Command-line entry point: training, evaluation, model accounting,
// gradient audits, synthetic data generation, and map/similarity exports.
//
// Exit codes: 0 success, 1 check failure, 2 validation/config error,
// 3 numeric failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "metaformer/config.hpp"
#include "metaformer/gradcheck.hpp"
#include "metaformer/train.hpp"
#include "metaformer/viz.hpp"

namespace fs = std::filesystem;
using namespace metaformer;

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
};

RunConfig load_config(const CommonArgs& args) {
  RunConfig cfg = parse_run_config(args.config_path, args.overrides);
  if (const char* seed_env = std::getenv("MF_SEED")) {
    const auto seed = static_cast<std::uint64_t>(std::stoull(seed_env));
    cfg.train.seed = seed;
    cfg.world.seed = seed;
  }
  return cfg;
}

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required) {
  auto* opt = cmd->add_option("-c,--config", args.config_path,
                              "run configuration file (key = value sections)");
  if (config_required) opt->required()->check(CLI::ExistingFile);
  cmd->add_option("--set", args.overrides,
                  "override a config field: section.key=value");
}

std::string config_key_footer() {
  std::ostringstream os;
  os << "Config fields (file sections or --set section.key=value):\n";
  for (const auto& key : config_keys()) {
    os << "  " << key.key << " (" << key.type << "): " << key.help << "\n";
  }
  return os.str();
}

MetaFormer build_model(const RunConfig& cfg, const Dataset* data) {
  ModelConfig mc = cfg.model_config(data);
  MetaFormer model(mc, cfg.train.seed);
  if (!cfg.word_vectors.empty()) {
    model.meta_encoder.load_word_vectors(load_embedding_file(cfg.word_vectors));
  }
  return model;
}

int cmd_train(const CommonArgs& args) {
  RunConfig cfg = load_config(args);
  if (cfg.train_path.empty()) {
    throw ValidationError("data.train_path is required for train");
  }
  Dataset train_data = load_dataset(cfg.train_path);
  Dataset test_data;
  const bool have_test = !cfg.test_path.empty();
  if (have_test) test_data = load_dataset(cfg.test_path);

  MetaFormer model = build_model(cfg, &train_data);
  std::cout << "training " << cfg.preset << " ("
            << count_params(model.config()) << " params, mode "
            << to_string(model.config().mode) << ", meta ["
            << model.config().meta.describe() << "]) on "
            << train_data.samples.size() << " samples\n";

  MetricsReport report =
      metaformer::train(model, train_data, have_test ? &test_data : nullptr,
                        cfg.train);

  fs::create_directories(cfg.out_dir);
  const std::string ckpt = cfg.out_dir + "/checkpoint.mfck";
  save_checkpoint(model, ckpt);
  write_metrics_csv(report, cfg.out_dir + "/metrics.csv");
  {
    std::ofstream rep(cfg.out_dir + "/report.txt", std::ios::trunc);
    rep << "config_hash=" << model.config().hash() << "\n";
    rep << "params=" << count_params(model.config()) << "\n";
    rep << "final_train_acc=" << report.final_train_acc << "\n";
    if (report.final_eval_acc >= 0) {
      rep << "eval_acc=" << report.final_eval_acc << "\n";
    }
    if (report.final_eval_acc_image_only >= 0) {
      rep << "eval_acc_image_only=" << report.final_eval_acc_image_only << "\n";
    }
  }
  std::cout << "final train acc " << report.final_train_acc;
  if (report.final_eval_acc >= 0) {
    std::cout << ", eval acc " << report.final_eval_acc;
  }
  if (report.final_eval_acc_image_only >= 0) {
    std::cout << " (image-only " << report.final_eval_acc_image_only << ")";
  }
  std::cout << "\nwrote " << ckpt << "\n";
  return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& checkpoint,
             const std::string& data_path, bool image_only) {
  RunConfig cfg = load_config(args);
  Dataset data = load_dataset(data_path);
  MetaFormer model = build_model(cfg, &data);
  load_checkpoint(model, checkpoint);
  const bool has_meta = !model.config().meta.empty();
  if (has_meta && !image_only) {
    EvalResult with = evaluate(model, data, true);
    std::cout << "top1_with_meta=" << with.top1 << "\n";
  }
  EvalResult without = evaluate(model, data, false);
  std::cout << "top1_image_only=" << without.top1 << "\n";
  return 0;
}

int cmd_count(const std::string& preset_or_config, const CommonArgs& args) {
  ModelConfig cfg;
  if (!args.config_path.empty() || preset_or_config.empty()) {
    RunConfig rc = load_config(args);
    cfg = rc.model_config(nullptr);
  } else {
    cfg = ModelConfig::preset(preset_or_config);
  }
  std::cout << "preset " << (preset_or_config.empty() ? "(config)"
                                                      : preset_or_config)
            << " mode=" << to_string(cfg.mode) << "\n";
  std::cout << "resolution  params        macs          flops(mac*2)\n";
  // the second row mirrors the common 224 -> 384 fine-tuning bump
  const std::int64_t hi_res =
      cfg.image_size == 224 ? 384 : cfg.image_size * 2;
  for (std::int64_t res : {cfg.image_size, hi_res}) {
    ModelConfig at = cfg;
    at.image_size = res;
    std::cout << res << "x" << res << "   " << count_params(at) << "   "
              << count_macs(at, res) << "   " << count_flops(at, res) << "\n";
  }
  return 0;
}

int cmd_gradcheck(const std::string& scope, std::uint64_t seed) {
  const auto results = run_gradcheck(scope, seed);
  double worst = 0;
  for (const auto& r : results) {
    std::cout << r.component << " worst_rel_err=" << r.worst_rel_err << "\n";
    worst = std::max(worst, r.worst_rel_err);
  }
  std::cout << "worst=" << worst << "\n";
  return worst <= 1e-4 ? 0 : 1;
}

int cmd_make_synthetic(const CommonArgs& args) {
  RunConfig cfg = load_config(args);
  SyntheticWorld world = generate_synthetic(cfg.world);
  fs::create_directories(cfg.out_dir);
  save_dataset(world.train, cfg.out_dir + "/train.mfds");
  save_dataset(world.test, cfg.out_dir + "/test.mfds");
  save_world_summary(world, cfg.out_dir + "/world.csv");
  std::cout << "wrote " << world.train.samples.size() << " train / "
            << world.test.samples.size() << " test samples of "
            << cfg.world.num_classes << " classes (schema ["
            << world.train.schema.describe() << "]) to " << cfg.out_dir
            << "\n";
  return 0;
}

int cmd_geomap(const CommonArgs& args, const std::string& checkpoint,
               const std::string& data_path, const std::string& out_prefix) {
  RunConfig cfg = load_config(args);
  Dataset data = load_dataset(data_path);
  MetaFormer model = build_model(cfg, &data);
  load_checkpoint(model, checkpoint);
  GeoGrid grid = spatial_prediction_grid(model, data, cfg.category, cfg.grid_h,
                                         cfg.grid_w, cfg.month, cfg.hour,
                                         cfg.blank_image);
  if (!cfg.land_mask.empty()) apply_land_mask(grid, cfg.land_mask);
  write_grid_csv(grid, out_prefix + ".csv");
  write_grid_pgm(grid, out_prefix + ".pgm");
  std::cout << "wrote " << out_prefix << ".csv and .pgm (" << grid.rows << "x"
            << grid.cols << ")\n";
  return 0;
}

int cmd_simreport(const CommonArgs& args, const std::string& checkpoint,
                  const std::string& data_path, const std::string& out_prefix) {
  RunConfig cfg = load_config(args);
  Dataset data = load_dataset(data_path);
  MetaFormer model = build_model(cfg, &data);
  load_checkpoint(model, checkpoint);
  if (cfg.sample_index < 0 ||
      cfg.sample_index >= static_cast<std::int64_t>(data.samples.size())) {
    throw ValidationError(detail::cat("export.sample_index ", cfg.sample_index,
                                      " outside the dataset of ",
                                      data.samples.size(), " records"));
  }
  const Sample& sample =
      data.samples[static_cast<std::size_t>(cfg.sample_index)];
  Tensor image = images_to_tensor(data, {cfg.sample_index});
  SimilarityReport report = token_similarity_report(
      model, image, sample.meta, cfg.k_vision, cfg.k_word);
  if (report.clamped_vision || report.clamped_word) {
    std::cerr << "warning: requested k exceeds the token count; clamped\n";
  }
  write_similarity_csv(report, out_prefix + ".csv");
  write_word_attention_pgms(report, out_prefix);
  std::cout << "top vision tokens:";
  for (const auto& r : report.top_vision) {
    std::cout << " " << r.index << " (" << r.score << ")";
  }
  std::cout << "\ntop word tokens:";
  for (const auto& r : report.top_word) {
    std::cout << " " << r.index << " (" << r.score << ")";
  }
  std::cout << "\nwrote " << out_prefix << ".csv and word attention maps\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MetaFormer: hybrid conv-transformer classifier with "
               "meta-information token fusion"};
  app.require_subcommand(1);
  app.footer(config_key_footer());

  CommonArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "train a model from a config");
  add_common(train_cmd, train_args, true);

  CommonArgs eval_args;
  std::string eval_ckpt, eval_data;
  bool eval_image_only = false;
  auto* eval_cmd =
      app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  add_common(eval_cmd, eval_args, true);
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file")
      ->required()
      ->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", eval_data, "dataset file")->required();
  eval_cmd->add_flag("--image-only", eval_image_only,
                     "evaluate without meta even if the model has a schema");

  CommonArgs count_args;
  std::string count_preset;
  auto* count_cmd =
      app.add_subcommand("count", "analytic parameter and FLOP table");
  count_cmd->add_option("preset", count_preset,
                        "preset name (metaformer-0/1/2, tiny)");
  add_common(count_cmd, count_args, false);

  std::string gradcheck_scope;
  std::uint64_t gradcheck_seed = 12345;
  auto* gradcheck_cmd = app.add_subcommand(
      "gradcheck", "finite-difference audit of the backward pass");
  gradcheck_cmd->add_option("scope", gradcheck_scope, "ops | blocks | model")
      ->required();
  gradcheck_cmd->add_option("--seed", gradcheck_seed, "probe seed");

  CommonArgs synth_args;
  auto* synth_cmd = app.add_subcommand(
      "make-synthetic", "generate the synthetic fine-grained dataset");
  add_common(synth_cmd, synth_args, true);

  CommonArgs geomap_args;
  std::string geomap_ckpt, geomap_data, geomap_out = "geomap";
  auto* geomap_cmd = app.add_subcommand(
      "geomap", "class probability over a lat/lon grid (CSV + PGM)");
  add_common(geomap_cmd, geomap_args, true);
  geomap_cmd->add_option("--checkpoint", geomap_ckpt, "checkpoint file")
      ->required()
      ->check(CLI::ExistingFile);
  geomap_cmd->add_option("--data", geomap_data, "dataset for the mean image")
      ->required();
  geomap_cmd->add_option("--out", geomap_out, "output path prefix");

  CommonArgs sim_args;
  std::string sim_ckpt, sim_data, sim_out = "simreport";
  auto* sim_cmd = app.add_subcommand(
      "simreport", "class-token similarity rankings and word attention maps");
  add_common(sim_cmd, sim_args, true);
  sim_cmd->add_option("--checkpoint", sim_ckpt, "checkpoint file")
      ->required()
      ->check(CLI::ExistingFile);
  sim_cmd->add_option("--data", sim_data, "dataset file")->required();
  sim_cmd->add_option("--out", sim_out, "output path prefix");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) return cmd_train(train_args);
    if (eval_cmd->parsed())
      return cmd_eval(eval_args, eval_ckpt, eval_data, eval_image_only);
    if (count_cmd->parsed()) return cmd_count(count_preset, count_args);
    if (gradcheck_cmd->parsed())
      return cmd_gradcheck(gradcheck_scope, gradcheck_seed);
    if (synth_cmd->parsed()) return cmd_make_synthetic(synth_args);
    if (geomap_cmd->parsed())
      return cmd_geomap(geomap_args, geomap_ckpt, geomap_data, geomap_out);
    if (sim_cmd->parsed())
      return cmd_simreport(sim_args, sim_ckpt, sim_data, sim_out);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const ValidationError& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "bad configuration: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
