#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "semnerf/adversarial_training.hpp"
#include "semnerf/errors.hpp"
#include "semnerf/inference_service.hpp"
#include "semnerf/log.hpp"

using namespace semnerf;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kCheckpointDirEnv = "SEMNERF_CHECKPOINT_DIR";

json read_json(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::kConfig, path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::kIo, "cannot write " + path.string());
  out << j.dump(2) << "\n";
}

/// --model, else $SEMNERF_CHECKPOINT_DIR/model.ckpt.
fs::path resolve_model(const std::string& given) {
  if (!given.empty()) return given;
  const char* dir = std::getenv(kCheckpointDirEnv);
  require(dir != nullptr, ErrorKind::kConfig,
          std::string("no --model given and ") + kCheckpointDirEnv + " is not set");
  return fs::path(dir) / "model.ckpt";
}

CameraPose parse_pose(const std::string& text) {
  std::vector<double> v;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      v.push_back(std::stod(item, &used));
      require(used == item.size(), ErrorKind::kInput, "");
    } catch (const std::exception&) {
      fail(ErrorKind::kInput, "pose '" + text + "' is not yaw,pitch[,roll]");
    }
  }
  require(v.size() == 2 || v.size() == 3, ErrorKind::kInput, "pose '" + text + "' is not yaw,pitch[,roll]");
  CameraPose p;
  p.yaw = v[0];
  p.pitch = v[1];
  if (v.size() == 3) p.roll = v[2];
  p.validate();
  return p;
}

void print_record(const LossRecord& r) {
  std::cout << "step " << r.step << " total " << r.total << " rec " << r.rec;
  if (r.perceptual != 0 || r.gan != 0) std::cout << " perc " << r.perceptual << " reg " << r.reg << " gan " << r.gan;
  std::cout << " (" << r.seconds << " s)\n";
}

std::function<void(const LossRecord&)> printer(int every) {
  return [every](const LossRecord& r) {
    if (every > 0 && r.step % every == 0) print_record(r);
  };
}

HttpServer* g_server = nullptr;
void on_signal(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semantic mask to 3D-consistent radiance field rendering"};
  app.require_subcommand(1);

  // dataset build
  auto* dataset = app.add_subcommand("dataset", "Synthetic dataset tools");
  dataset->require_subcommand(1);
  auto* build = dataset->add_subcommand("build", "Render a synthetic dataset with analytic masks");
  DatasetConfig dcfg;
  std::string dataset_out, dataset_config;
  build->add_option("--config", dataset_config, "JSON config (the 'dataset' section if present)");
  build->add_option("--n-train", dcfg.n_train, "Training scenes");
  build->add_option("--n-test", dcfg.n_test, "Held-out scenes");
  build->add_option("--seed", dcfg.seed, "Generator seed");
  build->add_option("--size", dcfg.render.image_size, "Image size in pixels");
  build->add_option("--workers", dcfg.workers, "Render threads");
  build->add_option("--out", dataset_out, "Output directory")->required();

  // train
  auto* train = app.add_subcommand("train", "Pretrain the decoder or train the encoder");
  std::string phase, train_config, resume, train_out, loss_csv, data_dir, decoder_ckpt;
  train->add_option("--phase", phase, "decoder | encoder")->required()->check(CLI::IsMember({"decoder", "encoder"}));
  train->add_option("--config", train_config, "JSON config with 'dataset', 'decoder' and 'encoder' sections")
      ->required();
  train->add_option("--resume", resume, "Checkpoint to resume from");
  train->add_option("--out", train_out, "Output checkpoint (default from config)");
  train->add_option("--loss-csv", loss_csv, "Per-step loss CSV (default next to the checkpoint)");
  train->add_option("--data", data_dir, "Training split directory (default from config)");
  train->add_option("--decoder", decoder_ckpt, "Decoder checkpoint for --phase encoder");

  // infer
  auto* infer = app.add_subcommand("infer", "Encode a mask and render views");
  std::string model_path, mask_path, infer_out;
  std::vector<std::string> pose_texts;
  std::optional<std::uint64_t> mix_seed;
  int mix_layer = 0;
  double mix_t = 1.0, mix_psi = 1.0;
  ViewOptions view;
  infer->add_option("--model", model_path, std::string("Model checkpoint (default $") + kCheckpointDirEnv + "/model.ckpt)");
  infer->add_option("--mask", mask_path, "8-bit label PNG")->required()->check(CLI::ExistingFile);
  infer->add_option("--poses", pose_texts, "Target poses as yaw,pitch[,roll] (radians)")->required()->expected(1, -1);
  infer->add_option("--out", infer_out, "Output directory")->required();
  infer->add_option("--mix-seed", mix_seed, "Seed of the random style to mix in");
  infer->add_option("--mix-layer", mix_layer, "First mixed layer, 1-based (default: last two layers)");
  infer->add_option("--mix-t", mix_t, "Blend weight in [0, 1]");
  infer->add_option("--mix-psi", mix_psi, "Truncation of the random style toward the averages");
  infer->add_option("--size", view.size, "Output resolution");
  infer->add_option("--steps", view.steps, "Samples per ray");
  infer->add_flag("--hierarchical", view.hierarchical, "Add importance-resampled fine samples");
  infer->add_option("--fine-steps", view.fine_steps, "Fine samples per ray (default: --steps)");
  infer->add_option("--workers", view.workers, "Render threads");

  // evaluate
  auto* evaluate_cmd = app.add_subcommand("evaluate", "PSNR, mask IoU, runtime and parameter counts on a split");
  std::string eval_model, split_dir, eval_out, eval_dataset_config;
  EvalOptions eopt;
  evaluate_cmd->add_option("--model", eval_model, "Model checkpoint");
  evaluate_cmd->add_option("--split", split_dir, "Split directory (e.g. data/test)")->required();
  evaluate_cmd->add_option("--limit", eopt.limit, "Samples to evaluate (0 = all)");
  evaluate_cmd->add_option("--steps", eopt.view.steps, "Samples per ray");
  evaluate_cmd->add_flag("--hierarchical", eopt.view.hierarchical, "Hierarchical sampling");
  evaluate_cmd->add_option("--timing-renders", eopt.timing_renders, "Renders in the runtime estimate (>= 20)");
  evaluate_cmd->add_option("--dataset-config", eval_dataset_config,
                           "Also report the analytic oracle IoU using this dataset config (JSON)");
  evaluate_cmd->add_option("--json", eval_out, "Write the report as JSON");

  // serve
  auto* serve = app.add_subcommand("serve", "HTTP inference service");
  std::string serve_model, serve_config;
  ServiceConfig scfg;
  serve->add_option("--model", serve_model, "Model checkpoint");
  serve->add_option("--config", serve_config, "Service limits (JSON)");
  serve->add_option("--host", scfg.host, "Bind address");
  serve->add_option("--port", scfg.port, "Port (0 = any free port)");
  serve->add_option("--workers", scfg.workers, "Request worker threads");

  std::string log_level;
  app.add_option("--log", log_level, "debug | info | warn | error | off")
      ->check(CLI::IsMember({"debug", "info", "warn", "error", "off"}));

  CLI11_PARSE(app, argc, argv);
  if (!log_level.empty()) {
    const std::map<std::string, log::Level> levels = {{"debug", log::Level::kDebug}, {"info", log::Level::kInfo},
                                                     {"warn", log::Level::kWarn},   {"error", log::Level::kError},
                                                     {"off", log::Level::kOff}};
    log::set_level(levels.at(log_level));
  }

  try {
    if (build->parsed()) {
      if (!dataset_config.empty()) {
        const json j = read_json(dataset_config);
        const DatasetConfig from_file = (j.contains("dataset") ? j["dataset"] : j).get<DatasetConfig>();
        DatasetConfig merged = from_file;
        if (build->count("--n-train")) merged.n_train = dcfg.n_train;
        if (build->count("--n-test")) merged.n_test = dcfg.n_test;
        if (build->count("--seed")) merged.seed = dcfg.seed;
        if (build->count("--size")) merged.render.image_size = dcfg.render.image_size;
        if (build->count("--workers")) merged.workers = dcfg.workers;
        dcfg = merged;
      }
      const json manifest = build_dataset(dcfg, dataset_out);
      std::cout << "wrote " << dcfg.n_train << " train and " << dcfg.n_test << " test samples to " << dataset_out
                << " (" << manifest["files"].size() << " files)\n";
      return 0;
    }

    if (train->parsed()) {
      const json j = read_json(train_config);
      const fs::path base = fs::path(train_config).parent_path();
      auto path_from = [&](const std::string& cli, const char* key, const char* fallback) -> fs::path {
        if (!cli.empty()) return cli;
        if (j.contains(key)) {
          const fs::path p = j[key].get<std::string>();
          return p.is_absolute() ? p : base / p;
        }
        return fallback;
      };
      std::unique_ptr<Checkpoint> resume_ckpt;
      if (!resume.empty()) resume_ckpt = std::make_unique<Checkpoint>(load_checkpoint(resume));
      TrainHooks hooks;
      TrainReport report;
      const auto t0 = std::chrono::steady_clock::now();

      if (phase == "decoder") {
        const DecoderTrainConfig cfg = j.value("decoder", json::object()).get<DecoderTrainConfig>();
        const DatasetConfig synth = j.value("dataset", json::object()).get<DatasetConfig>();
        hooks.checkpoint_out = path_from(train_out, "decoder_checkpoint", "decoder.ckpt");
        hooks.on_step = printer(cfg.log_every);
        hooks.loss_csv = loss_csv.empty() ? fs::path(hooks.checkpoint_out).replace_extension(".loss.csv") : fs::path(loss_csv);
        std::unique_ptr<TrainingSet> data;
        if (cfg.mode != "overfit") {
          data = std::make_unique<TrainingSet>(TrainingSet::load(path_from(data_dir, "train_dir", "data/train"), cfg.limit));
        }
        pretrain_decoder(cfg, data.get(), synth, hooks, &report, resume_ckpt.get());
        std::cout << "decoder: " << report.steps_run << " steps";
        if (cfg.mode == "overfit") std::cout << ", training-view PSNR " << report.final_psnr << " dB";
      } else {
        const EncoderTrainConfig cfg = j.value("encoder", json::object()).get<EncoderTrainConfig>();
        hooks.checkpoint_out = path_from(train_out, "model_checkpoint", "model.ckpt");
        hooks.on_step = printer(cfg.log_every);
        hooks.loss_csv = loss_csv.empty() ? fs::path(hooks.checkpoint_out).replace_extension(".loss.csv") : fs::path(loss_csv);
        TrainingSet data = TrainingSet::load(path_from(data_dir, "train_dir", "data/train"), cfg.limit);
        data.prepare_inputs(cfg.encoder.resolution, cfg.encoder.contour_thickness);
        const Checkpoint decoder = load_checkpoint(path_from(decoder_ckpt, "decoder_checkpoint", "decoder.ckpt"));
        train_encoder(cfg, data, decoder, hooks, &report, resume_ckpt.get());
        std::cout << "encoder: " << report.steps_run << " steps, decoder hash " << report.decoder_hash.substr(0, 12);
      }
      std::cout << ", " << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s -> "
                << hooks.checkpoint_out.string() << "\n";
      return 0;
    }

    if (infer->parsed()) {
      const Model model = Model::load(resolve_model(model_path));
      const SemanticMask mask{read_png_gray(mask_path), model.labels};
      StyleCode<float> style = encode_mask(model, mask);
      if (mix_seed) {
        StyleMixSpec spec;
        spec.seed = *mix_seed;
        spec.layer = mix_layer;
        spec.t = mix_t;
        spec.psi = mix_psi;
        style = style_mix(style, spec, model.averages, model.field);
      }
      std::vector<CameraPose> poses;
      for (const auto& p : pose_texts) poses.push_back(parse_pose(p));
      const auto images = render_views(model, style, poses, view);
      fs::create_directories(infer_out);
      for (std::size_t i = 0; i < images.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "view_%03zu.png", i);
        write_png(fs::path(infer_out) / name, images[i].color);
      }
      json meta = {{"checkpoint_hash", model.checkpoint_hash}, {"mask", mask_path}, {"poses", poses}};
      if (mix_seed) meta["mix"] = {{"seed", *mix_seed}, {"layer", mix_layer}, {"t", mix_t}, {"psi", mix_psi}};
      write_json(fs::path(infer_out) / "views.json", meta);
      std::cout << "rendered " << images.size() << " view(s) to " << infer_out << "\n";
      return 0;
    }

    if (evaluate_cmd->parsed()) {
      const Model model = Model::load(resolve_model(eval_model));
      EvalReport rep = evaluate(model, split_dir, eopt);
      if (!eval_dataset_config.empty()) {
        const json j = read_json(eval_dataset_config);
        const DatasetConfig dc = (j.contains("dataset") ? j["dataset"] : j).get<DatasetConfig>();
        const int split = fs::path(split_dir).filename() == "train" ? 0 : 1;
        rep.extra["oracle_iou"] = oracle_mask_iou(dc, split_dir, split, eopt.limit);
      }
      const json out = rep.to_json();
      std::cout << out.dump(2) << "\n";
      if (!eval_out.empty()) write_json(eval_out, out);
      return 0;
    }

    if (serve->parsed()) {
      if (!serve_config.empty()) {
        ServiceConfig from_file = read_json(serve_config).get<ServiceConfig>();
        if (serve->count("--host")) from_file.host = scfg.host;
        if (serve->count("--port")) from_file.port = scfg.port;
        if (serve->count("--workers")) from_file.workers = scfg.workers;
        scfg = from_file;
      }
      auto model = std::make_shared<const Model>(Model::load(resolve_model(serve_model)));
      auto service = std::make_shared<InferenceService>(model, scfg);
      HttpServer server(service);
      const int port = server.bind(scfg.host, scfg.port);
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cout << "listening on http://" << scfg.host << ":" << port << std::endl;
      server.serve();
      g_server = nullptr;
      return 0;
    }
  } catch (const RequestError& e) {
    std::cerr << "error [" << e.code() << "]: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.kind()) << "]: " << e.what() << "\n";
    return e.kind() == ErrorKind::kInput || e.kind() == ErrorKind::kConfig ? 2 : 1;
  }
  return 0;
}
