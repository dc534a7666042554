// seammil: synthetic data, training, evaluation, CAM export and gradient checks.

#include <fnmatch.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "seammil/seammil.hpp"

namespace fs = std::filesystem;
using namespace seammil;

namespace {

constexpr const char* kDataRootEnv = "SEAMMIL_DATA_ROOT";

struct DataArgs {
  std::string data;
  std::string labels_csv;
  std::string image_dir;
  int image_size = 0;
};

struct Paths {
  std::string data_root;

  // Relative dataset paths are looked up under the data root when one is set.
  fs::path resolve(const std::string& p) const {
    fs::path path(p);
    if (data_root.empty() || path.is_absolute() || fs::exists(path)) return path;
    return fs::path(data_root) / path;
  }
};

void add_data_options(CLI::App* cmd, DataArgs& a, const std::string& what) {
  cmd->add_option("--data", a.data, what + " dataset directory (index.csv + images/ + masks/)");
  cmd->add_option("--labels-csv", a.labels_csv, "Label CSV with image identifier and DR grade columns");
  cmd->add_option("--image-dir", a.image_dir, "Image directory for --labels-csv");
  cmd->add_option("--image-size", a.image_size,
                  "Square training size; 0 keeps square dataset images native (label-CSV images default to 512)");
}

Dataset load_data(const DataArgs& a, const Paths& paths, const std::string& what) {
  if (!a.data.empty()) return io::read_dataset(paths.resolve(a.data), a.image_size);
  if (!a.labels_csv.empty()) {
    if (a.image_dir.empty()) throw ConfigError("--labels-csv needs --image-dir");
    IndexReport report;
    const auto records = load_index(paths.resolve(a.labels_csv), paths.resolve(a.image_dir), {}, &report);
    if (report.missing_images > 0) {
      std::cerr << "warning: " << report.missing_images << " of " << report.rows << " listed images are missing\n";
    }
    Dataset data = io::read_labelled_images(records, a.image_size);
    if (data.empty()) throw ConfigError(what + " dataset is empty");
    return data;
  }
  throw ConfigError(what + " data: pass --data or --labels-csv/--image-dir");
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("cannot write " + path.string());
}

std::vector<fs::path> expand_glob(const fs::path& pattern) {
  const std::string name = pattern.filename().string();
  if (name.find_first_of("*?[") == std::string::npos) {
    if (!fs::exists(pattern)) throw IoError("no such image " + pattern.string());
    return {pattern};
  }
  const fs::path dir = pattern.has_parent_path() ? pattern.parent_path() : fs::path(".");
  if (!fs::is_directory(dir)) throw IoError("no such directory " + dir.string());
  std::vector<fs::path> hits;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && fnmatch(name.c_str(), e.path().filename().c_str(), 0) == 0) hits.push_back(e.path());
  }
  std::sort(hits.begin(), hits.end());
  if (hits.empty()) throw IoError("pattern " + pattern.string() + " matched no files");
  return hits;
}

nlohmann::json step_json(const StepRecord& r) {
  return {{"step", r.step},
          {"epoch", r.epoch},
          {"lr", r.lr},
          {"multi_class", r.losses.multi_class},
          {"er", r.losses.er},
          {"ecr", r.losses.ecr},
          {"cross_entropy", r.losses.cross_entropy},
          {"total", r.losses.total}};
}

// ---- synth-data ------------------------------------------------------------

struct SynthArgs {
  SynthConfig cfg;
  std::string background = "vignette";
  std::string out;
};

int run_synth(SynthArgs& a, const Paths& paths) {
  a.cfg.background = parse_background(a.background);
  const Dataset data = generate_synthetic(a.cfg);
  const fs::path dir = paths.resolve(a.out);
  io::write_dataset(dir, data);
  std::size_t pos = 0;
  for (const auto& s : data) pos += s.is_rdr;
  std::cout << "wrote " << data.size() << " images (" << pos << " positive) to " << dir.string() << "\n";
  return 0;
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
  DataArgs train;
  std::string val_data;
  std::string out;
  std::string backbone = "toy_cnn";
  std::string variant = "seam_mil";
  std::string affine = "rescale:0.4";
  bool no_refine = false;
  bool no_label_mask = false;
  bool no_augment = false;
  std::vector<double> loss_weights{1.0, 1.0, 1.0, 1.0};
  int keep_checkpoints = 3;
  ModelConfig model;
  TrainConfig cfg;
};

int run_train(TrainArgs& a, const Paths& paths) {
  a.model.backbone.kind = parse_backbone_kind(a.backbone);
  a.model.variant = parse_model_variant(a.variant);
  a.model.refine = !a.no_refine;
  a.model.label_mask_cams = !a.no_label_mask;
  a.cfg.affine = AffineSpec::parse(a.affine);
  a.cfg.augment = !a.no_augment;
  if (a.loss_weights.size() != 4) throw ConfigError("--loss-weights takes 4 values (mc er ecr ce)");
  std::copy(a.loss_weights.begin(), a.loss_weights.end(), a.cfg.loss_weights.begin());
  a.model.validate();
  a.cfg.validate();

  const Dataset train = load_data(a.train, paths, "training");
  Dataset val;
  std::string split = "train";
  if (!a.val_data.empty()) {
    val = io::read_dataset(paths.resolve(a.val_data), a.train.image_size);
    split = "val";
  }
  const fs::path out_dir(a.out);
  const fs::path ckpt_dir = out_dir / "checkpoints";
  fs::create_directories(ckpt_dir);
  std::ofstream steps(out_dir / "steps.jsonl", std::ios::trunc);
  if (!steps) throw IoError("cannot write " + (out_dir / "steps.jsonl").string());

  std::vector<fs::path> written;
  FitCallbacks<double> cb;
  cb.on_step = [&](const StepRecord& r) { steps << step_json(r).dump() << '\n'; };
  cb.on_epoch = [&](int epoch, TrainState<double>& state) {
    char name[32];
    std::snprintf(name, sizeof(name), "epoch_%04d.ckpt", epoch);
    const fs::path p = ckpt_dir / name;
    save_checkpoint(p, state, a.cfg);
    state.last_checkpoint = p.string();
    written.push_back(p);
    while (a.keep_checkpoints > 0 && written.size() > static_cast<std::size_t>(a.keep_checkpoints)) {
      fs::remove(written.front());
      written.erase(written.begin());
    }
    steps.flush();
    std::cerr << "epoch " << epoch << "/" << a.cfg.epochs << " done\n";
  };
  const TrainState<double> state = fit<double>(train, a.model, a.cfg, cb);
  save_checkpoint(out_dir / "final.ckpt", state, a.cfg);

  EvalOptions opt;
  opt.split = split;
  opt.affine = a.cfg.affine;
  opt.loss_weights = a.cfg.loss_weights;
  const auto res = evaluate_model(state.model, val.empty() ? train : val, opt);
  const std::string text = to_json(res.report).dump(2) + "\n";
  write_text(out_dir / "metrics.json", text);
  std::cout << text;
  return 0;
}

// ---- eval ------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  DataArgs data;
  EvalOptions opt;
  std::string out = "metrics.json";
};

int run_eval(EvalArgs& a, const Paths& paths) {
  TrainConfig cfg;
  const auto state = load_checkpoint<double>(a.checkpoint, &cfg);
  const Dataset data = load_data(a.data, paths, "evaluation");
  a.opt.affine = cfg.affine;
  a.opt.loss_weights = cfg.loss_weights;
  const auto res = evaluate_model(state.model, data, a.opt);
  const std::string text = to_json(res.report).dump(2) + "\n";
  write_text(a.out, text);
  std::cout << text;
  return 0;
}

// ---- export-cam ------------------------------------------------------------

struct ExportArgs {
  std::string checkpoint;
  std::string images;
  std::string out_dir;
  int image_size = 0;
};

int run_export(ExportArgs& a, const Paths& paths) {
  TrainConfig cfg;
  const auto state = load_checkpoint<double>(a.checkpoint, &cfg);
  const fs::path out_dir(a.out_dir);
  if (!fs::is_directory(out_dir)) throw IoError("output directory " + out_dir.string() + " does not exist");
  for (const auto& path : expand_glob(paths.resolve(a.images))) {
    const Image img = io::load_training_image(path, a.image_size);
    const auto out = state.model.forward(img.cast<double>(), cfg.affine);
    const std::string stem = path.stem().string();
    export_heatmap(out.cam_orig, img, out_dir / (stem + "_cam.png"));
    export_heatmap(renormalize(out.cam_rm_orig), img, out_dir / (stem + "_refined.png"));
    if (out.mil) {
      // Attention weights over the fused bag, drawn in the lesion slot.
      const auto& w = out.mil->attention.weights;
      const auto& bag = out.mil->bag.fused;
      ActivationMap<double> att{Grid<double>(2, bag.height(), bag.width()), CamKind::original, true};
      for (Eigen::Index i = 0; i < w.size(); ++i) att.data(1, static_cast<int>(i) / bag.width(),
                                                           static_cast<int>(i) % bag.width()) = w(i);
      export_heatmap(att, img, out_dir / (stem + "_attention.png"));
    }
    std::cout << path.string() << " score " << state.model.score(out) << "\n";
  }
  return 0;
}

// ---- gradcheck -------------------------------------------------------------

int run_gradcheck(std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = gradcheck::run_suite(seed);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  bool ok = true;
  for (const auto& r : results) {
    std::printf("%-24s max_rel_error %.3e over %zu entries  %s\n", r.name.c_str(), r.max_rel_error, r.n_checked,
                r.passed ? "PASS" : "FAIL");
    ok = ok && r.passed;
  }
  std::printf("tolerance %.0e, step %.0e, %.2f s\n", gradcheck::kTolerance, gradcheck::kStep, secs);
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SEAM + attention-MIL toolkit for referable diabetic retinopathy"};
  app.require_subcommand(1);
  app.set_config("--config", "", "Read options from a key=value file; command-line flags take precedence");
  Paths paths;
  app.add_option("--data-root", paths.data_root, "Base directory for relative dataset paths")->envname(kDataRootEnv);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth-data", "Render a synthetic fundus dataset with lesion masks");
  s->add_option("--out", synth.out, "Output dataset directory")->required();
  s->add_option("--n-images", synth.cfg.n_images, "Number of images")->capture_default_str();
  s->add_option("--image-size", synth.cfg.image_size, "Image side in pixels")->capture_default_str();
  s->add_option("--lesion-count-min", synth.cfg.lesion_count_min)->capture_default_str();
  s->add_option("--lesion-count-max", synth.cfg.lesion_count_max)->capture_default_str();
  s->add_option("--lesion-radius-min", synth.cfg.lesion_radius_min)->capture_default_str();
  s->add_option("--lesion-radius-max", synth.cfg.lesion_radius_max)->capture_default_str();
  s->add_option("--background", synth.background, "flat | vignette")->capture_default_str();
  s->add_option("--positive-fraction", synth.cfg.positive_fraction)->capture_default_str();
  s->add_option("--seed", synth.cfg.seed)->capture_default_str();

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a model and write checkpoints, a step log and metrics");
  add_data_options(t, train.train, "Training");
  t->add_option("--val-data", train.val_data, "Held-out dataset directory for the final metrics");
  t->add_option("--out", train.out, "Run directory")->required();
  t->add_option("--backbone", train.backbone, "toy_cnn | resnet38_like")->capture_default_str();
  t->add_option("--out-channels", train.model.backbone.out_channels, "Backbone feature channels L")
      ->capture_default_str();
  t->add_option("--out-stride", train.model.backbone.out_stride)->capture_default_str();
  t->add_option("--embed-channels", train.model.embed_channels, "Embedding width E; 0 selects L/4")
      ->capture_default_str();
  t->add_option("--mil-k", train.model.mil_k)->capture_default_str();
  t->add_option("--mil-d", train.model.mil_d)->capture_default_str();
  t->add_option("--variant", train.variant, "seam_mil | baseline")->capture_default_str();
  t->add_flag("--include-background", train.model.include_background, "Supervise the background CAM logit");
  t->add_flag("--no-refine", train.no_refine, "Use the CAM itself as the refined CAM");
  t->add_flag("--stop-grad-refined", train.model.stop_grad_refined, "No gradient through refined CAMs in ECR");
  t->add_flag("--no-label-mask", train.no_label_mask, "Keep negatives' lesion channel in ER/ECR");
  t->add_option("--base-lr", train.cfg.base_lr)->capture_default_str();
  t->add_option("--lr-multiplier", train.cfg.lr_multiplier_new_params, "LR multiplier for non-backbone parameters")
      ->capture_default_str();
  t->add_option("--decay-power", train.cfg.decay_power)->capture_default_str();
  t->add_option("--weight-decay", train.cfg.weight_decay)->capture_default_str();
  t->add_option("--momentum", train.cfg.momentum)->capture_default_str();
  t->add_option("--clip-grad-norm", train.cfg.clip_grad_norm, "0 disables")->capture_default_str();
  t->add_option("--batch-size", train.cfg.batch_size)->capture_default_str();
  t->add_option("--epochs", train.cfg.epochs)->capture_default_str();
  t->add_option("--affine", train.affine, "identity | rescale:S | hflip | vflip | rotation:DEG")
      ->capture_default_str();
  t->add_option("--seed", train.cfg.seed)->capture_default_str();
  t->add_option("--loss-weights", train.loss_weights, "Weights of multi-class, ER, ECR and MIL losses")
      ->expected(4);
  t->add_flag("--no-augment", train.no_augment, "Disable training augmentation");
  t->add_option("--keep-checkpoints", train.keep_checkpoints, "Per-epoch checkpoints to keep; 0 keeps all")
      ->capture_default_str();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint; prints the metrics JSON and writes it to --out");
  e->add_option("--checkpoint", ev.checkpoint)->required();
  add_data_options(e, ev.data, "Evaluation");
  e->add_option("--split", ev.opt.split, "Split name recorded in the report")->capture_default_str();
  e->add_option("--threshold", ev.opt.threshold, "Decision threshold on the lesion probability")
      ->capture_default_str();
  e->add_option("--cam-threshold", ev.opt.cam_threshold, "Segmentation threshold on normalized CAMs")
      ->capture_default_str();
  e->add_option("--out", ev.out, "Metrics file")->capture_default_str();

  ExportArgs ex;
  auto* x = app.add_subcommand("export-cam", "Write CAM, refined CAM and attention overlays with value sidecars");
  x->add_option("--checkpoint", ex.checkpoint)->required();
  x->add_option("--images", ex.images, "Image path or glob such as dir/*.png")->required();
  x->add_option("--out-dir", ex.out_dir, "Existing output directory")->required();
  x->add_option("--image-size", ex.image_size, "0 keeps square images native")->capture_default_str();

  std::uint64_t gc_seed = 1234;
  auto* g = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite; exits 1 on failure");
  g->add_option("--seed", gc_seed)->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  try {
    if (s->parsed()) return run_synth(synth, paths);
    if (t->parsed()) return run_train(train, paths);
    if (e->parsed()) return run_eval(ev, paths);
    if (x->parsed()) return run_export(ex, paths);
    if (g->parsed()) return run_gradcheck(gc_seed);
  } catch (const seammil::Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  }
  return 0;
}
