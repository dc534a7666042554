#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "seammil/core/error.hpp"
#include "seammil/siamese.hpp"
#include "seammil/trainer.hpp"

// Checkpoint container:
//   8-byte magic "SEAMMIL\0", uint32 format version, uint64 header length,
//   JSON header (config snapshot, step counter, RNG state, parameter table),
//   then little-endian float64 blobs: every parameter, then every momentum
//   buffer, in parameter-table order.

namespace seammil {

inline constexpr char kCheckpointMagic[8] = {'S', 'E', 'A', 'M', 'M', 'I', 'L', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"backbone", to_string(c.backbone.kind)},
          {"out_channels", c.backbone.out_channels},
          {"out_stride", c.backbone.out_stride},
          {"embed_channels", c.embed_channels},
          {"mil_k", c.mil_k},
          {"mil_d", c.mil_d},
          {"variant", to_string(c.variant)},
          {"include_background", c.include_background},
          {"refine", c.refine},
          {"stop_grad_refined", c.stop_grad_refined},
          {"label_mask_cams", c.label_mask_cams}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.backbone.kind = parse_backbone_kind(j.at("backbone").get<std::string>());
  c.backbone.out_channels = j.at("out_channels").get<int>();
  c.backbone.out_stride = j.at("out_stride").get<int>();
  c.embed_channels = j.at("embed_channels").get<int>();
  c.mil_k = j.at("mil_k").get<int>();
  c.mil_d = j.at("mil_d").get<int>();
  c.variant = parse_model_variant(j.at("variant").get<std::string>());
  c.include_background = j.at("include_background").get<bool>();
  c.refine = j.at("refine").get<bool>();
  c.stop_grad_refined = j.at("stop_grad_refined").get<bool>();
  c.label_mask_cams = j.at("label_mask_cams").get<bool>();
  return c;
}

inline nlohmann::json to_json(const AugmentConfig& a) {
  return {{"p", a.p},
          {"hflip", a.hflip},
          {"vflip", a.vflip},
          {"crop", a.crop},
          {"color_jitter", a.color_jitter},
          {"rotation", a.rotation},
          {"translation", a.translation},
          {"crop_min_scale", a.crop_min_scale},
          {"jitter", a.jitter},
          {"max_rotation_deg", a.max_rotation_deg},
          {"max_translation", a.max_translation}};
}

inline AugmentConfig augment_config_from_json(const nlohmann::json& j) {
  AugmentConfig a;
  a.p = j.at("p").get<double>();
  a.hflip = j.at("hflip").get<bool>();
  a.vflip = j.at("vflip").get<bool>();
  a.crop = j.at("crop").get<bool>();
  a.color_jitter = j.at("color_jitter").get<bool>();
  a.rotation = j.at("rotation").get<bool>();
  a.translation = j.at("translation").get<bool>();
  a.crop_min_scale = j.at("crop_min_scale").get<double>();
  a.jitter = j.at("jitter").get<double>();
  a.max_rotation_deg = j.at("max_rotation_deg").get<double>();
  a.max_translation = j.at("max_translation").get<double>();
  return a;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"base_lr", c.base_lr},
          {"lr_multiplier_new_params", c.lr_multiplier_new_params},
          {"decay_power", c.decay_power},
          {"weight_decay", c.weight_decay},
          {"momentum", c.momentum},
          {"clip_grad_norm", c.clip_grad_norm},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"affine", c.affine.to_string()},
          {"seed", c.seed},
          {"loss_weights", c.loss_weights},
          {"augment", c.augment},
          {"augmentation", to_json(c.augmentation)}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.base_lr = j.at("base_lr").get<double>();
  c.lr_multiplier_new_params = j.at("lr_multiplier_new_params").get<double>();
  c.decay_power = j.at("decay_power").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.momentum = j.at("momentum").get<double>();
  c.clip_grad_norm = j.at("clip_grad_norm").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.epochs = j.at("epochs").get<int>();
  c.affine = AffineSpec::parse(j.at("affine").get<std::string>());
  c.seed = j.at("seed").get<std::uint64_t>();
  c.loss_weights = j.at("loss_weights").get<LossWeights>();
  c.augment = j.at("augment").get<bool>();
  c.augmentation = augment_config_from_json(j.at("augmentation"));
  return c;
}

struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

inline void write_doubles(std::ofstream& out, const std::vector<double>& v) {
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

template <typename T>
std::vector<double> widen(std::span<const T> v) {
  return std::vector<double>(v.begin(), v.end());
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const TrainState<T>& state, const TrainConfig& train_cfg) {
  const auto& params = state.model.parameters().all();
  nlohmann::json header;
  header["model"] = to_json(state.model.config());
  header["train"] = to_json(train_cfg);
  header["step"] = state.step;
  header["total_steps"] = state.total_steps;
  header["rng_state"] = state.rng.state();
  nlohmann::json table = nlohmann::json::array();
  for (const auto& p : params) {
    table.push_back({{"name", p.name}, {"shape", p.shape}, {"numel", p.numel()}});
  }
  header["parameters"] = table;
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint32_t version = kCheckpointVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : params) detail::write_doubles(out, detail::widen<T>(p.value));
  for (const auto& v : state.velocity) detail::write_doubles(out, detail::widen<T>(v));
  if (!out) throw IoError("short write on checkpoint " + path.string());
}

template <typename T>
TrainState<T> load_checkpoint(const std::filesystem::path& path, TrainConfig* train_cfg = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw IoError(path.string() + " is not a checkpoint");
  }
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint format version " + std::to_string(version) + " is not supported");
  }
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("truncated checkpoint header in " + path.string());
  const auto header = nlohmann::json::parse(text);

  const ModelConfig model_cfg = model_config_from_json(header.at("model"));
  const TrainConfig tcfg = train_config_from_json(header.at("train"));
  if (train_cfg) *train_cfg = tcfg;

  TrainState<T> state;
  state.model = SiameseModel<T>(model_cfg, tcfg.seed);
  state.step = header.at("step").get<long>();
  state.total_steps = header.at("total_steps").get<long>();
  state.rng.set_state(header.at("rng_state").get<std::string>());
  state.last_checkpoint = path.string();

  auto& params = state.model.parameters().all();
  const auto& table = header.at("parameters");
  if (table.size() != params.size()) throw IoError("checkpoint parameter table does not match the model");
  auto read_blob = [&](Buffer<T>& dst) {
    std::vector<double> buf(dst.size());
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(double)));
    if (!in) throw IoError("truncated parameter data in " + path.string());
    for (std::size_t i = 0; i < buf.size(); ++i) dst[i] = static_cast<T>(buf[i]);
  };
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (table[i].at("name").get<std::string>() != params[i].name ||
        table[i].at("numel").get<std::size_t>() != params[i].numel()) {
      throw IoError("checkpoint parameter '" + table[i].at("name").get<std::string>() + "' does not match the model");
    }
    read_blob(params[i].value);
  }
  state.velocity = state.model.parameters().zeros_like();
  for (auto& v : state.velocity) read_blob(v);
  return state;
}

}  // namespace seammil
