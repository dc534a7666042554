#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "seammil/cam_engine.hpp"
#include "seammil/data_pipeline.hpp"
#include "seammil/equivariance.hpp"
#include "seammil/image_io.hpp"

namespace seammil {

inline constexpr float kOverlayAlpha = 0.5f;

// Piecewise-linear jet colormap on [0, 1]; jet(0) = (0, 0, 0.5).
inline std::array<float, 3> jet(float v) {
  v = std::clamp(v, 0.0f, 1.0f);
  auto ramp = [](float x) { return std::clamp(1.5f - std::abs(x), 0.0f, 1.0f); };
  return {ramp(4.0f * v - 3.0f), ramp(4.0f * v - 2.0f), ramp(4.0f * v - 1.0f)};
}

// Lesion channel of a normalized CAM, upsampled to the image and blended
// over it: out = (1 - a) * image + a * jet(cam).
template <typename T>
Image heatmap_overlay(const ActivationMap<T>& cam, const Image& base) {
  if (cam.classes() < 2) throw DimensionError("heatmap needs a lesion channel");
  const Grid<T> up = resize_bilinear(cam.data, base.height(), base.width());
  Image out(3, base.height(), base.width());
  for (int y = 0; y < base.height(); ++y) {
    for (int x = 0; x < base.width(); ++x) {
      const auto color = jet(static_cast<float>(up(1, y, x)));
      for (int c = 0; c < 3; ++c) {
        out(c, y, x) = (1.0f - kOverlayAlpha) * base(c, y, x) + kOverlayAlpha * color[static_cast<std::size_t>(c)];
      }
    }
  }
  return out;
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& png) {
  std::filesystem::path p = png;
  p.replace_extension(".cam.json");
  return p;
}

template <typename T>
void write_cam_sidecar(const std::filesystem::path& path, const ActivationMap<T>& cam) {
  nlohmann::json j;
  j["classes"] = cam.classes();
  j["height"] = cam.height();
  j["width"] = cam.width();
  j["kind"] = cam.kind == CamKind::original ? "original" : "refined";
  j["normalized"] = cam.normalized;
  std::vector<double> values(cam.data.values().begin(), cam.data.values().end());
  j["data"] = values;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump() << '\n';
  if (!out) throw IoError("cannot write " + path.string());
}

inline ActivationMap<double> read_cam_sidecar(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  const auto j = nlohmann::json::parse(in);
  ActivationMap<double> cam{Grid<double>(j.at("classes").get<int>(), j.at("height").get<int>(), j.at("width").get<int>()),
                            j.at("kind").get<std::string>() == "original" ? CamKind::original : CamKind::refined,
                            j.at("normalized").get<bool>()};
  const auto values = j.at("data").get<std::vector<double>>();
  if (values.size() != cam.data.size()) throw IoError("sidecar " + path.string() + " has the wrong number of values");
  std::copy(values.begin(), values.end(), cam.data.values().begin());
  return cam;
}

// Writes the overlay PNG at out_path and the raw CAM values next to it.
template <typename T>
void export_heatmap(const ActivationMap<T>& cam, const Image& base, const std::filesystem::path& out_path) {
  if (out_path.has_parent_path() && !std::filesystem::exists(out_path.parent_path())) {
    throw IoError("output directory " + out_path.parent_path().string() + " does not exist");
  }
  io::write_png(out_path, heatmap_overlay(cam, base));
  write_cam_sidecar(sidecar_path(out_path), cam);
}

}  // namespace seammil
