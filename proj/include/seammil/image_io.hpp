#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "seammil/core/error.hpp"
#include "seammil/data_pipeline.hpp"

// PNG/JPEG codecs. The only part of the library that needs OpenCV.

namespace seammil::io {

inline RawImage read_image(const std::filesystem::path& path) {
  const cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw IoError("decode error: cannot read image " + path.string());
  RawImage out(3, bgr.rows, bgr.cols);
  for (int y = 0; y < bgr.rows; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < bgr.cols; ++x) {
      out(0, y, x) = row[x][2];
      out(1, y, x) = row[x][1];
      out(2, y, x) = row[x][0];
    }
  }
  return out;
}

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

inline void write_png(const std::filesystem::path& path, const Image& img) {
  if (img.channels() != 3) throw DimensionError("write_png expects RGB, got " + img.shape());
  cv::Mat bgr(img.height(), img.width(), CV_8UC3);
  for (int y = 0; y < img.height(); ++y) {
    auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < img.width(); ++x) {
      row[x] = cv::Vec3b(to_byte(img(2, y, x)), to_byte(img(1, y, x)), to_byte(img(0, y, x)));
    }
  }
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), bgr);
  } catch (const cv::Exception&) {
    ok = false;
  }
  if (!ok) throw IoError("cannot write " + path.string());
}

inline void write_mask(const std::filesystem::path& path, const Mask& mask) {
  cv::Mat m(mask.height, mask.width, CV_8UC1);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) m.at<std::uint8_t>(y, x) = mask.at(y, x) ? 255 : 0;
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), m);
  } catch (const cv::Exception&) {
    ok = false;
  }
  if (!ok) throw IoError("cannot write " + path.string());
}

inline Mask read_mask(const std::filesystem::path& path) {
  const cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw IoError("decode error: cannot read mask " + path.string());
  Mask out(m.rows, m.cols);
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) out.at(y, x) = m.at<std::uint8_t>(y, x) >= 128 ? 1 : 0;
  return out;
}

// Training tensor for a decoded image: square inputs already at the target
// size are only rescaled to [0, 1]; anything else goes through preprocess.
// size <= 0 keeps square images at their native size.
inline Image load_training_image(const std::filesystem::path& path, int size) {
  const RawImage raw = read_image(path);
  const bool square = raw.height() == raw.width();
  if (square && (size <= 0 || raw.height() == size)) {
    Image img(3, raw.height(), raw.width());
    for (std::size_t i = 0; i < raw.size(); ++i) img[i] = static_cast<float>(raw[i]) / 255.0f;
    return img;
  }
  return preprocess(raw, size > 0 ? size : kDefaultImageSize);
}

// Dataset directory layout: index.csv (image_id,is_rdr,mask_path) with
// images/<id>.png and masks/<id>.png next to it.
inline void write_dataset(const std::filesystem::path& dir, const Dataset& data) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  std::ofstream index(dir / "index.csv");
  if (!index) throw IoError("cannot write " + (dir / "index.csv").string());
  index << "image_id,is_rdr,mask_path\n";
  for (const auto& s : data) {
    write_png(dir / "images" / (s.id + ".png"), s.image);
    std::string mask_rel;
    if (s.mask) {
      mask_rel = "masks/" + s.id + ".png";
      write_mask(dir / mask_rel, *s.mask);
    }
    index << s.id << ',' << (s.is_rdr ? 1 : 0) << ',' << mask_rel << '\n';
  }
  if (!index) throw IoError("cannot write " + (dir / "index.csv").string());
}

inline Dataset read_dataset(const std::filesystem::path& dir, int size = 0) {
  namespace fs = std::filesystem;
  std::ifstream in(dir / "index.csv");
  if (!in) throw IoError("cannot read " + (dir / "index.csv").string());
  std::string line;
  std::getline(in, line);
  const auto header = seammil::detail::split_csv_line(line);
  const int id_col = seammil::detail::find_column(header, {"image_id"});
  const int label_col = seammil::detail::find_column(header, {"is_rdr"});
  const int mask_col = seammil::detail::find_column(header, {"mask_path"});
  if (id_col < 0 || label_col < 0) throw IoError("index.csv needs image_id and is_rdr columns");
  Dataset data;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto f = seammil::detail::split_csv_line(line);
    if (static_cast<int>(f.size()) <= std::max(id_col, label_col)) {
      throw ValidationError("index.csv row " + std::to_string(row) + ": too few columns");
    }
    Sample s;
    s.id = f[static_cast<std::size_t>(id_col)];
    const std::string& lab = f[static_cast<std::size_t>(label_col)];
    if (lab != "0" && lab != "1") {
      throw ValidationError("index.csv row " + std::to_string(row) + ": is_rdr must be 0 or 1");
    }
    s.is_rdr = lab == "1";
    const auto path = seammil::detail::locate_image(dir / "images", s.id);
    if (!path) throw IoError("missing image for " + s.id + " under " + (dir / "images").string());
    s.image = load_training_image(*path, size);
    if (mask_col >= 0 && static_cast<int>(f.size()) > mask_col && !f[static_cast<std::size_t>(mask_col)].empty()) {
      Mask m = read_mask(dir / f[static_cast<std::size_t>(mask_col)]);
      if (m.height == s.image.height() && m.width == s.image.width()) s.mask = std::move(m);
    }
    data.push_back(std::move(s));
  }
  if (data.empty()) throw ConfigError("dataset " + dir.string() + " has no samples");
  return data;
}

// Images listed by an EyePacs-style index, decoded and preprocessed.
inline Dataset read_labelled_images(const std::vector<LabelRecord>& records, int size) {
  Dataset data;
  data.reserve(records.size());
  for (const auto& r : records) {
    data.push_back(Sample{r.image_id, preprocess(read_image(r.path), size > 0 ? size : kDefaultImageSize), r.is_rdr,
                          std::nullopt});
  }
  return data;
}

}  // namespace seammil::io
