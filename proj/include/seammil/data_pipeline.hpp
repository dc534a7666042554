#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "seammil/core/error.hpp"
#include "seammil/core/grid.hpp"
#include "seammil/core/random.hpp"
#include "seammil/equivariance.hpp"

namespace seammil {

// RGB, 3 x H x W, values in [0, 1].
using Image = Grid<float>;
// 8-bit RGB as decoded from disk.
using RawImage = Grid<std::uint8_t>;

inline constexpr int kDefaultImageSize = 512;
inline constexpr int kDefaultReferableGrade = 2;

enum class Split { train, val, test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s + "'");
}

// Grades 0 (none) and 1 (mild) are non-referable; 2 and above are referable.
inline bool grade_is_referable(int grade, int threshold = kDefaultReferableGrade) { return grade >= threshold; }

struct LabelRecord {
  std::string image_id;
  int dr_grade = 0;
  bool is_rdr = false;
  Split split = Split::train;
  std::filesystem::path path;
};

struct IndexReport {
  std::size_t rows = 0;
  std::size_t missing_images = 0;
  std::vector<std::string> missing_ids;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (char ch : line) {
    if (ch == '"') {
      quoted = !quoted;
    } else if (ch == ',' && !quoted) {
      out.push_back(field);
      field.clear();
    } else if (ch != '\r') {
      field.push_back(ch);
    }
  }
  out.push_back(field);
  for (auto& f : out) {
    const auto b = f.find_first_not_of(" \t");
    const auto e = f.find_last_not_of(" \t");
    f = b == std::string::npos ? std::string() : f.substr(b, e - b + 1);
  }
  return out;
}

inline int find_column(const std::vector<std::string>& header, std::initializer_list<const char*> names) {
  for (std::size_t i = 0; i < header.size(); ++i) {
    std::string h = header[i];
    std::transform(h.begin(), h.end(), h.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    for (const char* n : names) {
      if (h == n) return static_cast<int>(i);
    }
  }
  return -1;
}

inline std::optional<std::filesystem::path> locate_image(const std::filesystem::path& dir, const std::string& id) {
  namespace fs = std::filesystem;
  const fs::path direct = dir / id;
  if (direct.has_extension() && fs::is_regular_file(direct)) return direct;
  for (const char* ext : {".jpeg", ".jpg", ".png", ".JPEG", ".JPG", ".PNG"}) {
    fs::path p = dir / (id + ext);
    if (fs::is_regular_file(p)) return p;
  }
  return std::nullopt;
}

}  // namespace detail

// Reads an EyePacs-style label CSV (image identifier + integer grade),
// derives the referable bit and resolves image files under image_dir.
// Rows whose image is missing are skipped and counted in the report.
inline std::vector<LabelRecord> load_index(const std::filesystem::path& labels_csv,
                                           const std::filesystem::path& image_dir,
                                           const std::map<std::string, Split>& split_map = {},
                                           IndexReport* report = nullptr, Split default_split = Split::train,
                                           int referable_grade = kDefaultReferableGrade) {
  std::ifstream in(labels_csv);
  if (!in) throw IoError("cannot read label CSV " + labels_csv.string());
  std::string line;
  if (!std::getline(in, line)) throw IoError("label CSV " + labels_csv.string() + " is empty");
  const auto header = detail::split_csv_line(line);
  const int id_col = detail::find_column(header, {"image", "image_id", "id"});
  const int grade_col = detail::find_column(header, {"level", "grade", "dr_grade"});
  if (id_col < 0 || grade_col < 0) {
    throw IoError("label CSV " + labels_csv.string() + " needs image identifier and grade columns");
  }
  IndexReport local;
  IndexReport& rep = report ? *report : local;
  std::vector<LabelRecord> records;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto fields = detail::split_csv_line(line);
    if (static_cast<int>(fields.size()) <= std::max(id_col, grade_col)) {
      throw ValidationError("label CSV row " + std::to_string(row) + ": too few columns");
    }
    LabelRecord r;
    r.image_id = fields[static_cast<std::size_t>(id_col)];
    try {
      std::size_t used = 0;
      r.dr_grade = std::stoi(fields[static_cast<std::size_t>(grade_col)], &used);
      if (used != fields[static_cast<std::size_t>(grade_col)].size()) throw std::invalid_argument("trailing");
    } catch (const std::logic_error&) {
      throw ValidationError("label CSV row " + std::to_string(row) + ": grade '" +
                            fields[static_cast<std::size_t>(grade_col)] + "' is not an integer");
    }
    if (r.dr_grade < 0 || r.dr_grade > 4) {
      throw ValidationError("label CSV row " + std::to_string(row) + ": grade " + std::to_string(r.dr_grade) +
                            " outside 0..4");
    }
    r.is_rdr = grade_is_referable(r.dr_grade, referable_grade);
    const auto it = split_map.find(r.image_id);
    r.split = it == split_map.end() ? default_split : it->second;
    ++rep.rows;
    const auto path = detail::locate_image(image_dir, r.image_id);
    if (!path) {
      ++rep.missing_images;
      rep.missing_ids.push_back(r.image_id);
      continue;
    }
    r.path = *path;
    records.push_back(std::move(r));
  }
  return records;
}

// Centre square crop (side = min(H, W)), bilinear resize to size x size,
// values scaled to [0, 1].
inline Image preprocess(const RawImage& raw, int size = kDefaultImageSize) {
  if (raw.channels() != 3) throw DimensionError("preprocess expects RGB input, got " + raw.shape());
  if (raw.height() < 64 || raw.width() < 64) {
    throw ValidationError("preprocess needs at least 64 px per side, got " + raw.shape());
  }
  if (size < 1) throw ConfigError("preprocess target size must be >= 1");
  const int side = std::min(raw.height(), raw.width());
  const int oy = (raw.height() - side) / 2;
  const int ox = (raw.width() - side) / 2;
  Image square(3, side, side);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) square(c, y, x) = static_cast<float>(raw(c, y + oy, x + ox)) / 255.0f;
  return resize_bilinear(square, size, size);
}

// Augmentation magnitudes; each transform fires independently with
// probability p.
struct AugmentConfig {
  double p = 0.5;
  bool hflip = true;
  bool vflip = true;
  bool crop = true;
  bool color_jitter = true;
  bool rotation = true;
  bool translation = true;
  double crop_min_scale = 0.9;
  double jitter = 0.1;           // brightness / contrast / saturation, +-fraction
  double max_rotation_deg = 15.0;
  double max_translation = 0.05;  // fraction of the image side
};

namespace detail {

// Inverse-mapped rigid warp about the image centre: output pixel (y, x)
// samples the input at R(-angle)(p - centre) + centre - shift.
template <typename T>
Grid<T> warp_rigid(const Grid<T>& in, double angle_rad, double shift_y, double shift_x, bool nearest) {
  Grid<T> out(in.channels(), in.height(), in.width());
  const double cy = (in.height() - 1) / 2.0;
  const double cx = (in.width() - 1) / 2.0;
  const double cs = std::cos(angle_rad);
  const double sn = std::sin(angle_rad);
  for (int y = 0; y < in.height(); ++y) {
    for (int x = 0; x < in.width(); ++x) {
      const double dy = y - shift_y - cy;
      const double dx = x - shift_x - cx;
      const double sy = cs * dy - sn * dx + cy;
      const double sx = sn * dy + cs * dx + cx;
      if (nearest) {
        const int iy = static_cast<int>(std::lround(sy));
        const int ix = static_cast<int>(std::lround(sx));
        if (iy < 0 || iy >= in.height() || ix < 0 || ix >= in.width()) continue;
        for (int c = 0; c < in.channels(); ++c) out(c, y, x) = in(c, iy, ix);
        continue;
      }
      const int y0 = static_cast<int>(std::floor(sy));
      const int x0 = static_cast<int>(std::floor(sx));
      const double fy = sy - y0;
      const double fx = sx - x0;
      for (int c = 0; c < in.channels(); ++c) {
        double acc = 0.0;
        for (int ty = 0; ty < 2; ++ty) {
          for (int tx = 0; tx < 2; ++tx) {
            const int py = y0 + ty;
            const int px = x0 + tx;
            if (py < 0 || py >= in.height() || px < 0 || px >= in.width()) continue;
            acc += (ty ? fy : 1.0 - fy) * (tx ? fx : 1.0 - fx) * static_cast<double>(in(c, py, px));
          }
        }
        out(c, y, x) = static_cast<T>(acc);
      }
    }
  }
  return out;
}

template <typename T>
Grid<T> crop_resize(const Grid<T>& in, int oy, int ox, int side_h, int side_w, bool nearest) {
  Grid<T> cropped(in.channels(), side_h, side_w);
  for (int c = 0; c < in.channels(); ++c)
    for (int y = 0; y < side_h; ++y)
      for (int x = 0; x < side_w; ++x) cropped(c, y, x) = in(c, y + oy, x + ox);
  if (!nearest) return resize_bilinear(cropped, in.height(), in.width());
  Grid<T> out(in.channels(), in.height(), in.width());
  for (int c = 0; c < in.channels(); ++c)
    for (int y = 0; y < in.height(); ++y)
      for (int x = 0; x < in.width(); ++x) {
        const int sy = std::min(side_h - 1, static_cast<int>((y + 0.5) * side_h / in.height()));
        const int sx = std::min(side_w - 1, static_cast<int>((x + 0.5) * side_w / in.width()));
        out(c, y, x) = cropped(c, sy, sx);
      }
  return out;
}

inline Grid<float> mask_to_grid(const Mask& m) {
  Grid<float> g(1, m.height, m.width);
  for (std::size_t i = 0; i < m.bits.size(); ++i) g[i] = m.bits[i] ? 1.0f : 0.0f;
  return g;
}

inline Mask grid_to_mask(const Grid<float>& g) {
  Mask m(g.height(), g.width());
  for (std::size_t i = 0; i < m.bits.size(); ++i) m.bits[i] = g[i] > 0.5f ? 1 : 0;
  return m;
}

inline void color_jitter(Image& img, Rng& rng, double amount) {
  const float brightness = static_cast<float>(rng.uniform(1.0 - amount, 1.0 + amount));
  const float contrast = static_cast<float>(rng.uniform(1.0 - amount, 1.0 + amount));
  const float saturation = static_cast<float>(rng.uniform(1.0 - amount, 1.0 + amount));
  const int n = img.plane();
  auto r = img.channel(0);
  auto g = img.channel(1);
  auto b = img.channel(2);
  double mean_gray = 0.0;
  for (int i = 0; i < n; ++i) {
    r[i] *= brightness;
    g[i] *= brightness;
    b[i] *= brightness;
    mean_gray += 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
  }
  const float mg = static_cast<float>(mean_gray / n);
  for (int i = 0; i < n; ++i) {
    float* px[3] = {&r[i], &g[i], &b[i]};
    for (float* v : px) *v = (*v - mg) * contrast + mg;
    const float gray = 0.299f * r[i] + 0.587f * g[i] + 0.114f * b[i];
    for (float* v : px) *v = std::clamp(gray + (*v - gray) * saturation, 0.0f, 1.0f);
  }
}

}  // namespace detail

// Random flips, crop, colour jitter, rotation and translation. Geometric
// transforms are applied identically to the mask when one is given.
inline Image augment(const Image& image, Rng& rng, const AugmentConfig& cfg, Mask* mask = nullptr) {
  Image img = image;
  Grid<float> m = mask ? detail::mask_to_grid(*mask) : Grid<float>();
  if (cfg.hflip && rng.bernoulli(cfg.p)) {
    img = flip_horizontal(img);
    if (mask) m = flip_horizontal(m);
  }
  if (cfg.vflip && rng.bernoulli(cfg.p)) {
    img = flip_vertical(img);
    if (mask) m = flip_vertical(m);
  }
  if (cfg.crop && rng.bernoulli(cfg.p)) {
    const double scale = rng.uniform(cfg.crop_min_scale, 1.0);
    const int sh = std::max(1, static_cast<int>(std::lround(img.height() * scale)));
    const int sw = std::max(1, static_cast<int>(std::lround(img.width() * scale)));
    const int oy = rng.uniform_int(0, img.height() - sh);
    const int ox = rng.uniform_int(0, img.width() - sw);
    img = detail::crop_resize(img, oy, ox, sh, sw, false);
    if (mask) m = detail::crop_resize(m, oy, ox, sh, sw, true);
  }
  if (cfg.color_jitter && rng.bernoulli(cfg.p)) detail::color_jitter(img, rng, cfg.jitter);
  if (cfg.rotation && rng.bernoulli(cfg.p)) {
    const double angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg) * std::numbers::pi / 180.0;
    img = detail::warp_rigid(img, angle, 0.0, 0.0, false);
    if (mask) m = detail::warp_rigid(m, angle, 0.0, 0.0, true);
  }
  if (cfg.translation && rng.bernoulli(cfg.p)) {
    const int max_dy = static_cast<int>(std::floor(cfg.max_translation * img.height()));
    const int max_dx = static_cast<int>(std::floor(cfg.max_translation * img.width()));
    const int dy = rng.uniform_int(-max_dy, max_dy);
    const int dx = rng.uniform_int(-max_dx, max_dx);
    img = detail::warp_rigid(img, 0.0, dy, dx, true);
    if (mask) m = detail::warp_rigid(m, 0.0, dy, dx, true);
  }
  if (mask) *mask = detail::grid_to_mask(m);
  return img;
}

enum class BackgroundTexture { flat, vignette };

inline BackgroundTexture parse_background(const std::string& s) {
  if (s == "flat") return BackgroundTexture::flat;
  if (s == "vignette") return BackgroundTexture::vignette;
  throw ConfigError("unknown background texture '" + s + "'");
}

inline const char* to_string(BackgroundTexture b) { return b == BackgroundTexture::flat ? "flat" : "vignette"; }

struct SynthConfig {
  int n_images = 100;
  int image_size = 64;
  int lesion_count_min = 1;
  int lesion_count_max = 3;
  double lesion_radius_min = 2.0;
  double lesion_radius_max = 6.0;
  BackgroundTexture background = BackgroundTexture::vignette;
  double positive_fraction = 0.5;
  std::uint64_t seed = 7;

  void validate() const {
    if (n_images < 1) throw ConfigError("n_images must be >= 1");
    if (image_size < 16) throw ConfigError("image_size must be >= 16");
    if (lesion_count_min < 1 || lesion_count_max < lesion_count_min) {
      throw ConfigError("lesion count range must satisfy 1 <= min <= max");
    }
    if (!(lesion_radius_min > 0) || lesion_radius_max < lesion_radius_min) {
      throw ConfigError("lesion radius range must satisfy 0 < min <= max");
    }
    if (!(lesion_radius_max < image_size / 4.0)) {
      throw ConfigError("lesion radius " + std::to_string(lesion_radius_max) + " does not fit a " +
                        std::to_string(image_size) + " px image (must be < size/4)");
    }
    if (!(positive_fraction > 0.0 && positive_fraction < 1.0)) throw ConfigError("positive_fraction must be in (0,1)");
  }
};

struct Sample {
  std::string id;
  Image image;
  bool is_rdr = false;
  std::optional<Mask> mask;
};

using Dataset = std::vector<Sample>;

// Colour levels of the synthetic renderer. Every non-lesion pixel keeps its
// green channel at or below kSynthBackgroundGreenMax and every lesion pixel
// at or above kSynthLesionGreenMin, so thresholding green at 0.5 recovers
// the ground-truth mask exactly.
inline constexpr float kSynthBackgroundGreenMax = 114.0f / 255.0f;
inline constexpr float kSynthLesionGreenMin = 153.0f / 255.0f;

namespace detail {

inline float quantize8(double v) {
  return static_cast<float>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0f;
}

}  // namespace detail

// Fundus-like images: reddish background with noise texture and an optic
// disc; positives add bright, irregular yellow lesion blobs. Values are
// quantized to 8 bits so a PNG round trip is lossless.
inline Dataset generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const int n = cfg.n_images;
  const int positives = static_cast<int>(std::lround(cfg.positive_fraction * n));
  std::vector<bool> labels(static_cast<std::size_t>(n), false);
  for (int i = 0; i < positives; ++i) labels[static_cast<std::size_t>(i)] = true;
  rng.shuffle(labels.begin(), labels.end());

  const int s = cfg.image_size;
  const double centre = (s - 1) / 2.0;
  const double fundus_r = 0.48 * s;
  Dataset out;
  out.reserve(static_cast<std::size_t>(n));
  for (int idx = 0; idx < n; ++idx) {
    Sample sample;
    char name[32];
    std::snprintf(name, sizeof(name), "synth_%05d", idx);
    sample.id = name;
    sample.is_rdr = labels[static_cast<std::size_t>(idx)];
    Image img(3, s, s);
    Mask mask(s, s);

    const double base_r = rng.uniform(0.50, 0.62);
    const double base_g = rng.uniform(0.20, 0.28);
    const double base_b = rng.uniform(0.08, 0.14);
    const double disc_side = rng.bernoulli(0.5) ? 1.0 : -1.0;
    const double disc_y = centre + rng.uniform(-0.08, 0.08) * s;
    const double disc_x = centre + disc_side * rng.uniform(0.22, 0.28) * s;
    const double disc_r = rng.uniform(0.07, 0.09) * s;

    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        double shade = 1.0;
        if (cfg.background == BackgroundTexture::vignette) {
          const double rr = std::hypot(y - centre, x - centre) / fundus_r;
          shade = rr > 1.0 ? 0.08 : 1.0 - 0.45 * rr * rr;
        }
        const double noise = rng.normal(0.0, 0.025);
        double r = base_r * shade + noise;
        double g = base_g * shade + 0.5 * noise;
        double b = base_b * shade + 0.5 * noise;
        const double dd = std::hypot(y - disc_y, x - disc_x);
        if (shade > 0.1 && dd < disc_r) {
          const double t = 1.0 - 0.5 * dd / disc_r;
          r = std::max(r, 0.88 * t);
          g = std::max(g, 0.42 * t);
          b = std::max(b, 0.30 * t);
        }
        img(0, y, x) = detail::quantize8(r);
        img(1, y, x) = std::min(detail::quantize8(g), kSynthBackgroundGreenMax);
        img(2, y, x) = detail::quantize8(b);
      }
    }

    if (sample.is_rdr) {
      const int count = rng.uniform_int(cfg.lesion_count_min, cfg.lesion_count_max);
      const double place_r = cfg.background == BackgroundTexture::vignette ? 0.38 * s : 0.5 * s - cfg.lesion_radius_max - 1;
      for (int l = 0; l < count; ++l) {
        const double radius = rng.uniform(cfg.lesion_radius_min, cfg.lesion_radius_max);
        const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double dist = place_r * std::sqrt(rng.uniform());
        const double ly = centre + dist * std::sin(ang);
        const double lx = centre + dist * std::cos(ang);
        const int lobes = rng.uniform_int(2, 5);
        const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double wobble = rng.uniform(0.1, 0.3);
        const double lr = rng.uniform(0.88, 0.98);
        const double lg = rng.uniform(0.72, 0.85);
        const double lb = rng.uniform(0.25, 0.40);
        for (int y = 0; y < s; ++y) {
          for (int x = 0; x < s; ++x) {
            const double dy = y - ly;
            const double dx = x - lx;
            const double theta = std::atan2(dy, dx);
            const double edge = radius * (1.0 + wobble * std::sin(lobes * theta + phase));
            if (std::hypot(dy, dx) > edge) continue;
            mask.at(y, x) = 1;
            img(0, y, x) = detail::quantize8(lr);
            img(1, y, x) = std::max(detail::quantize8(lg), kSynthLesionGreenMin);
            img(2, y, x) = detail::quantize8(lb);
          }
        }
      }
      if (mask.count() == 0) {
        // Degenerate geometry (blob smaller than a pixel): mark its centre.
        const int cy = static_cast<int>(centre);
        mask.at(cy, cy) = 1;
        img(1, cy, cy) = kSynthLesionGreenMin;
      }
    }
    sample.image = std::move(img);
    sample.mask = std::move(mask);
    out.push_back(std::move(sample));
  }
  return out;
}

// Pixels whose green channel marks them as synthetic lesion.
inline Mask synthetic_lesion_pixels(const Image& img) {
  Mask m(img.height(), img.width());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) m.at(y, x) = img(1, y, x) > 0.5f ? 1 : 0;
  return m;
}

}  // namespace seammil
