#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "seammil/data_pipeline.hpp"
#include "seammil/evaluation.hpp"
#include "seammil/image_io.hpp"

using namespace seammil;

namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "seammil_test_data" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

AugmentConfig only(bool AugmentConfig::*flag) {
  AugmentConfig c;
  c.p = 1.0;
  c.hflip = c.vflip = c.crop = c.color_jitter = c.rotation = c.translation = false;
  c.*flag = true;
  return c;
}

double mask_iou(const Mask& a, const Mask& b) { return segmentation_score(a, b).iou; }

}  // namespace

TEST_CASE("grade binarization follows grade >= 2", "[data_pipeline]") {
  CHECK_FALSE(grade_is_referable(0));
  CHECK_FALSE(grade_is_referable(1));
  CHECK(grade_is_referable(2));
  CHECK(grade_is_referable(3));
  CHECK(grade_is_referable(4));
  CHECK_FALSE(grade_is_referable(2, 3));
}

TEST_CASE("load_index reads grades and resolves images", "[data_pipeline]") {
  const auto dir = scratch("index");
  fs::create_directories(dir / "img");
  {
    std::ofstream csv(dir / "labels.csv");
    csv << "image,level\n";
    for (int g = 0; g <= 4; ++g) {
      csv << "eye" << g << ',' << g << '\n';
      io::write_png(dir / "img" / ("eye" + std::to_string(g) + ".png"), Image(3, 4, 4));
    }
    csv << "ghost,3\n";
  }
  IndexReport rep;
  const auto recs = load_index(dir / "labels.csv", dir / "img", {{"eye4", Split::test}}, &rep);
  REQUIRE(recs.size() == 5);
  CHECK(rep.rows == 6);
  CHECK(rep.missing_images == 1);
  CHECK(rep.missing_ids == std::vector<std::string>{"ghost"});
  for (const auto& r : recs) {
    CHECK(r.is_rdr == (r.dr_grade >= 2));
    CHECK(fs::exists(r.path));
  }
  CHECK(recs[4].split == Split::test);
  CHECK(recs[0].split == Split::train);
}

TEST_CASE("load_index validation errors", "[data_pipeline]") {
  const auto dir = scratch("index_bad");
  CHECK_THROWS_AS(load_index(dir / "absent.csv", dir), IoError);
  {
    std::ofstream csv(dir / "labels.csv");
    csv << "image,level\na,0\nb,7\n";
  }
  try {
    load_index(dir / "labels.csv", dir);
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("row 3"));
  }
}

TEST_CASE("preprocess: centre crop, resize, unit range", "[data_pipeline]") {
  SECTION("already square at the target size") {
    RawImage raw(3, 512, 512);
    for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = static_cast<std::uint8_t>(i % 251);
    const Image out = preprocess(raw, 512);
    REQUIRE(out.height() == 512);
    REQUIRE(out.width() == 512);
    for (std::size_t i = 0; i < raw.size(); ++i) REQUIRE(out[i] == static_cast<float>(raw[i]) / 255.0f);
  }
  SECTION("landscape input is cropped to its centre square") {
    RawImage raw(3, 768, 1024);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 768; ++y)
        for (int x = 0; x < 1024; ++x) raw(c, y, x) = (x >= 128 && x < 896) ? 255 : 0;
    const Image out = preprocess(raw, 512);
    CHECK(out.height() == 512);
    CHECK(out.width() == 512);
    for (float v : out.values()) REQUIRE(v == 1.0f);
  }
  SECTION("values stay in [0, 1]") {
    RawImage raw(3, 100, 70);
    for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = static_cast<std::uint8_t>((i * 37) % 256);
    const Image out = preprocess(raw, 64);
    for (float v : out.values()) {
      REQUIRE(v >= 0.0f);
      REQUIRE(v <= 1.0f);
    }
  }
  CHECK_THROWS_AS(preprocess(RawImage(1, 100, 100)), DimensionError);
}

TEST_CASE("augment: identity, flip and determinism", "[data_pipeline]") {
  SynthConfig sc;
  sc.n_images = 2;
  const Image img = generate_synthetic(sc)[0].image;

  AugmentConfig none;
  none.p = 0.0;
  Rng r0(1);
  CHECK(augment(img, r0, none) == img);

  Rng r1(2);
  const Image flipped = augment(img, r1, only(&AugmentConfig::hflip));
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height(); ++y)
      for (int x = 0; x < img.width(); ++x) REQUIRE(flipped(c, y, x) == img(c, y, img.width() - 1 - x));

  Rng a(3), b(3);
  CHECK(augment(img, a, AugmentConfig{}) == augment(img, b, AugmentConfig{}));
}

TEST_CASE("augment defaults", "[data_pipeline]") {
  AugmentConfig c;
  CHECK(c.p == 0.5);
  CHECK(c.max_rotation_deg == 15.0);
  CHECK(c.max_translation == 0.05);
  CHECK(c.crop_min_scale == 0.9);
  CHECK(c.jitter == 0.1);
}

TEST_CASE("geometric augmentation keeps the mask aligned", "[data_pipeline][property]") {
  SynthConfig sc;
  sc.n_images = 20;
  sc.seed = 5;
  const Dataset d = generate_synthetic(sc);
  Rng rng(9);
  for (const auto& s : d) {
    if (!s.is_rdr) continue;
    for (auto flag : {&AugmentConfig::hflip, &AugmentConfig::vflip, &AugmentConfig::translation}) {
      Mask m = *s.mask;
      const Image out = augment(s.image, rng, only(flag), &m);
      REQUIRE(mask_iou(synthetic_lesion_pixels(out), m) == 1.0);
    }
    for (int turns : {1, 2, 3}) {
      const auto spec = AffineSpec::rotation(90 * turns);
      const Image out = apply_affine(s.image, spec);
      const Mask m = detail::grid_to_mask(apply_affine(detail::mask_to_grid(*s.mask), spec));
      REQUIRE(mask_iou(synthetic_lesion_pixels(out), m) == 1.0);
    }
  }
}

TEST_CASE("interpolating augmentations keep masks close", "[data_pipeline]") {
  // Small-angle rotation and crop resample the image bilinearly and the
  // mask by nearest neighbour, so only boundary pixels may disagree.
  SynthConfig sc;
  sc.n_images = 20;
  sc.seed = 6;
  Rng rng(10);
  double worst = 1.0;
  for (const auto& s : generate_synthetic(sc)) {
    if (!s.is_rdr) continue;
    for (auto flag : {&AugmentConfig::rotation, &AugmentConfig::crop}) {
      Mask m = *s.mask;
      const Image out = augment(s.image, rng, only(flag), &m);
      worst = std::min(worst, mask_iou(synthetic_lesion_pixels(out), m));
    }
  }
  CHECK(worst >= 0.5);
}

TEST_CASE("generate_synthetic: counts, masks, determinism", "[data_pipeline]") {
  SynthConfig sc;
  sc.n_images = 10;
  sc.positive_fraction = 0.5;
  const Dataset d = generate_synthetic(sc);
  REQUIRE(d.size() == 10);
  int pos = 0;
  for (const auto& s : d) {
    pos += s.is_rdr;
    REQUIRE(s.mask.has_value());
    CHECK((s.mask->count() > 0) == s.is_rdr);
    CHECK(synthetic_lesion_pixels(s.image) == *s.mask);
    CHECK(s.image.height() == 64);
    for (float v : s.image.values()) {
      REQUIRE(v >= 0.0f);
      REQUIRE(v <= 1.0f);
    }
  }
  CHECK(pos == 5);

  const Dataset again = generate_synthetic(sc);
  for (std::size_t i = 0; i < d.size(); ++i) {
    CHECK(d[i].image == again[i].image);
    CHECK(*d[i].mask == *again[i].mask);
    CHECK(d[i].is_rdr == again[i].is_rdr);
  }
  sc.seed = 8;
  CHECK_FALSE(generate_synthetic(sc)[0].image == d[0].image);
}

TEST_CASE("generate_synthetic: lesions stay small", "[data_pipeline]") {
  SynthConfig sc;
  sc.n_images = 40;
  double area = 0.0;
  int pos = 0;
  for (const auto& s : generate_synthetic(sc)) {
    if (!s.is_rdr) continue;
    area += static_cast<double>(s.mask->count()) / (64.0 * 64.0);
    ++pos;
  }
  CHECK(area / pos < 0.1);
  CHECK(sc.lesion_radius_min == 2.0);
  CHECK(sc.lesion_radius_max == 6.0);
}

TEST_CASE("generate_synthetic rejects infeasible geometry", "[data_pipeline]") {
  SynthConfig sc;
  sc.lesion_radius_max = 16.0;
  CHECK_THROWS_AS(generate_synthetic(sc), ConfigError);
  sc = SynthConfig{};
  sc.positive_fraction = 1.5;
  CHECK_THROWS_AS(generate_synthetic(sc), ConfigError);
}

TEST_CASE("dataset directory round trip is lossless", "[data_pipeline]") {
  SynthConfig sc;
  sc.n_images = 6;
  const Dataset d = generate_synthetic(sc);
  const auto dir = scratch("roundtrip");
  io::write_dataset(dir, d);
  CHECK(fs::exists(dir / "index.csv"));
  {
    std::ifstream in(dir / "index.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header == "image_id,is_rdr,mask_path");
  }
  const Dataset back = io::read_dataset(dir);
  REQUIRE(back.size() == d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    CHECK(back[i].id == d[i].id);
    CHECK(back[i].is_rdr == d[i].is_rdr);
    CHECK(back[i].image == d[i].image);
    REQUIRE(back[i].mask.has_value());
    CHECK(*back[i].mask == *d[i].mask);
  }
}

TEST_CASE("corrupt images report their path", "[data_pipeline]") {
  const auto dir = scratch("corrupt");
  {
    std::ofstream f(dir / "bad.png");
    f << "garbage";
  }
  try {
    io::read_image(dir / "bad.png");
    FAIL("expected an I/O error");
  } catch (const IoError& e) {
    CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("bad.png"));
  }
}
