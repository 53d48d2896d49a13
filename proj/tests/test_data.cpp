#include <doctest.h>

#include <cmath>
#include <fstream>

#include "mcm/concept_bank.hpp"
#include "mcm/dataset.hpp"
#include "mcm/image_io.hpp"
#include "support/tempdir.hpp"

using namespace mcm;
using testing_util::TempDir;

namespace {

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / std::sqrt(na * nb);
}

}  // namespace

TEST_CASE("prototype banks are unit, well separated and seeded") {
  const std::vector<std::string> names{"a", "b", "c", "d"};
  const ConceptBank bank = build_prototype_bank(names, 64, 3);
  CHECK_NOTHROW(validate_bank(bank));
  CHECK(bank.vector_count() == 8);
  for (std::size_t i = 0; i < 8; ++i) {
    double n = 0;
    for (double x : bank.vector(i)) n += x * x;
    CHECK(n == doctest::Approx(1.0).epsilon(1e-12));
    for (std::size_t k = i + 1; k < 8; ++k) CHECK(cosine(bank.vector(i), bank.vector(k)) < kMaxBankCosine);
  }
  CHECK(bank.vector_name(3) == "Not b");
  CHECK(ConceptBank::antonym_id(ConceptBank::antonym_id(5)) == 5);
  CHECK(build_prototype_bank(names, 64, 3).positive == bank.positive);
  CHECK(build_prototype_bank(names, 64, 4).positive != bank.positive);
  CHECK_THROWS_AS(build_prototype_bank(names, 4, 3), ConfigError);
  CHECK_THROWS_AS(bank.index_of("zzz"), ContractError);
  CHECK(bank.index_of("c") == 2);
}

TEST_CASE("bank validation names the offending vectors") {
  ConceptBank bank = build_prototype_bank({"a", "b"}, 8, 1);
  bank.antonym[1] = bank.positive[0];
  try {
    validate_bank(bank);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("Not b") != std::string::npos);
  }
  bank = build_prototype_bank({"a", "b"}, 8, 1);
  bank.positive[0][0] += 0.5;
  CHECK_THROWS_AS(validate_bank(bank), ValidationError);
  bank = build_prototype_bank({"a", "b"}, 8, 1);
  bank.names[1] = "a";
  CHECK_THROWS_AS(validate_bank(bank), ValidationError);
}

TEST_CASE("bank files round trip") {
  TempDir dir;
  const ConceptBank bank = build_prototype_bank({"x", "y", "z"}, 12, 8);
  save_bank(bank, dir / "bank.txt");
  const ConceptBank back = load_bank(dir / "bank.txt");
  CHECK(back.names == bank.names);
  REQUIRE(back.dim == bank.dim);
  for (std::size_t id = 0; id < 6; ++id)
    for (std::size_t t = 0; t < 12; ++t) CHECK(back.vector(id)[t] == doctest::Approx(bank.vector(id)[t]).epsilon(1e-12));
  { std::ofstream(dir / "bad.txt") << "hello\n"; }
  CHECK_THROWS_AS(load_bank(dir / "bad.txt"), IngestionError);
  CHECK_THROWS_AS(load_bank(dir / "missing.txt"), IoError);
}

TEST_CASE("prototype ids follow attribute values") {
  CHECK(prototype_ids({true, false, true}) == std::vector<std::size_t>{0, 3, 4});
  const ConceptBank bank = build_prototype_bank({"a", "b"}, 8, 2);
  const Tensor p = prototypes_for({false, true}, bank);
  for (std::size_t t = 0; t < 8; ++t) {
    CHECK(p.data()[t] == static_cast<Scalar>(bank.antonym[0][t]));
    CHECK(p.data()[8 + t] == static_cast<Scalar>(bank.positive[1][t]));
  }
  CHECK_THROWS_AS(prototypes_for({true}, bank), DimensionError);
}

TEST_CASE("synthetic data is deterministic and draws attributes at their rates") {
  const auto spec = ConceptSpec::synthetic_default();
  const ImageGeometry geom;
  const auto a = gen_synthetic(2000, spec, geom, 7);
  const auto b = gen_synthetic(2000, spec, geom, 7);
  std::vector<double> counts(spec.size(), 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].image.pixels == b[i].image.pixels);
    CHECK(a[i].attributes == b[i].attributes);
    for (std::size_t j = 0; j < spec.size(); ++j) counts[j] += a[i].attributes[j] ? 1 : 0;
  }
  for (std::size_t j = 0; j < spec.size(); ++j) {
    const double p = spec.probabilities[j];
    const double sd = std::sqrt(2000 * p * (1 - p));
    CHECK(std::abs(counts[j] - 2000 * p) < 5 * sd);
  }
  CHECK(gen_synthetic(3, spec, geom, 8)[0].image.pixels != a[0].image.pixels);
  CHECK_THROWS_AS(gen_synthetic(0, spec, geom, 1), ConfigError);
}

TEST_CASE("synthetic layouts draw the element for every present concept") {
  const auto spec = ConceptSpec::synthetic_default();
  const ImageGeometry geom;
  for (std::size_t i = 0; i < 200; ++i) {
    const auto L = synthetic_layout(i, spec, geom, 3);
    CHECK((pixel_class(L, geom, 0, 0) == PixelClass::kFrame) == L.frame);
    const auto cy = static_cast<std::size_t>(std::lround(L.center_y));
    const auto cx = static_cast<std::size_t>(std::lround(L.center_x));
    CHECK((pixel_class(L, geom, cy, cx) == PixelClass::kCircle) == L.circle);
    CHECK((L.background > 0.5) == L.bright);
    const auto rec = render_synthetic(i, spec, geom, 3);
    CHECK(rec.attributes == L.attributes);
  }
  ConceptSpec bad = spec;
  bad.names[0] = "purple";
  CHECK_THROWS_AS(gen_synthetic(1, bad, geom, 1), ConfigError);
}

TEST_CASE("PNM images round trip to 8 bits") {
  TempDir dir;
  Image rgb{2, 3, 3, {}};
  for (std::size_t i = 0; i < 18; ++i) rgb.pixels.push_back(static_cast<float>(i) / 17.0F);
  write_pnm(dir / "a.ppm", rgb);
  const Image back = read_pnm(dir / "a.ppm");
  CHECK(back.channels == 3);
  for (std::size_t i = 0; i < 18; ++i) CHECK(std::abs(back.pixels[i] - rgb.pixels[i]) <= 0.5F / 255.0F + 1e-6F);
  Image gray{2, 2, 1, {0.0F, 1.0F, 0.5F, 2.0F}};
  write_pnm(dir / "g.pgm", gray);
  const Image g = read_pnm(dir / "g.pgm");
  CHECK(g.channels == 1);
  CHECK(g.pixels[3] == 1.0F);
  CHECK(testing_util::read_file(dir / "g.pgm").substr(0, 2) == "P5");
  { std::ofstream(dir / "junk.ppm") << "P3\n1 1\n255\n0 0 0\n"; }
  CHECK_THROWS_AS(read_pnm(dir / "junk.ppm"), IngestionError);
}

TEST_CASE("center crop keeps the middle and resize preserves constants") {
  Image wide{2, 6, 1, {}};
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 6; ++x) wide.pixels.push_back(x >= 2 && x < 4 ? 1.0F : 0.0F);
  const Image sq = center_crop_resize(wide, 2, 2);
  for (float v : sq.pixels) CHECK(v == doctest::Approx(1.0F));
  Image flat{3, 5, 3, std::vector<float>(45, 0.25F)};
  for (float v : resize_bilinear(flat, 7, 4).pixels) CHECK(v == doctest::Approx(0.25F));
  const Image g = convert_channels(Image{1, 1, 3, {1.0F, 1.0F, 1.0F}}, 1);
  CHECK(g.pixels[0] == doctest::Approx(1.0F));
}

TEST_CASE("folder loading accepts -1/1 and 0/1 values and skips unreadable images") {
  TempDir dir;
  const ImageGeometry geom{24, 24, 3};
  auto recs = gen_synthetic(3, ConceptSpec::synthetic_default(), geom, 2);
  for (const auto& r : recs) write_pnm(dir / (r.name + ".ppm"), r.image);
  {
    std::ofstream csv(dir / "attrs.csv");
    csv << "image,extra,centered-circle,bright-background\n";
    csv << recs[0].name << ".ppm,1,1,-1\n";
    csv << recs[1].name << ".ppm,0,-1,1\n";
    csv << "missing.ppm,1,1,1\n";
    csv << recs[2].name << ".ppm,0,0,0\n";
  }
  LoadStats stats;
  const auto loaded =
      load_folder(dir.path(), dir / "attrs.csv", {"bright-background", "centered-circle"}, geom, &stats);
  CHECK(stats.loaded == 3);
  CHECK(stats.skipped == 1);
  REQUIRE(loaded.size() == 3);
  CHECK(loaded[0].attributes == std::vector<bool>{false, true});
  CHECK(loaded[1].attributes == std::vector<bool>{true, false});
  CHECK(loaded[2].attributes == std::vector<bool>{false, false});
  CHECK(loaded[0].name == recs[0].name);
  CHECK_THROWS_AS(load_folder(dir.path(), dir / "attrs.csv", {"border-frame"}, geom), IngestionError);
  { std::ofstream(dir / "bad.csv") << "image,a\nx.ppm,2\n"; }
  CHECK_THROWS_AS(load_folder(dir.path(), dir / "bad.csv", {"a"}, geom), IngestionError);
}

TEST_CASE("saved folders load back unchanged") {
  TempDir dir;
  const auto spec = ConceptSpec::synthetic_default();
  const ImageGeometry geom{24, 24, 3};
  const auto recs = gen_synthetic(4, spec, geom, 5);
  save_folder(dir.path(), recs, spec.names);
  const auto back = load_folder(dir.path(), dir / "attributes.csv", spec.names, geom);
  REQUIRE(back.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(back[i].attributes == recs[i].attributes);
    for (std::size_t k = 0; k < recs[i].image.pixels.size(); ++k)
      CHECK(std::abs(back[i].image.pixels[k] - recs[i].image.pixels[k]) <= 0.5F / 255.0F + 1e-6F);
  }
}

TEST_CASE("batches stack patches in index order") {
  ModelConfig cfg;
  const auto recs = gen_synthetic(3, ConceptSpec::synthetic_default(), ImageGeometry::of(cfg), 1);
  const Tensor t = batch_patches(recs, {2, 0}, cfg);
  CHECK(t.shape() == Shape{2, cfg.patches(), cfg.patch_dim()});
  const auto p2 = patchify_values(recs[2].image.pixels, cfg);
  for (std::size_t i = 0; i < p2.size(); ++i) CHECK(t.data()[i] == p2[i]);
  ModelConfig other = cfg;
  other.image_h = other.image_w = 16;
  other.patch = 4;
  CHECK_THROWS_AS(batch_patches(recs, {0}, other), ConfigError);
}
