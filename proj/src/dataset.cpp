#include "mcm/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "mcm/log.hpp"
#include "mcm/random.hpp"

MCM_BEGIN_NAMESPACE

namespace {

struct Rgb {
  double r, g, b;
};

constexpr Rgb kCircleColor{0.9, 0.15, 0.1};
constexpr Rgb kStripeColor{0.1, 0.75, 0.2};
constexpr Rgb kFrameColor{0.1, 0.2, 0.9};
constexpr std::size_t kFrameWidth = 2;
constexpr double kNoiseStd = 0.02;

bool known_concept(const std::string& name) {
  return name == kBrightBackground || name == kCenteredCircle || name == kHorizontalStripes || name == kBorderFrame;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  for (auto& s : out) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t");
    s = b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  }
  return out;
}

}  // namespace

ConceptSpec ConceptSpec::synthetic_default() {
  return {{kBrightBackground, kCenteredCircle, kHorizontalStripes, kBorderFrame}, {0.5, 0.5, 0.2, 0.05}};
}

void ConceptSpec::validate() const {
  if (names.empty()) throw ConfigError("concept list is empty");
  if (probabilities.size() != names.size()) {
    throw ConfigError("concept spec has " + std::to_string(names.size()) + " names but " +
                      std::to_string(probabilities.size()) + " probabilities");
  }
  std::set<std::string> seen;
  for (const auto& n : names) {
    if (!seen.insert(n).second) throw ConfigError("duplicate concept name '" + n + "'");
  }
  for (double p : probabilities) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("concept probability must lie in [0, 1]");
  }
}

SyntheticLayout synthetic_layout(std::size_t index, const ConceptSpec& spec, const ImageGeometry& geom,
                                 std::uint64_t seed) {
  spec.validate();
  if (geom.channels != 3) throw ConfigError("synthetic images are RGB; channels must be 3");
  if (geom.height < 16 || geom.width < 16) throw ConfigError("synthetic images need at least 16x16 pixels");
  for (const auto& n : spec.names) {
    if (!known_concept(n)) {
      throw ConfigError("no synthetic rendering rule for concept '" + n +
                        "' (known: bright-background, centered-circle, horizontal-stripes, border-frame)");
    }
  }
  Rng rng(mix_seed(seed, index));
  SyntheticLayout L;
  L.attributes.resize(spec.size());
  for (std::size_t j = 0; j < spec.size(); ++j) {
    L.attributes[j] = uniform01(rng) < spec.probabilities[j];
    const auto& n = spec.names[j];
    if (n == kBrightBackground) L.bright = L.attributes[j];
    if (n == kCenteredCircle) L.circle = L.attributes[j];
    if (n == kHorizontalStripes) L.stripes = L.attributes[j];
    if (n == kBorderFrame) L.frame = L.attributes[j];
  }
  L.background = L.bright ? 0.75 + 0.15 * uniform01(rng) : 0.1 + 0.15 * uniform01(rng);
  const double scale = static_cast<double>(std::min(geom.height, geom.width)) / 24.0;
  const auto jitter = [&] { return static_cast<double>(uniform_index(rng, 3)) - 1.0; };
  L.center_y = static_cast<double>(geom.height) / 2.0 - 0.5 + jitter();
  L.center_x = static_cast<double>(geom.width) / 2.0 - 0.5 + jitter();
  L.radius = (5.0 + 2.0 * uniform01(rng)) * scale;
  return L;
}

PixelClass pixel_class(const SyntheticLayout& L, const ImageGeometry& geom, std::size_t y, std::size_t x) {
  if (L.frame && (y < kFrameWidth || x < kFrameWidth || y + kFrameWidth >= geom.height ||
                  x + kFrameWidth >= geom.width)) {
    return PixelClass::kFrame;
  }
  const double dy = static_cast<double>(y) - L.center_y;
  const double dx = static_cast<double>(x) - L.center_x;
  if (L.circle && dy * dy + dx * dx <= L.radius * L.radius) return PixelClass::kCircle;
  if (L.stripes && y % 4 < 2) return PixelClass::kStripe;
  return PixelClass::kBackground;
}

DatasetRecord render_synthetic(std::size_t index, const ConceptSpec& spec, const ImageGeometry& geom,
                               std::uint64_t seed) {
  const SyntheticLayout L = synthetic_layout(index, spec, geom, seed);
  // Noise comes from its own stream so layout draws stay stable.
  Rng noise(mix_seed(mix_seed(seed, index), 0x6e6f697365ULL));
  DatasetRecord rec;
  char name[32];
  std::snprintf(name, sizeof(name), "img_%06zu", index);
  rec.name = name;
  rec.attributes = L.attributes;
  rec.image.height = geom.height;
  rec.image.width = geom.width;
  rec.image.channels = 3;
  rec.image.pixels.resize(geom.height * geom.width * 3);
  for (std::size_t y = 0; y < geom.height; ++y) {
    for (std::size_t x = 0; x < geom.width; ++x) {
      Rgb c{L.background, L.background, L.background};
      switch (pixel_class(L, geom, y, x)) {
        case PixelClass::kFrame: c = kFrameColor; break;
        case PixelClass::kCircle: c = kCircleColor; break;
        case PixelClass::kStripe: c = kStripeColor; break;
        case PixelClass::kBackground: break;
      }
      const double rgb[3] = {c.r, c.g, c.b};
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double v = rgb[ch] + kNoiseStd * standard_normal(noise);
        rec.image.at(y, x, ch) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return rec;
}

std::vector<DatasetRecord> gen_synthetic(std::size_t n, const ConceptSpec& spec, const ImageGeometry& geom,
                                         std::uint64_t seed) {
  if (n == 0) throw ConfigError("synthetic dataset size must be at least 1");
  std::vector<DatasetRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(render_synthetic(i, spec, geom, seed));
  return out;
}

void save_folder(const std::filesystem::path& dir, const std::vector<DatasetRecord>& records,
                 const std::vector<std::string>& concept_names, const std::string& csv_name) {
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir / csv_name, std::ios::binary);
  if (!csv) throw IoError("cannot write " + (dir / csv_name).string());
  csv << "image";
  for (const auto& n : concept_names) csv << ',' << n;
  csv << '\n';
  for (const auto& rec : records) {
    if (rec.attributes.size() != concept_names.size()) {
      throw DimensionError("record " + rec.name + " has the wrong attribute count");
    }
    const std::string file = rec.name + ".ppm";
    write_pnm(dir / file, rec.image);
    csv << file;
    for (bool a : rec.attributes) csv << ',' << (a ? 1 : 0);
    csv << '\n';
  }
  if (!csv) throw IoError("failed writing " + (dir / csv_name).string());
}

std::vector<DatasetRecord> load_folder(const std::filesystem::path& image_dir,
                                       const std::filesystem::path& attributes_csv,
                                       const std::vector<std::string>& selected, const ImageGeometry& geom,
                                       LoadStats* stats) {
  if (selected.empty()) throw IngestionError("no concepts selected for loading");
  std::ifstream in(attributes_csv, std::ios::binary);
  if (!in) throw IoError("cannot open attributes file " + attributes_csv.string());
  std::string line;
  if (!std::getline(in, line)) throw IngestionError(attributes_csv.string() + " is empty");
  const auto header = split_csv(line);
  if (header.empty() || header[0] != "image") {
    throw IngestionError(attributes_csv.string() + ": header must start with 'image'");
  }
  std::vector<std::size_t> columns;
  for (const auto& name : selected) {
    auto it = std::find(header.begin() + 1, header.end(), name);
    if (it == header.end()) throw IngestionError("attributes file lacks column '" + name + "'");
    columns.push_back(static_cast<std::size_t>(it - header.begin()));
  }
  std::vector<DatasetRecord> out;
  LoadStats local;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv(line);
    if (cells.size() != header.size()) {
      throw IngestionError(attributes_csv.string() + ":" + std::to_string(line_no) + ": expected " +
                           std::to_string(header.size()) + " fields");
    }
    DatasetRecord rec;
    rec.name = std::filesystem::path(cells[0]).stem().string();
    for (std::size_t col : columns) {
      const auto& v = cells[col];
      if (v == "1") rec.attributes.push_back(true);
      else if (v == "0" || v == "-1") rec.attributes.push_back(false);
      else {
        throw IngestionError(attributes_csv.string() + ":" + std::to_string(line_no) + ": value '" + v +
                             "' for '" + header[col] + "' is not one of -1, 0, 1");
      }
    }
    try {
      Image img = read_pnm(image_dir / cells[0]);
      img = convert_channels(img, geom.channels);
      rec.image = center_crop_resize(img, geom.height, geom.width);
    } catch (const Error& e) {
      log_warn(std::string("skipping image: ") + e.what());
      ++local.skipped;
      continue;
    }
    out.push_back(std::move(rec));
    ++local.loaded;
  }
  if (stats) *stats = local;
  return out;
}

Tensor batch_patches(const std::vector<DatasetRecord>& records, const IndexList& indices,
                     const ModelConfig& cfg) {
  if (indices.empty()) throw ContractError("empty batch");
  const std::size_t n = cfg.patches();
  const std::size_t d = cfg.patch_dim();
  std::vector<Scalar> data;
  data.reserve(indices.size() * n * d);
  for (std::size_t i : indices) {
    const auto& img = records.at(i).image;
    if (img.height != cfg.image_h || img.width != cfg.image_w || img.channels != cfg.channels) {
      throw ConfigError("record " + records[i].name + " is " + std::to_string(img.height) + "x" +
                        std::to_string(img.width) + "x" + std::to_string(img.channels) + " but the model expects " +
                        std::to_string(cfg.image_h) + "x" + std::to_string(cfg.image_w) + "x" +
                        std::to_string(cfg.channels));
    }
    auto p = patchify_values(img.pixels, cfg);
    data.insert(data.end(), p.begin(), p.end());
  }
  return Tensor::from({indices.size(), n, d}, std::move(data));
}

MCM_END_NAMESPACE
