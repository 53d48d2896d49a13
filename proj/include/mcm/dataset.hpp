#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mcm/image_io.hpp"
#include "mcm/model.hpp"

MCM_BEGIN_NAMESPACE

struct DatasetRecord {
  std::string name;
  Image image;
  std::vector<bool> attributes;
};

struct ImageGeometry {
  std::size_t height = 24;
  std::size_t width = 24;
  std::size_t channels = 3;

  static ImageGeometry of(const ModelConfig& cfg) { return {cfg.image_h, cfg.image_w, cfg.channels}; }
};

// Concept names with a per-concept Bernoulli rate for the synthetic generator.
// Each concept's antonym is "Not <name>".
struct ConceptSpec {
  std::vector<std::string> names;
  std::vector<double> probabilities;

  static ConceptSpec synthetic_default();
  std::size_t size() const { return names.size(); }
  static std::string antonym(const std::string& name) { return "Not " + name; }
  void validate() const;
};

// Names the synthetic renderer understands.
inline constexpr const char* kBrightBackground = "bright-background";
inline constexpr const char* kCenteredCircle = "centered-circle";
inline constexpr const char* kHorizontalStripes = "horizontal-stripes";
inline constexpr const char* kBorderFrame = "border-frame";

enum class PixelClass { kBackground, kCircle, kStripe, kFrame };

// Per-record drawing parameters; exposed so callers can recover which pixels
// belong to which element.
struct SyntheticLayout {
  std::vector<bool> attributes;
  bool bright = false;
  bool circle = false;
  bool stripes = false;
  bool frame = false;
  double background = 0.0;
  double center_y = 0.0;
  double center_x = 0.0;
  double radius = 0.0;
};

SyntheticLayout synthetic_layout(std::size_t index, const ConceptSpec& spec, const ImageGeometry& geom,
                                 std::uint64_t seed);
PixelClass pixel_class(const SyntheticLayout& layout, const ImageGeometry& geom, std::size_t y,
                       std::size_t x);

DatasetRecord render_synthetic(std::size_t index, const ConceptSpec& spec, const ImageGeometry& geom,
                               std::uint64_t seed);
std::vector<DatasetRecord> gen_synthetic(std::size_t n, const ConceptSpec& spec, const ImageGeometry& geom,
                                         std::uint64_t seed);

// Writes <name>.ppm per record plus an attributes CSV with 0/1 values.
void save_folder(const std::filesystem::path& dir, const std::vector<DatasetRecord>& records,
                 const std::vector<std::string>& concept_names,
                 const std::string& csv_name = "attributes.csv");

struct LoadStats {
  std::size_t loaded = 0;
  std::size_t skipped = 0;
};

// CSV header `image,<attr>,...`; values in {-1,1} or {0,1}. Images are
// center-cropped and resized to `geom`. Unreadable images are skipped.
std::vector<DatasetRecord> load_folder(const std::filesystem::path& image_dir,
                                       const std::filesystem::path& attributes_csv,
                                       const std::vector<std::string>& selected, const ImageGeometry& geom,
                                       LoadStats* stats = nullptr);

// [b, N, P*P*C] patch tensor for records[indices].
Tensor batch_patches(const std::vector<DatasetRecord>& records, const IndexList& indices,
                     const ModelConfig& cfg);

MCM_END_NAMESPACE
