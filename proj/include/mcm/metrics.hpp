#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mcm/dataset.hpp"
#include "mcm/losses.hpp"

MCM_BEGIN_NAMESPACE

struct ConfusionCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t tn = 0;
  std::size_t fn = 0;
};

// Empty denominators: precision 1 with no predicted positives, recall 1 with
// no actual positives, F1 0 when precision + recall is 0.
struct BinaryMetrics {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

BinaryMetrics binary_metrics(const ConfusionCounts& c);

inline constexpr double kPsnrCeiling = 99.0;

// 10 log10(1 / mse) for unit-range pixels, capped at kPsnrCeiling.
double psnr_from_mse(double mse);

struct MetricsReport {
  // Macro averages over concept positions.
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::vector<BinaryMetrics> per_concept;
  std::vector<ConfusionCounts> confusion;
  double masked_mse = 0.0;
  double masked_psnr = kPsnrCeiling;
  double l_re = 0.0;
  double l_dis = 0.0;
  double l_concept = 0.0;
  double wall_seconds = 0.0;
  std::size_t samples = 0;
};

// predictions/labels are [n][M].
MetricsReport classification_metrics(const std::vector<std::vector<bool>>& predictions,
                                     const std::vector<std::vector<bool>>& labels);

// Position j is true iff cos(row, positive_j) >= cos(row, antonym_j).
std::vector<std::vector<bool>> predict_concepts(const Tensor& concepts, const BankView& bank);

struct EvalOptions {
  double test_ratio = 0.25;
  std::uint64_t seed = 0;
  MaskShape shape = MaskShape::kRandom;
  std::size_t batch = 64;
  LossWeights loss;
};

// Concept metrics, masked-region MSE/PSNR of the clamped reconstruction, and
// loss component averages. Batch k uses mask seed mix_seed(seed, k).
MetricsReport evaluate(const Model& model, const std::vector<DatasetRecord>& data, const ConceptBank& bank,
                       const EvalOptions& options);

std::string format_report(const MetricsReport& report, const std::vector<std::string>& concept_names);
std::string report_csv_header();
std::string report_csv_row(const MetricsReport& report);

MCM_END_NAMESPACE
