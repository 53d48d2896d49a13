#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "mcm/dataset.hpp"
#include "mcm/losses.hpp"
#include "mcm/metrics.hpp"
#include "mcm/model.hpp"
#include "mcm/nn.hpp"

MCM_BEGIN_NAMESPACE

struct TrainConfig {
  std::string preset = "tiny";
  std::size_t epochs = 250;
  std::size_t max_steps = 0;  // 0: no cap beyond epochs
  std::size_t batch = 32;
  double mask_ratio = 0.25;
  MaskShape mask_shape = MaskShape::kRandom;
  LossWeights loss;
  double lr = 1e-3;
  double weight_decay = 0.01;
  std::uint64_t init_seed = 1;
  std::uint64_t data_seed = 2;
  std::uint64_t mask_seed = 3;
  std::size_t eval_interval = 0;  // steps between progress evaluations, 0 = off

  void validate() const;
  AdamWConfig optimizer() const;
  std::map<std::string, std::string> to_map() const;
  static TrainConfig from_map(const std::map<std::string, std::string>& values);
};

struct Preset {
  ModelConfig model;
  TrainConfig train;
  std::size_t dataset_size = 64;
};

// "tiny" (desk-scale defaults) or "paper-small" (48x48 images, patch 6,
// width 512, 4 heads, 2 encoder layers, MLP 128, batch 1024, 500 epochs).
Preset make_preset(const std::string& name);

struct StepLog {
  std::int64_t step = 0;  // 1-based index of the completed step
  double l_re = 0.0;
  double l_dis = 0.0;
  double l_concept = 0.0;
  double total = 0.0;
  double wall_ms = 0.0;
};

void write_log_header(std::ostream& out);
void write_log_line(std::ostream& out, const StepLog& log);

// Every random choice of step t derives from (seeds, t): the epoch shuffle
// from data_seed, the mask plan and the swap position from mask_seed. A run
// restored at step k with its optimizer state therefore continues exactly.
class Trainer {
 public:
  Trainer(Model& model, const std::vector<DatasetRecord>& data, const ConceptBank& bank, TrainConfig config);

  StepLog step();
  // Runs until `total_steps()` or `limit` completed steps, whichever is first.
  std::vector<StepLog> run(std::int64_t limit = -1, const std::function<void(const StepLog&)>& on_step = {});

  std::int64_t steps_done() const { return steps_; }
  std::int64_t total_steps() const;
  std::size_t steps_per_epoch() const;
  const TrainConfig& config() const { return config_; }
  AdamW& optimizer() { return optimizer_; }
  const AdamW& optimizer() const { return optimizer_; }
  void set_steps_done(std::int64_t steps);

  // Batch indices and mask plan used by step `t` (0-based).
  IndexList batch_indices(std::int64_t t);
  MaskPlan mask_plan(std::int64_t t) const;
  SingleHotMask swap_mask(std::int64_t t) const;

 private:
  Model& model_;
  const std::vector<DatasetRecord>& data_;
  const ConceptBank& bank_;
  TrainConfig config_;
  AdamW optimizer_;
  std::int64_t steps_ = 0;
  std::int64_t perm_epoch_ = -1;
  IndexList perm_;
};

std::vector<StepLog> train(Model& model, const std::vector<DatasetRecord>& data, const ConceptBank& bank,
                           const TrainConfig& config, const std::function<void(const StepLog&)>& on_step = {});

struct SweepRow {
  double ratio = 0.0;
  MetricsReport report;
  double train_seconds = 0.0;
};

// One model per ratio from the same init seed. Evaluation uses `test_ratio`,
// or the training ratio when it is negative.
std::vector<SweepRow> mask_ratio_sweep(const ModelConfig& model_config, const TrainConfig& base,
                                       const std::vector<DatasetRecord>& train_data,
                                       const std::vector<DatasetRecord>& eval_data, const ConceptBank& bank,
                                       const std::vector<double>& ratios, double test_ratio = -1.0);

std::string sweep_csv_header();
void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows);

MCM_END_NAMESPACE
