#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mcm/model.hpp"
#include "mcm/nn.hpp"
#include "mcm/trainer.hpp"

MCM_BEGIN_NAMESPACE

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Little-endian binary layout:
//   "MCMCKPT\0", u32 version, str dtype,
//   u32 n, n x (str key, str value)       model config echo
//   u32 n, n x (str key, str value)       train config echo
//   i64 step, i64 optimizer steps, u8 has_optimizer
//   u32 n, n x (str name, u32 rank, rank x u64 extent, raw values
//               [, raw first moment, raw second moment])   sorted by name
//   u32 CRC-32 of every preceding byte
// where str is u32 length + bytes and raw is numel values of dtype.
struct CheckpointData {
  struct Blob {
    std::string name;
    Shape shape;
    std::vector<Scalar> values;
    std::vector<Scalar> first_moment;
    std::vector<Scalar> second_moment;
  };

  std::uint32_t version = kCheckpointVersion;
  std::string dtype = kDtypeName;
  ModelConfig model;
  std::map<std::string, std::string> train;
  std::int64_t step = 0;
  std::int64_t optimizer_steps = 0;
  bool has_optimizer = false;
  std::vector<Blob> params;
};

std::string serialize_checkpoint(const Model& model, const AdamW* optimizer, const TrainConfig& train,
                                 std::int64_t step);
CheckpointData parse_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Model& model, const AdamW* optimizer,
                     const TrainConfig& train, std::int64_t step);
CheckpointData load_checkpoint(const std::filesystem::path& path);

// Copies parameters into `model`. Throws ConfigError listing the differing
// fields when the configs disagree.
void restore_model(const CheckpointData& ckpt, Model& model);
void restore_optimizer(const CheckpointData& ckpt, const Model& model, AdamW& optimizer);

// Builds a model from the checkpoint's config and restores its parameters.
Model model_from_checkpoint(const CheckpointData& ckpt);

MCM_END_NAMESPACE
