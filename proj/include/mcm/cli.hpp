#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "mcm/model.hpp"
#include "mcm/trainer.hpp"

MCM_BEGIN_NAMESPACE

// Where training images and prototypes come from.
struct DataConfig {
  std::string data_dir;  // empty: synthetic images
  std::string attributes_csv = "attributes.csv";
  std::vector<std::string> concept_names;  // empty: the synthetic defaults
  std::vector<double> probabilities;       // synthetic Bernoulli rates
  std::size_t dataset_size = 64;
  std::uint64_t data_gen_seed = 7;
  std::string bank;  // empty: seeded synthetic bank
  std::uint64_t bank_seed = 11;

  std::map<std::string, std::string> to_map() const;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;

  // Flat echo of every field, as accepted by config files.
  std::map<std::string, std::string> to_map() const;
  static RunConfig from_map(const std::map<std::string, std::string>& values);
  void validate() const;
};

// Flat key=value lines; '#' starts a comment. Unknown keys are rejected.
std::map<std::string, std::string> read_config_file(const std::filesystem::path& path);

// preset < config file < overrides.
RunConfig resolve_config(const std::string& preset, const std::filesystem::path& config_file,
                         const std::map<std::string, std::string>& overrides);

// Exit codes: 0 success, 1 unexpected failure, 2 usage, 3 configuration,
// 4 I/O or data, 5 numeric.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitConfig = 3;
inline constexpr int kExitData = 4;
inline constexpr int kExitNumeric = 5;

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

MCM_END_NAMESPACE
