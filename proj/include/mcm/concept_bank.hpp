#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mcm/tensor.hpp"

MCM_BEGIN_NAMESPACE

// Positive and antonym prototype per concept. Bank vector ids interleave the
// two: id 2j is concept j, id 2j+1 is "Not <concept j>", so the antonym map is
// id ^ 1 and is an involution by construction.
struct ConceptBank {
  std::vector<std::string> names;
  std::size_t dim = 0;
  std::vector<std::vector<double>> positive;
  std::vector<std::vector<double>> antonym;
  std::string source = "synthetic";

  std::size_t concepts() const { return names.size(); }
  std::size_t vector_count() const { return 2 * names.size(); }
  const std::vector<double>& vector(std::size_t id) const;
  std::string vector_name(std::size_t id) const;
  static std::size_t antonym_id(std::size_t id) { return id ^ 1U; }
  static std::size_t id_for(std::size_t concept_index, bool present) {
    return 2 * concept_index + (present ? 0 : 1);
  }
  // Throws ContractError for unknown names.
  std::size_t index_of(const std::string& name) const;
};

inline constexpr double kMaxBankCosine = 0.5;
inline constexpr int kMaxBankAttempts = 1000;

ConceptBank build_prototype_bank(const std::vector<std::string>& names, std::size_t dim,
                                 std::uint64_t seed);

// Unit norms, unique names, and every pairwise cosine below kMaxBankCosine.
// Throws ValidationError listing the offending pairs.
void validate_bank(const ConceptBank& bank);

void save_bank(const ConceptBank& bank, const std::filesystem::path& path);
ConceptBank load_bank(const std::filesystem::path& path);

// [2M, dim] in id order.
Tensor bank_matrix(const ConceptBank& bank);

// Bank ids for one attribute vector, row j = id_for(j, attributes[j]).
std::vector<std::size_t> prototype_ids(const std::vector<bool>& attributes);
// [M, dim], rows are exact bank members.
Tensor prototypes_for(const std::vector<bool>& attributes, const ConceptBank& bank);

MCM_END_NAMESPACE
