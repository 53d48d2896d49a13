#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mcm/concept_bank.hpp"
#include "mcm/model.hpp"
#include "mcm/random.hpp"

MCM_BEGIN_NAMESPACE

struct LossWeights {
  double alpha = 1.0;  // disentanglement
  double beta = 1.0;   // concept
  double S = 1.0;
  double eps_freq = 1e-6;
  // Replaces the frequency weights by their batch mean, keeping the overall
  // scale of the concept term while removing the rebalancing.
  bool uniform_concept_weights = false;

  void validate() const;
};

struct SingleHotMask {
  std::vector<std::uint8_t> u;

  std::size_t position() const;
};

SingleHotMask sample_single_hot(std::size_t m, Rng& rng);

// Bank vectors mapped into model width, [2M, E], in bank id order.
struct BankView {
  Tensor vectors;
  std::size_t concepts() const { return vectors.size(0) / 2; }
};

BankView project_bank(const Model& model, const ConceptBank& bank);

// Checks bank/model compatibility and installs the positive prototypes as
// anchors for the fixed_concepts variant.
void attach_bank(Model& model, const ConceptBank& bank);

// Mean over masked positions per sample, then over the batch. Falls back to
// all positions when `masked` is empty.
Tensor masked_recon_loss(const Tensor& recon, const Tensor& target, const IndexList& masked);

// Per-slot weights S / (count(id) + eps) with counts taken over the batch.
std::vector<double> concept_weights(const std::vector<std::size_t>& ids, const LossWeights& lw);

// (1/b) * sum_ij w_ij * mean_E (C_L - prototype)^2. `ids` holds b*M bank ids.
Tensor weighted_concept_loss(const Tensor& concepts, const BankView& bank, const std::vector<std::size_t>& ids,
                             const LossWeights& lw);
Tensor weighted_concept_loss(const Tensor& concepts, const Tensor& prototypes,
                             const std::vector<std::size_t>& ids, const LossWeights& lw);

// Bank id nearest (by cosine) to every row of [b, E] values.
std::vector<std::size_t> nearest_bank_ids(const Tensor& rows, const BankView& bank);

// Row j = position of U becomes the antonym of its nearest bank vector.
Tensor antonym_swap(const Tensor& concepts, const SingleHotMask& u, const BankView& bank);

struct DisentangleTerms {
  Tensor loss;
  Tensor swapped;     // c-hat
  Tensor decoded;     // x-tilde
  Tensor reencoded;   // c-tilde
};

using ReencodeFn = std::function<Tensor(const Tensor& decoded)>;

// Swaps one concept of `fwd`, decodes with the swap applied to C_L and every
// snapshot, re-encodes the decoded patches with nothing masked and compares.
// `reencode` replaces the encoder pass when set.
DisentangleTerms disentangle_loss(const Model& model, const ForwardOutput& fwd, const SingleHotMask& u,
                                  const BankView& bank, const ReencodeFn& reencode = {});

struct LossParts {
  Tensor recon;
  Tensor disentangle;  // may be undefined when alpha = 0
  Tensor concept_term;  // may be undefined when beta = 0
};

struct LossValues {
  double recon = 0.0;
  double disentangle = 0.0;
  double concept_term = 0.0;
  double total = 0.0;
};

// recon + alpha * disentangle + beta * concept. Throws NumericError naming any
// non-finite component.
Tensor total_loss(const LossParts& parts, const LossWeights& lw, LossValues* values = nullptr);

MCM_END_NAMESPACE
