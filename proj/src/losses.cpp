#include "mcm/losses.hpp"

#include <cmath>
#include <map>

#include "mcm/log.hpp"

MCM_BEGIN_NAMESPACE

void LossWeights::validate() const {
  if (!(alpha >= 0.0) || !(beta >= 0.0)) throw ConfigError("loss coefficients alpha and beta must be >= 0");
  if (!(S > 0.0)) throw ConfigError("weight scale S must be > 0");
  if (!(eps_freq > 0.0)) throw ConfigError("eps_freq must be > 0");
}

std::size_t SingleHotMask::position() const {
  std::size_t pos = u.size();
  for (std::size_t j = 0; j < u.size(); ++j) {
    if (u[j] == 1) {
      if (pos != u.size()) throw ContractError("single-hot mask has more than one active entry");
      pos = j;
    } else if (u[j] != 0) {
      throw ContractError("single-hot mask entries must be 0 or 1");
    }
  }
  if (pos == u.size()) throw ContractError("single-hot mask has no active entry");
  return pos;
}

SingleHotMask sample_single_hot(std::size_t m, Rng& rng) {
  if (m == 0) throw ContractError("single-hot mask needs at least one concept");
  SingleHotMask mask;
  mask.u.assign(m, 0);
  mask.u[uniform_index(rng, m)] = 1;
  return mask;
}

BankView project_bank(const Model& model, const ConceptBank& bank) {
  if (bank.concepts() != model.config().concepts) {
    throw ConfigError("bank has " + std::to_string(bank.concepts()) + " concepts, model expects " +
                      std::to_string(model.config().concepts));
  }
  return {model.project_concepts(bank_matrix(bank))};
}

void attach_bank(Model& model, const ConceptBank& bank) {
  const auto& cfg = model.config();
  if (bank.concepts() != cfg.concepts) {
    throw ConfigError("bank has " + std::to_string(bank.concepts()) + " concepts, model expects " +
                      std::to_string(cfg.concepts));
  }
  if (bank.dim != cfg.concept_dim) {
    throw ConfigError("bank width " + std::to_string(bank.dim) + " does not match concept_dim " +
                      std::to_string(cfg.concept_dim));
  }
  if (cfg.variant == Variant::kFixedConcepts) {
    std::vector<Scalar> data;
    for (const auto& v : bank.positive) data.insert(data.end(), v.begin(), v.end());
    model.set_concept_anchors(Tensor::from({bank.concepts(), bank.dim}, std::move(data)));
  }
}

Tensor masked_recon_loss(const Tensor& recon, const Tensor& target, const IndexList& masked) {
  if (recon.shape() != target.shape()) {
    throw DimensionError("recon loss: shapes " + shape_str(recon.shape()) + " and " + shape_str(target.shape()) +
                         " differ");
  }
  if (recon.dim() != 3) throw DimensionError("recon loss expects [b, N, D], got " + shape_str(recon.shape()));
  Tensor diff = sub(recon, target);
  if (!masked.empty()) diff = gather_rows(diff, masked);
  // Every sample has the same number of rows, so one global mean equals the
  // per-sample mean averaged over the batch.
  return mean(square(diff));
}

std::vector<double> concept_weights(const std::vector<std::size_t>& ids, const LossWeights& lw) {
  std::map<std::size_t, std::size_t> freq;
  for (std::size_t id : ids) ++freq[id];
  std::vector<double> w(ids.size());
  double total = 0.0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    w[i] = lw.S / (static_cast<double>(freq[ids[i]]) + lw.eps_freq);
    total += w[i];
  }
  if (lw.uniform_concept_weights && !ids.empty()) {
    const double avg = total / static_cast<double>(ids.size());
    for (auto& x : w) x = avg;
  }
  return w;
}

Tensor weighted_concept_loss(const Tensor& concepts, const Tensor& prototypes,
                             const std::vector<std::size_t>& ids, const LossWeights& lw) {
  if (concepts.dim() != 3 || concepts.shape() != prototypes.shape()) {
    throw DimensionError("concept loss: shapes " + shape_str(concepts.shape()) + " and " +
                         shape_str(prototypes.shape()) + " differ");
  }
  const std::size_t b = concepts.size(0);
  const std::size_t m = concepts.size(1);
  if (ids.size() != b * m) throw DimensionError("concept loss: need one bank id per concept slot");
  const auto w = concept_weights(ids, lw);
  std::vector<Scalar> wdata(w.begin(), w.end());
  Tensor weights = Tensor::from({b, m}, std::move(wdata));
  Tensor per_row = mean_lastdim(square(sub(concepts, prototypes)));
  return scale(sum(mul(per_row, weights)), static_cast<Scalar>(1.0 / static_cast<double>(b)));
}

Tensor weighted_concept_loss(const Tensor& concepts, const BankView& bank, const std::vector<std::size_t>& ids,
                             const LossWeights& lw) {
  if (concepts.dim() != 3) throw DimensionError("concept loss expects [b, M, E]");
  const std::size_t count = bank.vectors.size(0);
  for (std::size_t id : ids) {
    if (id >= count) throw ContractError("prototype id " + std::to_string(id) + " is not in the bank");
  }
  if (ids.size() != concepts.size(0) * concepts.size(1)) {
    throw DimensionError("concept loss: need one bank id per concept slot");
  }
  Tensor protos = reshape(gather_rows(bank.vectors, ids), concepts.shape());
  return weighted_concept_loss(concepts, protos, ids, lw);
}

std::vector<std::size_t> nearest_bank_ids(const Tensor& rows, const BankView& bank) {
  if (rows.dim() != 2 || rows.size(1) != bank.vectors.size(1)) {
    throw DimensionError("nearest_bank_ids: rows " + shape_str(rows.shape()) + " vs bank " +
                         shape_str(bank.vectors.shape()));
  }
  const std::size_t b = rows.size(0);
  const std::size_t e = rows.size(1);
  const std::size_t count = bank.vectors.size(0);
  auto r = rows.data();
  auto v = bank.vectors.data();
  std::vector<double> vnorm(count);
  for (std::size_t k = 0; k < count; ++k) {
    double s = 0.0;
    for (std::size_t t = 0; t < e; ++t) s += double(v[k * e + t]) * double(v[k * e + t]);
    vnorm[k] = std::sqrt(s);
  }
  std::vector<std::size_t> out(b, 0);
  for (std::size_t i = 0; i < b; ++i) {
    double rn = 0.0;
    for (std::size_t t = 0; t < e; ++t) rn += double(r[i * e + t]) * double(r[i * e + t]);
    rn = std::sqrt(rn);
    if (rn == 0.0) {
      log_warn("zero-norm concept row; using the first bank vector");
      continue;
    }
    double best = -2.0;
    for (std::size_t k = 0; k < count; ++k) {
      double dot = 0.0;
      for (std::size_t t = 0; t < e; ++t) dot += double(r[i * e + t]) * double(v[k * e + t]);
      const double c = dot / (rn * vnorm[k]);
      if (c > best) {
        best = c;
        out[i] = k;
      }
    }
  }
  return out;
}

Tensor antonym_swap(const Tensor& concepts, const SingleHotMask& u, const BankView& bank) {
  if (concepts.dim() != 3) throw DimensionError("antonym_swap expects [b, M, E]");
  if (u.u.size() != concepts.size(1)) throw DimensionError("single-hot mask length differs from concept count");
  const std::size_t j = u.position();
  std::vector<std::size_t> ids;
  {
    NoGradGuard guard;
    ids = nearest_bank_ids(select_row(concepts, j), bank);
  }
  for (auto& id : ids) id = ConceptBank::antonym_id(id);
  return replace_row(concepts, j, gather_rows(bank.vectors, ids));
}

DisentangleTerms disentangle_loss(const Model& model, const ForwardOutput& fwd, const SingleHotMask& u,
                                  const BankView& bank, const ReencodeFn& reencode) {
  DisentangleTerms t;
  const std::size_t j = u.position();
  t.swapped = antonym_swap(fwd.concepts, u, bank);
  Tensor row = select_row(t.swapped, j);
  std::vector<Tensor> snapshots;
  snapshots.reserve(fwd.snapshots.size());
  for (const auto& s : fwd.snapshots) snapshots.push_back(replace_row(s, j, row));
  t.decoded = model.decode(model.assemble_decoder_input(fwd.visible, fwd.plan), snapshots, t.swapped);
  t.reencoded = reencode ? reencode(t.decoded) : model.encode(t.decoded, model.full_plan()).concepts;
  t.loss = mean(square(sub(t.swapped, t.reencoded)));
  return t;
}

Tensor total_loss(const LossParts& parts, const LossWeights& lw, LossValues* values) {
  if (!parts.recon.defined()) throw ContractError("total loss needs the reconstruction term");
  auto check = [](const Tensor& t, const char* name) -> double {
    if (!t.defined()) return 0.0;
    const double v = static_cast<double>(t.item());
    if (!std::isfinite(v)) throw NumericError(std::string("loss component ") + name + " is not finite");
    return v;
  };
  LossValues v;
  v.recon = check(parts.recon, "l_re");
  v.disentangle = check(parts.disentangle, "l_dis");
  v.concept_term = check(parts.concept_term, "l_concept");
  Tensor total = parts.recon;
  if (parts.disentangle.defined() && lw.alpha != 0.0) {
    total = add(total, scale(parts.disentangle, static_cast<Scalar>(lw.alpha)));
  }
  if (parts.concept_term.defined() && lw.beta != 0.0) {
    total = add(total, scale(parts.concept_term, static_cast<Scalar>(lw.beta)));
  }
  v.total = static_cast<double>(total.item());
  if (!std::isfinite(v.total)) throw NumericError("total loss is not finite");
  if (values) *values = v;
  return total;
}

MCM_END_NAMESPACE
