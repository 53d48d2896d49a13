#include <doctest.h>

#include <cmath>
#include <limits>
#include <map>
#include <random>

#include "mcm/concept_bank.hpp"
#include "mcm/losses.hpp"
#include "support/bridge.hpp"
#include "support/gradcheck.hpp"
#include "support/oracle.hpp"

using namespace mcm;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.image_h = 8;
  c.image_w = 8;
  c.channels = 1;
  c.patch = 4;
  c.width = 8;
  c.heads = 2;
  c.enc_layers = 2;
  c.enc_ffn = 6;
  c.dec_ffn = 6;
  c.concepts = 3;
  c.concept_dim = 8;
  return c;
}

BankView random_bank(std::mt19937_64& gen, std::size_t m, std::size_t e) {
  return {bridge::random_tensor(gen, {2 * m, e})};
}

}  // namespace

TEST_CASE("loss weights validate their ranges") {
  LossWeights lw;
  CHECK_NOTHROW(lw.validate());
  lw.S = 0;
  CHECK_THROWS_AS(lw.validate(), ConfigError);
  lw = {};
  lw.alpha = -1;
  CHECK_THROWS_AS(lw.validate(), ConfigError);
}

TEST_CASE("masked reconstruction loss matches the per-sample oracle") {
  std::mt19937_64 gen(1);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t b = 1 + gen() % 3, n = 2 + gen() % 6, d = 1 + gen() % 5;
    const auto plan = make_mask_plan(n, static_cast<double>(gen() % 10) / 10.0, gen());
    const Tensor r = bridge::random_tensor(gen, {b, n, d});
    const Tensor t = bridge::random_tensor(gen, {b, n, d});
    const double ref = oracle::masked_recon_loss(bridge::values(r), bridge::values(t), b, n, d, plan.masked);
    CHECK(masked_recon_loss(r, t, plan.masked).item() == doctest::Approx(ref).epsilon(1e-13));
  }
  CHECK_THROWS_AS(masked_recon_loss(Tensor::zeros({1, 2, 3}), Tensor::zeros({1, 2, 2}), {}), DimensionError);
}

TEST_CASE("masked loss ignores visible positions") {
  Tensor r = Tensor::from({1, 3, 1}, {5, 0, 0});
  Tensor t = Tensor::zeros({1, 3, 1});
  CHECK(masked_recon_loss(r, t, {1, 2}).item() == 0.0);
  CHECK(masked_recon_loss(r, t, {}).item() == doctest::Approx(25.0 / 3.0));
}

TEST_CASE("concept weights are S over the batch frequency") {
  LossWeights lw;
  lw.S = 2.0;
  lw.eps_freq = 0.5;
  const std::vector<std::size_t> ids{0, 0, 0, 3, 5, 5};
  const auto w = concept_weights(ids, lw);
  const std::vector<double> expect{2 / 3.5, 2 / 3.5, 2 / 3.5, 2 / 1.5, 2 / 2.5, 2 / 2.5};
  for (std::size_t i = 0; i < ids.size(); ++i) CHECK(w[i] == doctest::Approx(expect[i]));

  lw.uniform_concept_weights = true;
  const auto u = concept_weights(ids, lw);
  double mean = 0;
  for (double x : expect) mean += x / 6.0;
  for (double x : u) CHECK(x == doctest::Approx(mean));
}

TEST_CASE("weighted concept loss matches the explicit sum") {
  std::mt19937_64 gen(4);
  LossWeights lw;
  lw.S = 3.0;
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t b = 1 + gen() % 4, m = 1 + gen() % 4, e = 1 + gen() % 6;
    const BankView bank = random_bank(gen, m, e);
    const Tensor c = bridge::random_tensor(gen, {b, m, e});
    std::vector<std::size_t> ids;
    for (std::size_t s = 0; s < b; ++s)
      for (std::size_t j = 0; j < m; ++j) ids.push_back(2 * j + gen() % 2);
    std::map<std::size_t, double> freq;
    for (auto id : ids) freq[id] += 1;
    const auto cv = bridge::values(c);
    const auto bv = bridge::values(bank.vectors);
    double ref = 0.0;
    for (std::size_t s = 0; s < b; ++s)
      for (std::size_t j = 0; j < m; ++j) {
        const std::size_t id = ids[s * m + j];
        double se = 0.0;
        for (std::size_t t = 0; t < e; ++t) {
          const double diff = cv[(s * m + j) * e + t] - bv[id * e + t];
          se += diff * diff;
        }
        ref += lw.S / (freq[id] + lw.eps_freq) * se / static_cast<double>(e);
      }
    ref /= static_cast<double>(b);
    CHECK(weighted_concept_loss(c, bank, ids, lw).item() == doctest::Approx(ref).epsilon(1e-12));
  }
  std::mt19937_64 g2(1);
  const BankView bank = random_bank(g2, 2, 3);
  CHECK_THROWS_AS(weighted_concept_loss(Tensor::zeros({1, 2, 3}), bank, {0, 4}, LossWeights{}), ContractError);
}

TEST_CASE("rare concepts receive larger weights") {
  // 1 positive against 31 negatives at one position.
  std::vector<std::size_t> ids;
  for (std::size_t s = 0; s < 32; ++s) ids.push_back(s == 0 ? 0 : 1);
  const auto w = concept_weights(ids, LossWeights{});
  CHECK(w[0] == doctest::Approx(31 * w[1]).epsilon(1e-4));
}

TEST_CASE("nearest bank ids follow cosine similarity") {
  std::mt19937_64 gen(6);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t rows = 1 + gen() % 4, e = 2 + gen() % 5, count = 2 * (1 + gen() % 3);
    const BankView bank{bridge::random_tensor(gen, {count, e})};
    const Tensor x = bridge::random_tensor(gen, {rows, e});
    const auto ids = nearest_bank_ids(x, bank);
    const auto xv = bridge::values(x);
    const auto bv = bridge::values(bank.vectors);
    for (std::size_t i = 0; i < rows; ++i) {
      double best = -2;
      std::size_t arg = 0;
      for (std::size_t k = 0; k < count; ++k) {
        double dot = 0, nx = 0, nb = 0;
        for (std::size_t t = 0; t < e; ++t) {
          dot += xv[i * e + t] * bv[k * e + t];
          nx += xv[i * e + t] * xv[i * e + t];
          nb += bv[k * e + t] * bv[k * e + t];
        }
        const double cosv = dot / std::sqrt(nx * nb);
        if (cosv > best) {
          best = cosv;
          arg = k;
        }
      }
      CHECK(ids[i] == arg);
    }
  }
  const BankView bank{Tensor::from({2, 2}, {1, 0, 0, 1})};
  CHECK(nearest_bank_ids(Tensor::zeros({1, 2}), bank)[0] == 0);
}

TEST_CASE("antonym swap replaces only the selected row") {
  std::mt19937_64 gen(8);
  const BankView bank = random_bank(gen, 3, 4);
  // Row 1 of sample 0 is exactly prototype id 2 (concept 1 present).
  auto cv = oracle::random_vec(gen, 2 * 3 * 4);
  const auto bv = bridge::values(bank.vectors);
  for (std::size_t t = 0; t < 4; ++t) cv[1 * 4 + t] = bv[2 * 4 + t];
  const Tensor c = bridge::tensor({2, 3, 4}, cv);
  SingleHotMask u{{0, 1, 0}};
  const Tensor swapped = antonym_swap(c, u, bank);
  const auto sv = bridge::values(swapped);
  for (std::size_t t = 0; t < 4; ++t) CHECK(sv[1 * 4 + t] == bv[3 * 4 + t]);
  for (std::size_t r : {0, 2})
    for (std::size_t t = 0; t < 4; ++t) CHECK(sv[r * 4 + t] == cv[r * 4 + t]);
  // Applying the swap again returns the original prototype.
  const auto twice = bridge::values(antonym_swap(swapped, u, bank));
  for (std::size_t t = 0; t < 4; ++t) CHECK(twice[1 * 4 + t] == bv[2 * 4 + t]);
  CHECK_THROWS_AS(antonym_swap(c, SingleHotMask{{1, 1, 0}}, bank), ContractError);
  CHECK_THROWS_AS(antonym_swap(c, SingleHotMask{{0, 0, 0}}, bank), ContractError);
}

TEST_CASE("single-hot masks are uniform over positions") {
  Rng rng(3);
  std::vector<int> counts(4, 0);
  for (int i = 0; i < 4000; ++i) ++counts[sample_single_hot(4, rng).position()];
  // Binomial(4000, 1/4): sd ~27.4, five sd bounds.
  for (int c : counts) CHECK(std::abs(c - 1000) < 137);
}

TEST_CASE("disentanglement loss is zero when re-encoding returns the swapped concepts") {
  const ModelConfig c = small_config();
  Model model(c, 1);
  std::mt19937_64 gen(2);
  const BankView bank = random_bank(gen, c.concepts, c.width);
  const Tensor x = bridge::random_tensor(gen, {2, c.patches(), c.patch_dim()}, false, 0, 1);
  const auto fwd = model.forward(x, model.plan(0.25, 3));
  const SingleHotMask u{{0, 0, 1}};
  DisentangleTerms probe = disentangle_loss(model, fwd, u, bank);
  const Tensor target = probe.swapped;
  const auto terms = disentangle_loss(model, fwd, u, bank, [&](const Tensor&) { return target; });
  CHECK(terms.loss.item() == 0.0);
  CHECK(probe.loss.item() > 0.0);
}

TEST_CASE("disentanglement decodes with the swapped row in every snapshot") {
  const ModelConfig c = small_config();
  Model model(c, 4);
  std::mt19937_64 gen(5);
  const BankView bank = random_bank(gen, c.concepts, c.width);
  const Tensor x = bridge::random_tensor(gen, {1, c.patches(), c.patch_dim()}, false, 0, 1);
  const auto fwd = model.forward(x, model.plan(0.5, 1));
  const SingleHotMask u{{0, 1, 0}};
  const auto terms = disentangle_loss(model, fwd, u, bank);
  const std::vector<ConceptEdit> edits{{1, reshape(select_row(terms.swapped, 1), {c.width})}};
  CHECK(bridge::values(terms.decoded) == bridge::values(model.decode_edited(fwd, edits)));
  const Tensor reenc = model.encode(terms.decoded, model.full_plan()).concepts;
  CHECK(bridge::values(terms.reencoded) == bridge::values(reenc));
  const double ref = [&] {
    const auto a = bridge::values(terms.swapped);
    const auto b = bridge::values(reenc);
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s / static_cast<double>(a.size());
  }();
  CHECK(terms.loss.item() == doctest::Approx(ref).epsilon(1e-13));
}

TEST_CASE("total loss combines the terms and names non-finite components") {
  LossWeights lw;
  lw.alpha = 0.5;
  lw.beta = 2.0;
  LossParts parts{Tensor::scalar(1.0), Tensor::scalar(4.0), Tensor::scalar(0.25)};
  LossValues v;
  CHECK(total_loss(parts, lw, &v).item() == doctest::Approx(1.0 + 2.0 + 0.5));
  CHECK(v.disentangle == 4.0);
  parts.disentangle = Tensor::scalar(std::numeric_limits<double>::quiet_NaN());
  try {
    total_loss(parts, lw);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("l_dis") != std::string::npos);
  }
  parts.disentangle = Tensor();
  CHECK(total_loss(parts, lw).item() == doctest::Approx(1.5));
}

TEST_CASE("total loss gradients agree with finite differences") {
  ModelConfig c = small_config();
  Model model(c, 9);
  bridge::scramble(model.params(), 10, 0.4);
  ConceptBank bank = build_prototype_bank({"a", "b", "c"}, c.concept_dim, 4);
  attach_bank(model, bank);
  std::mt19937_64 gen(11);
  const Tensor x = bridge::random_tensor(gen, {2, c.patches(), c.patch_dim()}, false, 0, 1);
  const MaskPlan plan = model.plan(0.25, 2);
  const std::vector<std::size_t> ids{0, 3, 4, 1, 2, 5};
  const SingleHotMask u{{0, 1, 0}};
  LossWeights lw;
  gradcheck::Options o;
  o.samples_per_tensor = 4;
  const auto r = gradcheck::check_registry(model.params(), [&] {
    const auto fwd = model.forward(x, plan);
    const BankView view = project_bank(model, bank);
    LossParts parts;
    parts.recon = masked_recon_loss(fwd.recon, x, plan.masked);
    parts.concept_term = weighted_concept_loss(fwd.concepts, view, ids, lw);
    parts.disentangle = disentangle_loss(model, fwd, u, view).loss;
    return total_loss(parts, lw);
  }, o);
  INFO(r.worst);
  for (const auto& f : r.failed) INFO(f);
  CHECK(r.failures == 0);
}
