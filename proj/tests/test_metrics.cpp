#include <doctest.h>

#include <random>

#include "mcm/metrics.hpp"
#include "support/oracle.hpp"

using namespace mcm;

TEST_CASE("macro scores match brute-force enumeration") {
  std::mt19937_64 gen(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + gen() % 12, m = 1 + gen() % 4;
    std::vector<std::vector<bool>> pred(n, std::vector<bool>(m)), truth(n, std::vector<bool>(m));
    // Skewed draws so that empty denominators occur regularly.
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        pred[i][j] = gen() % (2 + j) == 0;
        truth[i][j] = gen() % (2 + j) == 0;
      }
    const auto r = classification_metrics(pred, truth);
    const auto o = oracle::macro_scores(pred, truth);
    CHECK(r.accuracy == doctest::Approx(o.accuracy).epsilon(1e-12));
    CHECK(r.precision == doctest::Approx(o.precision).epsilon(1e-12));
    CHECK(r.recall == doctest::Approx(o.recall).epsilon(1e-12));
    CHECK(r.f1 == doctest::Approx(o.f1).epsilon(1e-12));
  }
}

TEST_CASE("binary metrics handle empty denominators") {
  auto m = binary_metrics({0, 0, 5, 0});
  CHECK(m.precision == 1.0);
  CHECK(m.recall == 1.0);
  CHECK(m.f1 == 1.0);
  m = binary_metrics({0, 3, 0, 2});
  CHECK(m.precision == 0.0);
  CHECK(m.recall == 0.0);
  CHECK(m.f1 == 0.0);
  m = binary_metrics({2, 1, 3, 2});
  CHECK(m.accuracy == doctest::Approx(5.0 / 8));
  CHECK(m.f1 == doctest::Approx(2 * (2.0 / 3) * 0.5 / (2.0 / 3 + 0.5)));
  CHECK_THROWS_AS(classification_metrics({{true}}, {}), DimensionError);
}

TEST_CASE("PSNR is 10 log10 of the inverse MSE with a ceiling") {
  CHECK(psnr_from_mse(0.01) == doctest::Approx(20.0));
  CHECK(psnr_from_mse(1.0) == doctest::Approx(0.0));
  CHECK(psnr_from_mse(0.0) == kPsnrCeiling);
  CHECK(psnr_from_mse(1e-30) == kPsnrCeiling);
}

TEST_CASE("predictions compare cosine to the positive and antonym prototypes") {
  // Bank ids: 0 = a, 1 = not a, 2 = b, 3 = not b.
  const BankView bank{Tensor::from({4, 2}, {1, 0, -1, 0, 0, 1, 0, -1})};
  const Tensor c = Tensor::from({2, 2, 2}, {2, 1, 0.5F, -3, -1, 0, 1, 1});
  const auto p = predict_concepts(c, bank);
  CHECK(p[0] == std::vector<bool>{true, false});
  CHECK(p[1] == std::vector<bool>{false, true});
  // Ties resolve to the positive prototype.
  const auto tie = predict_concepts(Tensor::from({1, 2, 2}, {0, 1, 1, 0}), bank);
  CHECK(tie[0] == std::vector<bool>{true, true});
}

TEST_CASE("report text uses masked PSNR") {
  MetricsReport r;
  r.per_concept.resize(1);
  r.confusion.resize(1);
  const std::string text = format_report(r, {"a"});
  CHECK(text.find("masked_psnr") != std::string::npos);
  CHECK(text.find("fid") == std::string::npos);
  CHECK(report_csv_header().find("masked_psnr") != std::string::npos);
}
