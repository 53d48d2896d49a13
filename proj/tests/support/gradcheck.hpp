#pragma once

// Central finite-difference checks against reverse-mode gradients. Meant for
// the double build; every helper takes library types so float and double
// translation units get distinct overloads.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mcm/nn.hpp"
#include "mcm/tensor.hpp"

namespace gradcheck {

struct Options {
  double h = 1e-5;
  double rtol = 1e-4;
  // Finite differences of an O(1) loss cannot resolve gradients much below
  // eps * |loss| / h; differences under this floor count as agreement.
  double atol = 1e-9;
  std::size_t samples_per_tensor = 6;  // 0: every entry
  bool directional = true;
  std::uint64_t seed = 1234;
};

struct Report {
  std::size_t checked = 0;
  std::size_t failures = 0;
  double worst_rel = 0.0;  // among checks whose difference exceeds atol
  std::string worst;
  std::size_t within_rtol = 0;  // checks that pass on relative error alone
  double max_abs_diff = 0.0;
  double max_abs_grad = 0.0;
  std::vector<std::string> failed;

  bool ok() const { return failures == 0 && checked > 0; }
};

inline double rel_error(double a, double n) {
  const double diff = std::abs(a - n);
  const double denom = std::max(std::abs(a), std::abs(n));
  return denom == 0.0 ? 0.0 : diff / denom;
}

inline void record(Report& r, const Options& o, const std::string& where, double analytic, double numeric) {
  ++r.checked;
  const double diff = std::abs(analytic - numeric);
  const double rel = rel_error(analytic, numeric);
  const bool pass = diff <= o.atol || rel <= o.rtol;
  if (rel <= o.rtol) ++r.within_rtol;
  r.max_abs_diff = std::max(r.max_abs_diff, diff);
  r.max_abs_grad = std::max(r.max_abs_grad, std::abs(analytic));
  if (diff > o.atol && rel > r.worst_rel) {
    r.worst_rel = rel;
    std::ostringstream os;
    os << where << " analytic " << analytic << " numeric " << numeric;
    r.worst = os.str();
  }
  if (!pass) {
    ++r.failures;
    std::ostringstream os;
    os << where << ": analytic " << analytic << " numeric " << numeric << " rel " << rel;
    r.failed.push_back(os.str());
  }
}

// Checks d loss / d t for each named tensor in `targets`. `loss` must rebuild
// the graph from the current tensor values on every call.
inline Report check(std::vector<std::pair<std::string, mcm::Tensor>> targets, const std::function<mcm::Tensor()>& loss,
                    const Options& o = {}) {
  Report report;
  for (auto& [name, t] : targets) t.zero_grad();
  loss().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& [name, t] : targets) analytic.emplace_back(t.grad().begin(), t.grad().end());

  auto eval = [&]() {
    mcm::NoGradGuard guard;
    return static_cast<double>(loss().item());
  };

  std::mt19937_64 gen(o.seed);
  for (std::size_t ti = 0; ti < targets.size(); ++ti) {
    auto& [name, t] = targets[ti];
    auto values = t.mutable_data();
    const auto& g = analytic[ti];
    const std::size_t n = values.size();

    std::vector<std::size_t> picks;
    if (o.samples_per_tensor == 0 || o.samples_per_tensor >= n) {
      for (std::size_t i = 0; i < n; ++i) picks.push_back(i);
    } else {
      std::size_t largest = 0;
      for (std::size_t i = 1; i < n; ++i)
        if (std::abs(g[i]) > std::abs(g[largest])) largest = i;
      picks.push_back(largest);
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      while (picks.size() < o.samples_per_tensor) {
        const std::size_t i = pick(gen);
        if (std::find(picks.begin(), picks.end(), i) == picks.end()) picks.push_back(i);
      }
    }
    for (std::size_t i : picks) {
      const auto x0 = values[i];
      values[i] = static_cast<mcm::Scalar>(x0 + o.h);
      const double fp = eval();
      values[i] = static_cast<mcm::Scalar>(x0 - o.h);
      const double fm = eval();
      values[i] = x0;
      record(report, o, name + "[" + std::to_string(i) + "]", g[i], (fp - fm) / (2.0 * o.h));
    }

    if (o.directional && n > 1) {
      std::normal_distribution<double> normal;
      std::vector<double> u(n);
      double norm = 0.0;
      for (auto& x : u) {
        x = normal(gen);
        norm += x * x;
      }
      norm = std::sqrt(norm);
      double dir_analytic = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        u[i] /= norm;
        dir_analytic += g[i] * u[i];
      }
      const std::vector<mcm::Scalar> saved(values.begin(), values.end());
      for (std::size_t i = 0; i < n; ++i) values[i] = static_cast<mcm::Scalar>(saved[i] + o.h * u[i]);
      const double fp = eval();
      for (std::size_t i = 0; i < n; ++i) values[i] = static_cast<mcm::Scalar>(saved[i] - o.h * u[i]);
      const double fm = eval();
      std::copy(saved.begin(), saved.end(), values.begin());
      record(report, o, name + " (random direction)", dir_analytic, (fp - fm) / (2.0 * o.h));
    }
  }
  return report;
}

inline Report check_registry(mcm::ParamRegistry& reg, const std::function<mcm::Tensor()>& loss,
                             const Options& o = {}) {
  std::vector<std::pair<std::string, mcm::Tensor>> targets;
  for (auto& e : reg.entries()) targets.emplace_back(e.name, e.tensor);
  return check(std::move(targets), loss, o);
}

// Projects a tensor-valued function onto a fixed random tensor so it can be
// checked as a scalar loss.
inline mcm::Tensor probe_sum(const mcm::Tensor& out, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<mcm::Scalar> w(out.numel());
  for (auto& x : w) x = static_cast<mcm::Scalar>(dist(gen));
  return mcm::sum(mcm::mul(out, mcm::Tensor::from(out.shape(), std::move(w))));
}

}  // namespace gradcheck
