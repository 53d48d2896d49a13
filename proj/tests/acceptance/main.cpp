#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <exception>
#include <functional>
#include <iostream>
#include <map>

#include "acceptance/criteria.hpp"

using namespace acceptance;

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria for the concept learning model"};
  std::vector<int> only;
  std::string fixture_dir;
  bool prepare = false;
  app.add_option("--only", only, "criterion numbers to run (default: all)")->check(CLI::Range(1, 9));
  app.add_option("--fixture-dir", fixture_dir, "directory holding the cached overfit checkpoints");
  app.add_flag("--prepare-fixture", prepare, "train and store the overfit checkpoints, then exit");
  CLI11_PARSE(app, argc, argv);

  Context ctx{fixture_dir};
  if (prepare) {
    try {
      f32::prepare_fixture(ctx);
    } catch (const std::exception& e) {
      std::cerr << "fixture preparation failed: " << e.what() << '\n';
      return 1;
    }
    return 0;
  }

  const std::map<int, std::function<Outcome(const Context&)>> criteria{
      {1, f64::gradient_check}, {2, f32::overfit},     {3, f32::mask_ratio_compute},
      {4, f32::ablation},       {5, f32::weighted_loss}, {6, f32::editing},
      {7, f64::oracle_equivalence}, {8, f32::determinism}, {9, f32::test_time_masks}};
  if (only.empty())
    for (const auto& [id, fn] : criteria) only.push_back(id);

  bool all = true;
  for (int id : only) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria.at(id)(ctx);
    } catch (const std::exception& e) {
      o.id = id;
      o.title = "aborted";
      o.details.push_back(std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    for (const auto& d : o.details) std::cout << "    " << d << '\n';
    std::printf("criterion %d: %s  %s (%.1f s)\n", id, o.pass ? "PASS" : "FAIL", o.title.c_str(), secs);
    std::fflush(stdout);
    all = all && o.pass;
  }
  return all ? 0 : 1;
}
