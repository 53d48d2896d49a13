#include <doctest.h>

#include <zlib.h>

#include <cstring>
#include <set>
#include <sstream>

#include "mcm/checkpoint.hpp"
#include "mcm/trainer.hpp"
#include "support/tempdir.hpp"

using namespace mcm;
using testing_util::TempDir;

namespace {

struct Fixture {
  ModelConfig model;
  TrainConfig train;
  std::vector<DatasetRecord> data;
  ConceptBank bank;

  Fixture() {
    model.width = 32;
    model.concept_dim = 32;
    model.enc_layers = 2;
    model.enc_ffn = 32;
    model.dec_ffn = 32;
    train.batch = 4;
    train.epochs = 100;
    data = gen_synthetic(10, ConceptSpec::synthetic_default(), ImageGeometry::of(model), 3);
    bank = build_prototype_bank(ConceptSpec::synthetic_default().names, model.concept_dim, 11);
  }
};

std::vector<std::vector<Scalar>> snapshot(const Model& m) {
  std::vector<std::vector<Scalar>> out;
  for (const auto& e : m.params().entries()) out.emplace_back(e.tensor.data().begin(), e.tensor.data().end());
  return out;
}

void rewrite_crc(std::string& bytes) {
  const std::size_t body = bytes.size() - 4;
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(body)));
  for (int i = 0; i < 4; ++i) bytes[body + i] = static_cast<char>((crc >> (8 * i)) & 0xFF);
}

}  // namespace

TEST_CASE("train config round trips and validates") {
  TrainConfig c;
  c.mask_ratio = 0.5;
  c.loss.uniform_concept_weights = true;
  const auto back = TrainConfig::from_map(c.to_map());
  CHECK(back.to_map() == c.to_map());
  auto map = c.to_map();
  map["bogus"] = "1";
  CHECK_THROWS_AS(TrainConfig::from_map(map), ConfigError);
  map = c.to_map();
  map["batch"] = "many";
  CHECK_THROWS_AS(TrainConfig::from_map(map), ConfigError);
  c.batch = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("presets describe the tiny and paper-small geometries") {
  const Preset tiny = make_preset("tiny");
  CHECK(tiny.model.patches() == 16);
  CHECK(tiny.model.concepts == 4);
  const Preset small = make_preset("paper-small");
  CHECK(small.model.patches() == 64);
  CHECK(small.model.width == 512);
  CHECK(small.model.heads == 4);
  CHECK(small.model.enc_layers == 2);
  CHECK(small.model.enc_ffn == 128);
  CHECK(small.train.batch == 1024);
  CHECK(small.train.epochs == 500);
  CHECK_THROWS_AS(make_preset("huge"), ConfigError);
}

TEST_CASE("each epoch visits every record once") {
  Fixture f;
  Model model(f.model, 1);
  Trainer trainer(model, f.data, f.bank, f.train);
  CHECK(trainer.steps_per_epoch() == 3);
  CHECK(trainer.total_steps() == 300);
  for (std::int64_t epoch = 0; epoch < 3; ++epoch) {
    std::multiset<std::size_t> seen;
    for (std::int64_t s = 0; s < 3; ++s) {
      const auto idx = trainer.batch_indices(epoch * 3 + s);
      CHECK(idx.size() == (s == 2 ? 2U : 4U));
      seen.insert(idx.begin(), idx.end());
    }
    CHECK(seen.size() == 10);
    CHECK(std::set<std::size_t>(seen.begin(), seen.end()).size() == 10);
  }
  CHECK(trainer.batch_indices(0) != trainer.batch_indices(3));
  CHECK(trainer.mask_plan(4).masked == trainer.mask_plan(4).masked);
  CHECK(trainer.swap_mask(7).u == trainer.swap_mask(7).u);
}

TEST_CASE("max_steps caps the run") {
  Fixture f;
  f.train.max_steps = 2;
  Model model(f.model, 1);
  Trainer trainer(model, f.data, f.bank, f.train);
  CHECK(trainer.run().size() == 2);
  CHECK(trainer.steps_done() == 2);
}

TEST_CASE("training is bitwise deterministic for fixed seeds") {
  Fixture f;
  Model a(f.model, 1), b(f.model, 1);
  const auto la = Trainer(a, f.data, f.bank, f.train).run(4);
  const auto lb = Trainer(b, f.data, f.bank, f.train).run(4);
  REQUIRE(la.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(la[i].total == lb[i].total);
  CHECK(snapshot(a) == snapshot(b));
}

TEST_CASE("a resumed run continues exactly") {
  Fixture f;
  TempDir dir;
  Model straight(f.model, 1);
  Trainer(straight, f.data, f.bank, f.train).run(6);

  Model first(f.model, 1);
  Trainer t1(first, f.data, f.bank, f.train);
  t1.run(3);
  save_checkpoint(dir / "ck.mcm", first, &t1.optimizer(), f.train, t1.steps_done());

  const CheckpointData ck = load_checkpoint(dir / "ck.mcm");
  CHECK(ck.step == 3);
  Model second = model_from_checkpoint(ck);
  Trainer t2(second, f.data, f.bank, TrainConfig::from_map(ck.train));
  restore_optimizer(ck, second, t2.optimizer());
  t2.set_steps_done(ck.step);
  t2.run(6);
  CHECK(t2.steps_done() == 6);
  CHECK(snapshot(second) == snapshot(straight));
}

TEST_CASE("checkpoints serialize to identical bytes after a reload") {
  Fixture f;
  TempDir dir;
  Model model(f.model, 2);
  Trainer t(model, f.data, f.bank, f.train);
  t.run(1);
  save_checkpoint(dir / "a.mcm", model, &t.optimizer(), f.train, 1);
  const auto ck = load_checkpoint(dir / "a.mcm");
  Model back = model_from_checkpoint(ck);
  AdamW opt(back.params(), f.train.optimizer());
  restore_optimizer(ck, back, opt);
  save_checkpoint(dir / "b.mcm", back, &opt, f.train, 1);
  CHECK(testing_util::read_file(dir / "a.mcm") == testing_util::read_file(dir / "b.mcm"));
  CHECK(snapshot(back) == snapshot(model));
}

TEST_CASE("damaged checkpoints are rejected with specific errors") {
  Fixture f;
  Model model(f.model, 2);
  const std::string good = serialize_checkpoint(model, nullptr, f.train, 0);
  CHECK_NOTHROW(parse_checkpoint(good));

  std::string flipped = good;
  flipped[good.size() / 2] = static_cast<char>(flipped[good.size() / 2] ^ 0x10);
  CHECK_THROWS_AS(parse_checkpoint(flipped), IntegrityError);
  CHECK_THROWS_AS(parse_checkpoint(good.substr(0, good.size() - 9)), IntegrityError);
  CHECK_THROWS_AS(parse_checkpoint("hello"), IntegrityError);

  std::string version = good;
  version[8] = 9;
  rewrite_crc(version);
  CHECK_THROWS_AS(parse_checkpoint(version), VersionError);

  // dtype string sits after the magic, the version and its length prefix.
  std::string dtype = good;
  REQUIRE(dtype.substr(16, 3) == kDtypeName);
  dtype[17] = dtype[17] == '3' ? '6' : '3';
  dtype[18] = dtype[18] == '2' ? '4' : '2';
  rewrite_crc(dtype);
  CHECK_THROWS_AS(parse_checkpoint(dtype), ConfigError);
}

TEST_CASE("restoring into a different architecture lists the differences") {
  Fixture f;
  Model model(f.model, 2);
  const auto ck = parse_checkpoint(serialize_checkpoint(model, nullptr, f.train, 0));
  ModelConfig other = f.model;
  other.heads = 2;
  Model wrong(other, 2);
  try {
    restore_model(ck, wrong);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("heads") != std::string::npos);
  }
  CHECK_THROWS_AS(restore_optimizer(ck, model, *std::make_unique<AdamW>(model.params(), AdamWConfig{})),
                  ContractError);
}

TEST_CASE("reconstruction loss falls during a short run") {
  Fixture f;
  f.train.lr = 3e-3;
  Model model(f.model, 1);
  const auto logs = Trainer(model, f.data, f.bank, f.train).run(30);
  double head = 0, tail = 0;
  for (int i = 0; i < 5; ++i) {
    head += logs[static_cast<std::size_t>(i)].l_re;
    tail += logs[logs.size() - 1 - static_cast<std::size_t>(i)].l_re;
  }
  CHECK(tail < 0.7 * head);
}

TEST_CASE("training logs and sweep tables have fixed headers") {
  std::ostringstream log;
  write_log_header(log);
  write_log_line(log, StepLog{3, 0.5, 0.25, 0.125, 0.875, 1.0});
  CHECK(log.str() == "step,l_re,l_dis,l_concept,total,wall_ms\n3,0.5,0.25,0.125,0.875,1.000\n");

  Fixture f;
  f.train.max_steps = 1;
  const auto rows = mask_ratio_sweep(f.model, f.train, f.data, f.data, f.bank, {0.0, 0.5});
  REQUIRE(rows.size() == 2);
  std::ostringstream csv;
  write_sweep_csv(csv, rows);
  std::size_t lines = 0;
  for (char ch : csv.str()) lines += ch == '\n';
  CHECK(lines == 3);
  CHECK_THROWS_AS(mask_ratio_sweep(f.model, f.train, f.data, f.data, f.bank, {1.5}), ConfigError);
}
