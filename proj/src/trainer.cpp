#include "mcm/trainer.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "mcm/log.hpp"
#include "mcm/random.hpp"

MCM_BEGIN_NAMESPACE

namespace {

constexpr std::uint64_t kSwapSalt = 0x737761700ULL;

std::string fmt_double(double v) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& key, const std::string& text) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != text.size()) {
    throw ConfigError("train config: '" + key + "' expects a number, got '" + text + "'");
  }
  return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& text) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(text, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != text.size() || text.find('-') != std::string::npos) {
    throw ConfigError("train config: '" + key + "' expects an unsigned integer, got '" + text + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "on") return true;
  if (text == "false" || text == "0" || text == "off") return false;
  throw ConfigError("train config: '" + key + "' expects true|false, got '" + text + "'");
}

double ms_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

void TrainConfig::validate() const {
  if (batch == 0) throw ConfigError("batch size must be at least 1");
  if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0)) {
    throw ConfigError("mask ratio must lie in [0, 1], got " + fmt_double(mask_ratio));
  }
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be >= 0");
  loss.validate();
}

AdamWConfig TrainConfig::optimizer() const {
  AdamWConfig c;
  c.lr = lr;
  c.weight_decay = weight_decay;
  return c;
}

std::map<std::string, std::string> TrainConfig::to_map() const {
  return {
      {"preset", preset},
      {"epochs", std::to_string(epochs)},
      {"max_steps", std::to_string(max_steps)},
      {"batch", std::to_string(batch)},
      {"mask_ratio", fmt_double(mask_ratio)},
      {"mask_shape", to_string(mask_shape)},
      {"alpha", fmt_double(loss.alpha)},
      {"beta", fmt_double(loss.beta)},
      {"weight_scale", fmt_double(loss.S)},
      {"eps_freq", fmt_double(loss.eps_freq)},
      {"uniform_concept_weights", loss.uniform_concept_weights ? "true" : "false"},
      {"lr", fmt_double(lr)},
      {"weight_decay", fmt_double(weight_decay)},
      {"init_seed", std::to_string(init_seed)},
      {"data_seed", std::to_string(data_seed)},
      {"mask_seed", std::to_string(mask_seed)},
      {"eval_interval", std::to_string(eval_interval)},
  };
}

TrainConfig TrainConfig::from_map(const std::map<std::string, std::string>& values) {
  TrainConfig c;
  for (const auto& [key, text] : values) {
    if (key == "preset") c.preset = text;
    else if (key == "epochs") c.epochs = parse_u64(key, text);
    else if (key == "max_steps") c.max_steps = parse_u64(key, text);
    else if (key == "batch") c.batch = parse_u64(key, text);
    else if (key == "mask_ratio") c.mask_ratio = parse_double(key, text);
    else if (key == "mask_shape") c.mask_shape = parse_mask_shape(text);
    else if (key == "alpha") c.loss.alpha = parse_double(key, text);
    else if (key == "beta") c.loss.beta = parse_double(key, text);
    else if (key == "weight_scale") c.loss.S = parse_double(key, text);
    else if (key == "eps_freq") c.loss.eps_freq = parse_double(key, text);
    else if (key == "uniform_concept_weights") c.loss.uniform_concept_weights = parse_bool(key, text);
    else if (key == "lr") c.lr = parse_double(key, text);
    else if (key == "weight_decay") c.weight_decay = parse_double(key, text);
    else if (key == "init_seed") c.init_seed = parse_u64(key, text);
    else if (key == "data_seed") c.data_seed = parse_u64(key, text);
    else if (key == "mask_seed") c.mask_seed = parse_u64(key, text);
    else if (key == "eval_interval") c.eval_interval = parse_u64(key, text);
    else throw ConfigError("train config: unknown key '" + key + "'");
  }
  return c;
}

Preset make_preset(const std::string& name) {
  Preset p;
  if (name == "tiny") {
    p.train.loss.S = 8.0;
    return p;
  }
  if (name == "paper-small") {
    p.model.image_h = p.model.image_w = 48;
    p.model.patch = 6;
    p.model.width = 512;
    p.model.heads = 4;
    p.model.enc_layers = 2;
    p.model.enc_ffn = 128;
    p.model.dec_ffn = 128;
    p.model.concept_dim = 512;
    p.train.preset = "paper-small";
    p.train.batch = 1024;
    p.train.epochs = 500;
    p.train.lr = 1e-3;
    p.train.weight_decay = 0.01;
    p.dataset_size = 4096;
    return p;
  }
  throw ConfigError("unknown preset '" + name + "' (expected tiny or paper-small)");
}

void write_log_header(std::ostream& out) { out << "step,l_re,l_dis,l_concept,total,wall_ms\n"; }

void write_log_line(std::ostream& out, const StepLog& log) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,%.9g,%.9g,%.3f\n", static_cast<long long>(log.step), log.l_re,
                log.l_dis, log.l_concept, log.total, log.wall_ms);
  out << buf;
}

Trainer::Trainer(Model& model, const std::vector<DatasetRecord>& data, const ConceptBank& bank, TrainConfig config)
    : model_(model), data_(data), bank_(bank), config_(std::move(config)),
      optimizer_(model.params(), config_.optimizer()) {
  config_.validate();
  if (data_.empty()) throw ContractError("training needs a non-empty dataset");
  for (const auto& rec : data_) {
    if (rec.attributes.size() != model_.config().concepts) {
      throw ConfigError("record " + rec.name + " has " + std::to_string(rec.attributes.size()) +
                        " attributes, model expects " + std::to_string(model_.config().concepts));
    }
  }
  attach_bank(model_, bank_);
}

std::size_t Trainer::steps_per_epoch() const { return (data_.size() + config_.batch - 1) / config_.batch; }

std::int64_t Trainer::total_steps() const {
  auto total = static_cast<std::int64_t>(config_.epochs * steps_per_epoch());
  if (config_.max_steps > 0) total = std::min(total, static_cast<std::int64_t>(config_.max_steps));
  return total;
}

void Trainer::set_steps_done(std::int64_t steps) {
  if (steps < 0) throw ContractError("step count must be >= 0");
  steps_ = steps;
}

IndexList Trainer::batch_indices(std::int64_t t) {
  const auto spe = static_cast<std::int64_t>(steps_per_epoch());
  const std::int64_t epoch = t / spe;
  const auto pos = static_cast<std::size_t>(t % spe);
  if (epoch != perm_epoch_) {
    perm_.resize(data_.size());
    std::iota(perm_.begin(), perm_.end(), std::size_t{0});
    Rng rng(mix_seed(config_.data_seed, static_cast<std::uint64_t>(epoch)));
    shuffle_in_place(std::span<std::size_t>(perm_), rng);
    perm_epoch_ = epoch;
  }
  const std::size_t first = pos * config_.batch;
  const std::size_t last = std::min(data_.size(), first + config_.batch);
  return IndexList(perm_.begin() + static_cast<std::ptrdiff_t>(first),
                   perm_.begin() + static_cast<std::ptrdiff_t>(last));
}

MaskPlan Trainer::mask_plan(std::int64_t t) const {
  return model_.plan(config_.mask_ratio, mix_seed(config_.mask_seed, static_cast<std::uint64_t>(t)),
                     config_.mask_shape);
}

SingleHotMask Trainer::swap_mask(std::int64_t t) const {
  Rng rng(mix_seed(mix_seed(config_.mask_seed, static_cast<std::uint64_t>(t)), kSwapSalt));
  return sample_single_hot(model_.config().concepts, rng);
}

StepLog Trainer::step() {
  const auto start = std::chrono::steady_clock::now();
  const std::int64_t t = steps_;
  const IndexList idx = batch_indices(t);
  const MaskPlan plan = mask_plan(t);
  const auto& lw = config_.loss;

  model_.params().zero_grad();
  Tensor patches = batch_patches(data_, idx, model_.config());
  ForwardOutput fwd = model_.forward(patches, plan);
  const BankView view = project_bank(model_, bank_);

  LossParts parts;
  parts.recon = masked_recon_loss(fwd.recon, patches, plan.masked);
  if (lw.beta > 0.0) {
    std::vector<std::size_t> ids;
    for (std::size_t i : idx) {
      auto r = prototype_ids(data_[i].attributes);
      ids.insert(ids.end(), r.begin(), r.end());
    }
    parts.concept_term = weighted_concept_loss(fwd.concepts, view, ids, lw);
  }
  if (lw.alpha > 0.0) parts.disentangle = disentangle_loss(model_, fwd, swap_mask(t), view).loss;

  StepLog log;
  log.step = t + 1;
  auto value = [](const Tensor& x) { return x.defined() ? static_cast<double>(x.item()) : 0.0; };
  log.l_re = value(parts.recon);
  log.l_dis = value(parts.disentangle);
  log.l_concept = value(parts.concept_term);
  Tensor total;
  try {
    LossValues values;
    total = total_loss(parts, lw, &values);
    log.total = values.total;
  } catch (const NumericError& e) {
    std::ostringstream os;
    os << "step " << log.step << ": " << e.what() << " (l_re=" << log.l_re << ", l_dis=" << log.l_dis
       << ", l_concept=" << log.l_concept << ")";
    throw NumericError(os.str());
  }
  total.backward();
  optimizer_.step(model_.params());
  ++steps_;
  log.wall_ms = ms_since(start);
  return log;
}

std::vector<StepLog> Trainer::run(std::int64_t limit, const std::function<void(const StepLog&)>& on_step) {
  std::vector<StepLog> logs;
  const std::int64_t end = limit < 0 ? total_steps() : std::min(total_steps(), limit);
  while (steps_ < end) {
    logs.push_back(step());
    if (on_step) on_step(logs.back());
  }
  return logs;
}

std::vector<StepLog> train(Model& model, const std::vector<DatasetRecord>& data, const ConceptBank& bank,
                           const TrainConfig& config, const std::function<void(const StepLog&)>& on_step) {
  Trainer trainer(model, data, bank, config);
  return trainer.run(-1, on_step);
}

std::vector<SweepRow> mask_ratio_sweep(const ModelConfig& model_config, const TrainConfig& base,
                                       const std::vector<DatasetRecord>& train_data,
                                       const std::vector<DatasetRecord>& eval_data, const ConceptBank& bank,
                                       const std::vector<double>& ratios, double test_ratio) {
  std::vector<SweepRow> rows;
  for (double r : ratios) {
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("sweep ratio " + fmt_double(r) + " is outside [0, 1]");
  }
  for (double r : ratios) {
    TrainConfig cfg = base;
    cfg.mask_ratio = r;
    Model model(model_config, cfg.init_seed);
    const auto start = std::chrono::steady_clock::now();
    train(model, train_data, bank, cfg);
    SweepRow row;
    row.ratio = r;
    row.train_seconds = ms_since(start) / 1000.0;
    EvalOptions eo;
    eo.test_ratio = test_ratio < 0.0 ? r : test_ratio;
    eo.seed = cfg.mask_seed;
    eo.shape = cfg.mask_shape;
    eo.loss = cfg.loss;
    row.report = evaluate(model, eval_data, bank, eo);
    log_info("sweep ratio " + fmt_double(r) + ": f1 " + fmt_double(row.report.f1) + ", masked_psnr " +
             fmt_double(row.report.masked_psnr));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string sweep_csv_header() { return "ratio,accuracy,precision,recall,f1,masked_mse,masked_psnr,train_seconds"; }

void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
  out << sweep_csv_header() << '\n';
  for (const auto& row : rows) {
    char buf[320];
    const auto& r = row.report;
    std::snprintf(buf, sizeof(buf), "%g,%.6f,%.6f,%.6f,%.6f,%.8f,%.4f,%.3f\n", row.ratio, r.accuracy, r.precision,
                  r.recall, r.f1, r.masked_mse, r.masked_psnr, row.train_seconds);
    out << buf;
  }
}

MCM_END_NAMESPACE
