#include "mcm/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "mcm/checkpoint.hpp"
#include "mcm/concept_bank.hpp"
#include "mcm/dataset.hpp"
#include "mcm/image_io.hpp"
#include "mcm/log.hpp"
#include "mcm/losses.hpp"
#include "mcm/metrics.hpp"
#include "mcm/random.hpp"

MCM_BEGIN_NAMESPACE

namespace {

namespace fs = std::filesystem;

constexpr float kMaskFill = 0.5F;
constexpr std::uint64_t kHeldOutSalt = 0x686f6c64ULL;

std::string fmt_double(double v) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> parts;
  if (trim(text).empty()) return parts;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) parts.push_back(trim(item));
  return parts;
}

std::string join(const std::vector<std::string>& parts) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? "," : "") + parts[i];
  return out;
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
    throw ConfigError("config: '" + key + "' expects an unsigned integer, got '" + text + "'");
  }
  return v;
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
    throw ConfigError("config: '" + key + "' expects a number, got '" + text + "'");
  }
  return v;
}

const std::vector<std::string>& data_keys() {
  static const std::vector<std::string> keys = {"data_dir",      "attributes_csv", "concept_names",
                                                "probabilities", "dataset_size",   "data_gen_seed",
                                                "bank",          "bank_seed"};
  return keys;
}

std::set<std::string> keys_of(const std::map<std::string, std::string>& m) {
  std::set<std::string> keys;
  for (const auto& [k, v] : m) keys.insert(k);
  return keys;
}

const std::set<std::string>& model_keys() {
  static const std::set<std::string> keys = keys_of(ModelConfig{}.to_map());
  return keys;
}

const std::set<std::string>& train_keys() {
  static const std::set<std::string> keys = keys_of(TrainConfig{}.to_map());
  return keys;
}

bool is_known_key(const std::string& key) {
  return model_keys().count(key) || train_keys().count(key) ||
         std::find(data_keys().begin(), data_keys().end(), key) != data_keys().end();
}

RunConfig preset_config(const std::string& name) {
  const Preset p = make_preset(name);
  RunConfig cfg;
  cfg.model = p.model;
  cfg.train = p.train;
  cfg.data.dataset_size = p.dataset_size;
  return cfg;
}

// Concept names and Bernoulli rates, falling back to the synthetic defaults.
ConceptSpec concept_spec(const DataConfig& data) {
  const ConceptSpec defaults = ConceptSpec::synthetic_default();
  ConceptSpec spec;
  spec.names = data.concept_names.empty() ? defaults.names : data.concept_names;
  if (!data.probabilities.empty()) {
    spec.probabilities = data.probabilities;
  } else if (spec.names == defaults.names) {
    spec.probabilities = defaults.probabilities;
  } else {
    spec.probabilities.assign(spec.names.size(), 0.5);
  }
  return spec;
}

void write_config_echo(const fs::path& dir, const std::map<std::string, std::string>& values,
                       const std::vector<std::string>& notes = {}) {
  std::ofstream out(dir / "config.txt");
  if (!out) throw IoError("cannot write " + (dir / "config.txt").string());
  for (const auto& note : notes) out << "# " << note << '\n';
  for (const auto& [k, v] : values) out << k << '=' << v << '\n';
  if (!out) throw IoError("failed writing " + (dir / "config.txt").string());
}

void prepare_output_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw UsageError("output path " + dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir) && !force) {
      throw UsageError("output directory " + dir.string() + " is not empty (pass --force to overwrite)");
    }
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
}

void require_file(const fs::path& path) {
  std::error_code ec;
  if (!fs::is_regular_file(path, ec) || fs::file_size(path, ec) == 0) {
    throw IoError("output " + path.string() + " was not written");
  }
}

void require_image(const fs::path& path, const ModelConfig& cfg) {
  const Image img = read_pnm(path);
  if (img.height != cfg.image_h || img.width != cfg.image_w || img.channels != cfg.channels) {
    throw IoError("output " + path.string() + " has unexpected geometry");
  }
}

std::vector<DatasetRecord> load_dataset(const RunConfig& cfg, const ImageGeometry& geom, std::uint64_t seed) {
  const ConceptSpec spec = concept_spec(cfg.data);
  if (cfg.data.data_dir.empty()) return gen_synthetic(cfg.data.dataset_size, spec, geom, seed);
  const fs::path dir(cfg.data.data_dir);
  fs::path csv(cfg.data.attributes_csv);
  if (csv.is_relative()) csv = dir / csv;
  LoadStats stats;
  auto records = load_folder(dir, csv, spec.names, geom, &stats);
  log_info("loaded " + std::to_string(stats.loaded) + " images from " + dir.string() + " (" +
           std::to_string(stats.skipped) + " skipped)");
  return records;
}

ConceptBank resolve_bank(const RunConfig& cfg, const fs::path& fallback) {
  const ConceptSpec spec = concept_spec(cfg.data);
  ConceptBank bank;
  if (!cfg.data.bank.empty()) {
    bank = load_bank(cfg.data.bank);
  } else if (!fallback.empty() && fs::exists(fallback)) {
    bank = load_bank(fallback);
  } else {
    return build_prototype_bank(spec.names, cfg.model.concept_dim, cfg.data.bank_seed);
  }
  if (bank.names != spec.names) {
    throw ConfigError("bank concepts (" + join(bank.names) + ") differ from the configured concepts (" +
                      join(spec.names) + ")");
  }
  return bank;
}

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  std::string preset;
  bool force = false;
  CLI::Option* seed_opt = nullptr;
};

void add_common(CLI::App* sub, Common& c, const std::string& default_out) {
  c.out = default_out;
  sub->add_option("--config", c.config, "key=value config file");
  c.seed_opt = sub->add_option("--seed", c.seed, "seed");
  sub->add_option("--out", c.out, "output directory")->capture_default_str();
  sub->add_option("--preset", c.preset, "tiny | paper-small")->check(CLI::IsMember({"tiny", "paper-small"}));
  sub->add_flag("--force", c.force, "write into a non-empty output directory");
}

const CLI::Validator kRatio(
    [](std::string& text) -> std::string {
      double v = 0.0;
      try {
        std::size_t pos = 0;
        v = std::stod(text, &pos);
        if (pos != text.size()) return "mask ratio '" + text + "' is not a number";
      } catch (const std::exception&) {
        return "mask ratio '" + text + "' is not a number";
      }
      if (!(v >= 0.0 && v < 1.0)) return "mask ratio must lie in [0, 1), got " + text;
      return {};
    },
    "RATIO in [0,1)");

// Overrides collected from flags, keyed like the config file.
using Overrides = std::map<std::string, std::string>;

void put_if(Overrides& o, const CLI::Option* opt, const std::string& key, const std::string& value) {
  if (opt && opt->count() > 0) o[key] = value;
}

std::string preset_of(const Common& c, const std::string& fallback) {
  if (!c.preset.empty()) return c.preset;
  if (!c.config.empty()) {
    const auto file = read_config_file(c.config);
    if (auto it = file.find("preset"); it != file.end()) return it->second;
  }
  return fallback;
}

// ---- gen-data ----

struct GenDataArgs {
  Common common;
  std::size_t n = 64;
};

int cmd_gen_data(const GenDataArgs& a, std::ostream& out) {
  Overrides o;
  if (a.common.seed_opt->count()) o["data_gen_seed"] = std::to_string(a.common.seed);
  const RunConfig cfg = resolve_config(preset_of(a.common, "tiny"), a.common.config, o);
  const ConceptSpec spec = concept_spec(cfg.data);
  const ImageGeometry geom = ImageGeometry::of(cfg.model);
  const fs::path dir(a.common.out);
  prepare_output_dir(dir, a.common.force);

  const auto records = gen_synthetic(a.n, spec, geom, cfg.data.data_gen_seed);
  save_folder(dir, records, spec.names, cfg.data.attributes_csv);

  std::vector<std::string> probs;
  for (double p : spec.probabilities) probs.push_back(fmt_double(p));
  {
    std::ofstream m(dir / "manifest.txt");
    m << "generator=synthetic\n"
      << "seed=" << cfg.data.data_gen_seed << '\n'
      << "count=" << a.n << '\n'
      << "height=" << geom.height << '\n'
      << "width=" << geom.width << '\n'
      << "channels=" << geom.channels << '\n'
      << "concepts=" << join(spec.names) << '\n'
      << "probabilities=" << join(probs) << '\n'
      << "attributes=" << cfg.data.attributes_csv << '\n';
    if (!m) throw IoError("failed writing " + (dir / "manifest.txt").string());
  }
  require_file(dir / "manifest.txt");
  require_file(dir / cfg.data.attributes_csv);
  for (const auto& r : records) require_file(dir / (r.name + ".ppm"));

  std::vector<std::size_t> positives(spec.size(), 0);
  for (const auto& r : records)
    for (std::size_t j = 0; j < spec.size(); ++j) positives[j] += r.attributes[j] ? 1 : 0;
  out << "wrote " << a.n << " images to " << dir.string() << " (seed " << cfg.data.data_gen_seed << ")\n";
  for (std::size_t j = 0; j < spec.size(); ++j) {
    out << "  " << spec.names[j] << ": " << positives[j] << " positive\n";
  }
  return kExitOk;
}

// ---- train ----

struct TrainArgs {
  Common common;
  double mask_ratio = 0.25;
  std::size_t epochs = 0;
  std::size_t steps = 0;
  std::size_t batch = 0;
  double lr = 0.0;
  double weight_decay = 0.0;
  std::string variant;
  std::string mask_shape;
  double alpha = 0.0;
  double beta = 0.0;
  double weight_scale = 0.0;
  bool uniform_weights = false;
  std::string data;
  std::string bank;
  std::string resume;
  std::size_t log_every = 50;
  CLI::Option *mask_ratio_opt = nullptr, *epochs_opt = nullptr, *steps_opt = nullptr, *batch_opt = nullptr,
              *lr_opt = nullptr, *wd_opt = nullptr, *variant_opt = nullptr, *shape_opt = nullptr,
              *alpha_opt = nullptr, *beta_opt = nullptr, *scale_opt = nullptr, *uniform_opt = nullptr,
              *data_opt = nullptr, *bank_opt = nullptr;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  Overrides o;
  put_if(o, a.mask_ratio_opt, "mask_ratio", fmt_double(a.mask_ratio));
  put_if(o, a.epochs_opt, "epochs", std::to_string(a.epochs));
  put_if(o, a.steps_opt, "max_steps", std::to_string(a.steps));
  put_if(o, a.batch_opt, "batch", std::to_string(a.batch));
  put_if(o, a.lr_opt, "lr", fmt_double(a.lr));
  put_if(o, a.wd_opt, "weight_decay", fmt_double(a.weight_decay));
  put_if(o, a.variant_opt, "variant", a.variant);
  put_if(o, a.shape_opt, "mask_shape", a.mask_shape);
  put_if(o, a.alpha_opt, "alpha", fmt_double(a.alpha));
  put_if(o, a.beta_opt, "beta", fmt_double(a.beta));
  put_if(o, a.scale_opt, "weight_scale", fmt_double(a.weight_scale));
  put_if(o, a.uniform_opt, "uniform_concept_weights", a.uniform_weights ? "true" : "false");
  put_if(o, a.data_opt, "data_dir", a.data);
  put_if(o, a.bank_opt, "bank", a.bank);
  if (a.common.seed_opt->count()) {
    o["init_seed"] = std::to_string(a.common.seed);
    o["data_seed"] = std::to_string(a.common.seed + 1);
    o["mask_seed"] = std::to_string(a.common.seed + 2);
  }
  const std::string preset = preset_of(a.common, "tiny");
  if (!a.common.preset.empty()) o["preset"] = preset;
  const RunConfig cfg = resolve_config(preset, a.common.config, o);
  const fs::path dir(a.common.out);
  const ModelConfig& mc = cfg.model;

  out << "preset " << cfg.train.preset << ": N=" << mc.patches() << " patches (" << mc.grid_h() << "x"
      << mc.grid_w() << " grid, patch " << mc.patch << "), keep=" << (mc.patches() - masked_count(mc.patches(), cfg.train.mask_ratio))
      << ", M=" << mc.concepts << ", E=" << mc.width << ", L_enc=" << mc.enc_layers << ", L_dec=" << mc.dec_layers()
      << '\n';

  prepare_output_dir(dir, a.common.force);
  const auto data = load_dataset(cfg, ImageGeometry::of(mc), cfg.data.data_gen_seed);
  const ConceptBank bank = resolve_bank(cfg, {});
  save_bank(bank, dir / "bank.txt");

  Model model(mc, cfg.train.init_seed);
  Trainer trainer(model, data, bank, cfg.train);
  if (!a.resume.empty()) {
    const CheckpointData ckpt = load_checkpoint(a.resume);
    restore_model(ckpt, model);
    restore_optimizer(ckpt, model, trainer.optimizer());
    trainer.set_steps_done(ckpt.step);
    if (ckpt.train != cfg.train.to_map()) log_warn("resuming with a training config that differs from the checkpoint");
    out << "resumed from " << a.resume << " at step " << ckpt.step << '\n';
  }
  out << "training " << trainer.total_steps() << " steps (" << trainer.steps_per_epoch() << " per epoch) on "
      << data.size() << " images\n";

  std::ofstream log(dir / "train_log.csv");
  if (!log) throw IoError("cannot write " + (dir / "train_log.csv").string());
  write_log_header(log);
  const std::size_t every = std::max<std::size_t>(a.log_every, 1);
  const auto logs = trainer.run(-1, [&](const StepLog& s) {
    write_log_line(log, s);
    if (static_cast<std::size_t>(s.step) % every == 0 || s.step == trainer.total_steps()) {
      char buf[160];
      std::snprintf(buf, sizeof(buf), "step %lld  l_re %.6f  l_dis %.6f  l_concept %.6f", static_cast<long long>(s.step),
                    s.l_re, s.l_dis, s.l_concept);
      log_info(buf);
    }
  });
  log.close();
  if (!log) throw IoError("failed writing " + (dir / "train_log.csv").string());

  const fs::path ckpt_path = dir / "checkpoint.mcm";
  save_checkpoint(ckpt_path, model, &trainer.optimizer(), cfg.train, trainer.steps_done());
  write_config_echo(dir, cfg.to_map());
  load_checkpoint(ckpt_path);
  require_file(dir / "train_log.csv");
  require_file(dir / "bank.txt");
  require_file(dir / "config.txt");

  out << "checkpoint " << ckpt_path.string() << " at step " << trainer.steps_done();
  if (!logs.empty()) out << " (l_re " << logs.back().l_re << ")";
  out << '\n';
  return kExitOk;
}

// ---- checkpoint-based commands ----

struct Loaded {
  CheckpointData ckpt;
  TrainConfig train;
  RunConfig run;
  Model model;
  ConceptBank bank;
};

Loaded load_run(const std::string& checkpoint, const Common& common, Overrides overrides) {
  CheckpointData ckpt = load_checkpoint(checkpoint);
  TrainConfig train = TrainConfig::from_map(ckpt.train);
  RunConfig run = resolve_config(preset_of(common, train.preset), common.config, overrides);
  run.model = ckpt.model;
  run.train = train;
  run.validate();
  Model model = model_from_checkpoint(ckpt);
  ConceptBank bank = resolve_bank(run, fs::path(checkpoint).parent_path() / "bank.txt");
  attach_bank(model, bank);
  return {std::move(ckpt), std::move(train), std::move(run), std::move(model), std::move(bank)};
}

Image read_input_image(const std::string& path, const ModelConfig& cfg) {
  Image img = read_pnm(path);
  if (img.height != cfg.image_h || img.width != cfg.image_w || img.channels != cfg.channels) {
    throw ConfigError("image " + path + " is " + std::to_string(img.height) + "x" + std::to_string(img.width) + "x" +
                      std::to_string(img.channels) + " but the checkpoint expects " + std::to_string(cfg.image_h) +
                      "x" + std::to_string(cfg.image_w) + "x" + std::to_string(cfg.channels));
  }
  return img;
}

Image image_from_patches(const std::vector<Scalar>& patches, const ModelConfig& cfg) {
  Image img{cfg.image_h, cfg.image_w, cfg.channels, unpatchify_values(patches, cfg)};
  return img;
}

struct ReconImages {
  Image masked;
  Image composite;
  Image raw;
};

// Masked patches drawn mid-gray; composite keeps visible input patches and
// takes masked ones from the reconstruction.
ReconImages recon_images(const std::vector<Scalar>& input, std::span<const Scalar> recon, const MaskPlan& plan,
                         const ModelConfig& cfg) {
  const std::size_t d = cfg.patch_dim();
  std::vector<Scalar> masked = input;
  std::vector<Scalar> composite = input;
  for (std::size_t j : plan.masked) {
    std::fill_n(masked.begin() + static_cast<std::ptrdiff_t>(j * d), d, static_cast<Scalar>(kMaskFill));
    std::copy_n(recon.begin() + static_cast<std::ptrdiff_t>(j * d), d,
                composite.begin() + static_cast<std::ptrdiff_t>(j * d));
  }
  std::vector<Scalar> raw(recon.begin(), recon.end());
  return {image_from_patches(masked, cfg), image_from_patches(composite, cfg), image_from_patches(raw, cfg)};
}

struct ImageArgs {
  Common common;
  std::string checkpoint;
  std::string image;
  double test_ratio = 0.0;
  std::string mask_shape;
  std::string bank;
  CLI::Option* ratio_opt = nullptr;
  CLI::Option* shape_opt = nullptr;
  CLI::Option* bank_opt = nullptr;
  std::vector<std::string> sets;
};

struct PreparedImage {
  Loaded run;
  Image image;
  std::vector<Scalar> input;
  MaskPlan plan;
  double ratio = 0.0;
  MaskShape shape = MaskShape::kRandom;
};

PreparedImage prepare_image_command(const ImageArgs& a) {
  Overrides o;
  put_if(o, a.bank_opt, "bank", a.bank);
  Loaded run = load_run(a.checkpoint, a.common, o);
  const ModelConfig& mc = run.model.config();
  Image image = read_input_image(a.image, mc);
  std::vector<Scalar> input = patchify_values(image.pixels, mc);
  const double ratio = a.ratio_opt->count() ? a.test_ratio : run.train.mask_ratio;
  const MaskShape shape = a.shape_opt->count() ? parse_mask_shape(a.mask_shape) : run.train.mask_shape;
  MaskPlan plan = run.model.plan(ratio, a.common.seed, shape);
  return {std::move(run), std::move(image), std::move(input), std::move(plan), ratio, shape};
}

std::vector<std::string> image_notes(const std::string& command, const ImageArgs& a, const PreparedImage& p) {
  return {"command=" + command, "checkpoint=" + a.checkpoint, "image=" + a.image,
          "test_mask_ratio=" + fmt_double(p.ratio), "mask_shape=" + to_string(p.shape),
          "seed=" + std::to_string(a.common.seed)};
}

void write_images(const fs::path& dir, const ReconImages& imgs, const std::string& stem, const ModelConfig& mc) {
  write_pnm(dir / "masked.ppm", imgs.masked);
  write_pnm(dir / (stem + ".ppm"), imgs.composite);
  write_pnm(dir / (stem + "_raw.ppm"), imgs.raw);
  require_image(dir / "masked.ppm", mc);
  require_image(dir / (stem + ".ppm"), mc);
  require_image(dir / (stem + "_raw.ppm"), mc);
}

int cmd_reconstruct(const ImageArgs& a, std::ostream& out) {
  NoGradGuard no_grad;
  const PreparedImage p = prepare_image_command(a);
  const ModelConfig& mc = p.run.model.config();
  const fs::path dir(a.common.out);
  prepare_output_dir(dir, a.common.force);

  const Tensor batch = Tensor::from({1, mc.patches(), mc.patch_dim()}, p.input);
  const ForwardOutput fwd = p.run.model.forward(batch, p.plan);
  const ReconImages imgs = recon_images(p.input, fwd.recon.data(), p.plan, mc);
  write_images(dir, imgs, "recon", mc);
  write_config_echo(dir, p.run.run.to_map(), image_notes("reconstruct", a, p));

  double sse = 0.0;
  std::size_t count = 0;
  for (std::size_t j : p.plan.masked) {
    for (std::size_t k = 0; k < mc.patch_dim(); ++k) {
      const double r = std::clamp(static_cast<double>(fwd.recon.data()[j * mc.patch_dim() + k]), 0.0, 1.0);
      const double diff = r - static_cast<double>(p.input[j * mc.patch_dim() + k]);
      sse += diff * diff;
      ++count;
    }
  }
  const double mse = count ? sse / static_cast<double>(count) : 0.0;
  out << "masked " << p.plan.masked.size() << " of " << mc.patches() << " patches; masked_mse " << mse
      << " masked_psnr " << psnr_from_mse(mse) << '\n';
  out << "wrote " << (dir / "masked.ppm").string() << ", " << (dir / "recon.ppm").string() << ", "
      << (dir / "recon_raw.ppm").string() << '\n';
  return kExitOk;
}

std::vector<std::pair<std::size_t, bool>> parse_sets(const std::vector<std::string>& sets, const ConceptBank& bank) {
  std::vector<std::pair<std::size_t, bool>> edits;
  std::set<std::size_t> seen;
  for (const auto& s : sets) {
    const auto eq = s.rfind('=');
    if (eq == std::string::npos) throw UsageError("--set expects concept=pos|neg, got '" + s + "'");
    const std::string name = s.substr(0, eq);
    const std::string value = s.substr(eq + 1);
    if (value != "pos" && value != "neg") throw UsageError("--set " + name + ": value must be pos or neg, got '" + value + "'");
    const auto it = std::find(bank.names.begin(), bank.names.end(), name);
    if (it == bank.names.end()) {
      throw UsageError("unknown concept '" + name + "'; the bank has: " + join(bank.names));
    }
    const auto j = static_cast<std::size_t>(it - bank.names.begin());
    if (!seen.insert(j).second) throw UsageError("concept '" + name + "' is set more than once");
    edits.emplace_back(j, value == "pos");
  }
  return edits;
}

int cmd_edit(const ImageArgs& a, std::ostream& out) {
  NoGradGuard no_grad;
  const PreparedImage p = prepare_image_command(a);
  const Model& model = p.run.model;
  const ModelConfig& mc = model.config();
  const auto requested = parse_sets(a.sets, p.run.bank);
  const fs::path dir(a.common.out);
  prepare_output_dir(dir, a.common.force);

  const BankView view = project_bank(model, p.run.bank);
  const std::size_t e = mc.width;
  std::vector<ConceptEdit> edits;
  for (const auto& [j, present] : requested) {
    const std::size_t id = ConceptBank::id_for(j, present);
    const auto row = view.vectors.data().subspan(id * e, e);
    edits.push_back({j, Tensor::from({e}, std::vector<Scalar>(row.begin(), row.end()))});
  }

  const Tensor batch = Tensor::from({1, mc.patches(), mc.patch_dim()}, p.input);
  const ForwardOutput fwd = model.forward(batch, p.plan);
  const Tensor decoded = model.decode_edited(fwd, edits);
  const ReconImages imgs = recon_images(p.input, decoded.data(), p.plan, mc);
  write_images(dir, imgs, "edited", mc);

  auto notes = image_notes("edit", a, p);
  for (const auto& s : a.sets) notes.push_back("set=" + s);
  write_config_echo(dir, p.run.run.to_map(), notes);

  const auto before = predict_concepts(fwd.concepts, view);
  const Tensor reencoded = model.encode(decoded, model.full_plan()).concepts;
  const auto after = predict_concepts(reencoded, view);
  out << "concept predictions (input -> edited, re-encoded):\n";
  for (std::size_t j = 0; j < mc.concepts; ++j) {
    out << "  " << p.run.bank.names[j] << ": " << (before[0][j] ? "pos" : "neg") << " -> "
        << (after[0][j] ? "pos" : "neg") << '\n';
  }
  out << "wrote " << (dir / "edited.ppm").string() << ", " << (dir / "edited_raw.ppm").string() << '\n';
  return kExitOk;
}

// ---- eval ----

struct EvalArgs {
  Common common;
  std::string checkpoint;
  std::string data;
  std::string bank;
  double test_ratio = 0.0;
  std::string mask_shape;
  std::size_t batch = 64;
  CLI::Option *data_opt = nullptr, *bank_opt = nullptr, *ratio_opt = nullptr, *shape_opt = nullptr;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  Overrides o;
  put_if(o, a.data_opt, "data_dir", a.data);
  put_if(o, a.bank_opt, "bank", a.bank);
  Loaded run = load_run(a.checkpoint, a.common, o);
  const fs::path dir(a.common.out);
  prepare_output_dir(dir, a.common.force);
  const auto data = load_dataset(run.run, ImageGeometry::of(run.model.config()), run.run.data.data_gen_seed);

  EvalOptions opts;
  opts.test_ratio = a.ratio_opt->count() ? a.test_ratio : run.train.mask_ratio;
  opts.seed = a.common.seed;
  opts.shape = a.shape_opt->count() ? parse_mask_shape(a.mask_shape) : run.train.mask_shape;
  opts.batch = a.batch;
  opts.loss = run.train.loss;
  const MetricsReport report = evaluate(run.model, data, run.bank, opts);

  const std::string text = format_report(report, run.bank.names);
  {
    std::ofstream txt(dir / "report.txt");
    txt << "checkpoint " << a.checkpoint << " at step " << run.ckpt.step << ", test mask ratio "
        << opts.test_ratio << "\n"
        << text;
    std::ofstream csv(dir / "report.csv");
    csv << report_csv_header() << '\n' << report_csv_row(report) << '\n';
    if (!txt || !csv) throw IoError("failed writing the report in " + dir.string());
  }
  write_config_echo(dir, run.run.to_map(),
                    {"command=eval", "checkpoint=" + a.checkpoint, "test_mask_ratio=" + fmt_double(opts.test_ratio),
                     "mask_shape=" + to_string(opts.shape), "seed=" + std::to_string(a.common.seed)});
  require_file(dir / "report.txt");
  require_file(dir / "report.csv");
  out << text;
  return kExitOk;
}

// ---- sweep ----

struct SweepArgs {
  Common common;
  std::vector<double> ratios{0.0, 0.5, 0.9};
  double test_ratio = -1.0;
  std::string data;
  std::string eval_data;
  std::string bank;
  std::size_t epochs = 0;
  std::size_t steps = 0;
  CLI::Option *ratio_opt = nullptr, *data_opt = nullptr, *bank_opt = nullptr, *epochs_opt = nullptr,
              *steps_opt = nullptr;
};

int cmd_sweep(const SweepArgs& a, std::ostream& out) {
  Overrides o;
  put_if(o, a.data_opt, "data_dir", a.data);
  put_if(o, a.bank_opt, "bank", a.bank);
  put_if(o, a.epochs_opt, "epochs", std::to_string(a.epochs));
  put_if(o, a.steps_opt, "max_steps", std::to_string(a.steps));
  if (a.common.seed_opt->count()) {
    o["init_seed"] = std::to_string(a.common.seed);
    o["data_seed"] = std::to_string(a.common.seed + 1);
    o["mask_seed"] = std::to_string(a.common.seed + 2);
  }
  const RunConfig cfg = resolve_config(preset_of(a.common, "tiny"), a.common.config, o);
  const fs::path dir(a.common.out);
  prepare_output_dir(dir, a.common.force);

  const ImageGeometry geom = ImageGeometry::of(cfg.model);
  const auto train_data = load_dataset(cfg, geom, cfg.data.data_gen_seed);
  std::vector<DatasetRecord> eval_data;
  if (!a.eval_data.empty()) {
    RunConfig held = cfg;
    held.data.data_dir = a.eval_data;
    eval_data = load_dataset(held, geom, 0);
  } else if (cfg.data.data_dir.empty()) {
    eval_data = load_dataset(cfg, geom, mix_seed(cfg.data.data_gen_seed, kHeldOutSalt));
  } else {
    eval_data = train_data;
  }
  const ConceptBank bank = resolve_bank(cfg, {});
  save_bank(bank, dir / "bank.txt");

  const auto rows = mask_ratio_sweep(cfg.model, cfg.train, train_data, eval_data, bank, a.ratios, a.test_ratio);
  {
    std::ofstream csv(dir / "sweep.csv");
    write_sweep_csv(csv, rows);
    if (!csv) throw IoError("failed writing " + (dir / "sweep.csv").string());
  }
  write_config_echo(dir, cfg.to_map(), {"command=sweep", "test_mask_ratio=" + fmt_double(a.test_ratio)});
  require_file(dir / "sweep.csv");

  std::ostringstream table;
  write_sweep_csv(table, rows);
  out << table.str();
  return kExitOk;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e)) return kExitUsage;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ValidationError*>(&e) ||
      dynamic_cast<const CapacityError*>(&e) || dynamic_cast<const DimensionError*>(&e)) {
    return kExitConfig;
  }
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const IngestionError*>(&e) ||
      dynamic_cast<const IntegrityError*>(&e) || dynamic_cast<const VersionError*>(&e)) {
    return kExitData;
  }
  if (dynamic_cast<const NumericError*>(&e)) return kExitNumeric;
  return kExitFailure;
}

}  // namespace

std::map<std::string, std::string> DataConfig::to_map() const {
  std::vector<std::string> probs;
  for (double p : probabilities) probs.push_back(fmt_double(p));
  return {
      {"data_dir", data_dir},
      {"attributes_csv", attributes_csv},
      {"concept_names", join(concept_names)},
      {"probabilities", join(probs)},
      {"dataset_size", std::to_string(dataset_size)},
      {"data_gen_seed", std::to_string(data_gen_seed)},
      {"bank", bank},
      {"bank_seed", std::to_string(bank_seed)},
  };
}

std::map<std::string, std::string> RunConfig::to_map() const {
  auto m = model.to_map();
  for (auto& [k, v] : train.to_map()) m[k] = v;
  for (auto& [k, v] : data.to_map()) m[k] = v;
  return m;
}

RunConfig RunConfig::from_map(const std::map<std::string, std::string>& values) {
  std::map<std::string, std::string> model_part;
  std::map<std::string, std::string> train_part;
  RunConfig cfg;
  DataConfig& d = cfg.data;
  for (const auto& [k, v] : values) {
    if (model_keys().count(k)) {
      model_part[k] = v;
    } else if (train_keys().count(k)) {
      train_part[k] = v;
    } else if (k == "data_dir") {
      d.data_dir = v;
    } else if (k == "attributes_csv") {
      d.attributes_csv = v;
    } else if (k == "concept_names") {
      d.concept_names = split_list(v);
    } else if (k == "probabilities") {
      d.probabilities.clear();
      for (const auto& p : split_list(v)) d.probabilities.push_back(parse_double(k, p));
    } else if (k == "dataset_size") {
      d.dataset_size = parse_u64(k, v);
    } else if (k == "data_gen_seed") {
      d.data_gen_seed = parse_u64(k, v);
    } else if (k == "bank") {
      d.bank = v;
    } else if (k == "bank_seed") {
      d.bank_seed = parse_u64(k, v);
    } else {
      throw ConfigError("unknown config key '" + k + "'");
    }
  }
  cfg.model = ModelConfig::from_map(model_part);
  cfg.train = TrainConfig::from_map(train_part);
  return cfg;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  const ConceptSpec spec = concept_spec(data);
  if (spec.names.size() != model.concepts) {
    throw ConfigError("model has " + std::to_string(model.concepts) + " concept tokens but " +
                      std::to_string(spec.names.size()) + " concepts are configured (" + join(spec.names) + ")");
  }
  if (spec.probabilities.size() != spec.names.size()) {
    throw ConfigError("probabilities lists " + std::to_string(spec.probabilities.size()) + " values for " +
                      std::to_string(spec.names.size()) + " concepts");
  }
  if (data.data_dir.empty()) {
    spec.validate();
    if (data.dataset_size == 0) throw ConfigError("dataset_size must be at least 1");
  }
}

std::map<std::string, std::string> read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::map<std::string, std::string> values;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = path.string() + ":" + std::to_string(number);
    if (eq == std::string::npos) throw ConfigError(where + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    if (!is_known_key(key)) throw ConfigError(where + ": unknown config key '" + key + "'");
    if (values.count(key)) throw ConfigError(where + ": key '" + key + "' appears twice");
    values[key] = trim(line.substr(eq + 1));
  }
  return values;
}

RunConfig resolve_config(const std::string& preset, const std::filesystem::path& config_file,
                         const std::map<std::string, std::string>& overrides) {
  auto values = preset_config(preset).to_map();
  if (!config_file.empty()) {
    for (const auto& [k, v] : read_config_file(config_file)) values[k] = v;
  }
  for (const auto& [k, v] : overrides) values[k] = v;
  RunConfig cfg = RunConfig::from_map(values);
  cfg.validate();
  return cfg;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Masked concept learning with multi-layer concept maps"};
  app.name("mcm");
  app.require_subcommand(1);
  bool quiet = false;
  bool verbose = false;
  app.add_flag("--quiet", quiet, "only report errors");
  app.add_flag("--verbose", verbose, "report progress");
  app.fallthrough();

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "render a synthetic concept dataset");
  add_common(gen_cmd, gen.common, "data");
  gen_cmd->add_option("--n", gen.n, "number of images")->check(CLI::PositiveNumber)->capture_default_str();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "train a model and write a checkpoint");
  add_common(train_cmd, tr.common, "run");
  tr.mask_ratio_opt = train_cmd->add_option("--mask-ratio", tr.mask_ratio, "training mask ratio")->check(kRatio);
  tr.epochs_opt = train_cmd->add_option("--epochs", tr.epochs, "epochs")->check(CLI::PositiveNumber);
  tr.steps_opt = train_cmd->add_option("--steps", tr.steps, "cap on optimizer steps")->check(CLI::PositiveNumber);
  tr.batch_opt = train_cmd->add_option("--batch", tr.batch, "batch size")->check(CLI::PositiveNumber);
  tr.lr_opt = train_cmd->add_option("--lr", tr.lr, "learning rate")->check(CLI::PositiveNumber);
  tr.wd_opt = train_cmd->add_option("--weight-decay", tr.weight_decay, "AdamW weight decay")->check(CLI::NonNegativeNumber);
  tr.variant_opt = train_cmd->add_option("--variant", tr.variant, "architecture variant")
                       ->check(CLI::IsMember({"full", "no_branches", "fixed_concepts", "repetitive_concepts"}));
  tr.shape_opt = train_cmd->add_option("--mask-shape", tr.mask_shape, "random | square")
                     ->check(CLI::IsMember({"random", "square"}));
  tr.alpha_opt = train_cmd->add_option("--alpha", tr.alpha, "disentanglement weight")->check(CLI::NonNegativeNumber);
  tr.beta_opt = train_cmd->add_option("--beta", tr.beta, "concept loss weight")->check(CLI::NonNegativeNumber);
  tr.scale_opt = train_cmd->add_option("--weight-scale", tr.weight_scale, "concept weight scale S")
                     ->check(CLI::PositiveNumber);
  tr.uniform_opt = train_cmd->add_flag("--uniform-weights", tr.uniform_weights, "replace frequency weights by a constant");
  tr.data_opt = train_cmd->add_option("--data", tr.data, "image folder with an attributes CSV");
  tr.bank_opt = train_cmd->add_option("--bank", tr.bank, "prototype bank file");
  train_cmd->add_option("--resume", tr.resume, "continue from a checkpoint");
  train_cmd->add_option("--log-every", tr.log_every, "steps between progress lines")->capture_default_str();

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "concept and reconstruction metrics of a checkpoint");
  add_common(eval_cmd, ev.common, "eval");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->required();
  ev.data_opt = eval_cmd->add_option("--data", ev.data, "image folder with an attributes CSV");
  ev.bank_opt = eval_cmd->add_option("--bank", ev.bank, "prototype bank file");
  ev.ratio_opt = eval_cmd->add_option("--test-mask-ratio", ev.test_ratio, "evaluation mask ratio")->check(kRatio);
  ev.shape_opt = eval_cmd->add_option("--mask-shape", ev.mask_shape, "random | square")
                     ->check(CLI::IsMember({"random", "square"}));
  eval_cmd->add_option("--batch", ev.batch, "evaluation batch size")->check(CLI::PositiveNumber);

  ImageArgs rec;
  ImageArgs ed;
  auto* rec_cmd = app.add_subcommand("reconstruct", "reconstruct one masked image");
  auto* edit_cmd = app.add_subcommand("edit", "reconstruct one image with concepts replaced");
  for (auto [cmd, args, out_dir] : {std::tuple{rec_cmd, &rec, "recon"}, std::tuple{edit_cmd, &ed, "edit"}}) {
    add_common(cmd, args->common, out_dir);
    cmd->add_option("--checkpoint", args->checkpoint, "checkpoint file")->required();
    cmd->add_option("--image", args->image, "PPM/PGM input image")->required();
    args->ratio_opt = cmd->add_option("--test-mask-ratio", args->test_ratio, "mask ratio")->check(kRatio);
    args->shape_opt =
        cmd->add_option("--mask-shape", args->mask_shape, "random | square")->check(CLI::IsMember({"random", "square"}));
    args->bank_opt = cmd->add_option("--bank", args->bank, "prototype bank file");
  }
  edit_cmd->add_option("--set", ed.sets, "concept=pos|neg, repeatable");

  SweepArgs sw;
  auto* sweep_cmd = app.add_subcommand("sweep", "train and evaluate one model per mask ratio");
  add_common(sweep_cmd, sw.common, "sweep");
  sw.ratio_opt = sweep_cmd->add_option("--ratios", sw.ratios, "comma-separated training ratios")
                     ->delimiter(',')
                     ->check(kRatio);
  sweep_cmd->add_option("--test-mask-ratio", sw.test_ratio, "evaluation ratio (default: each training ratio)")
      ->check(kRatio);
  sw.data_opt = sweep_cmd->add_option("--data", sw.data, "training image folder");
  sweep_cmd->add_option("--eval-data", sw.eval_data, "evaluation image folder");
  sw.bank_opt = sweep_cmd->add_option("--bank", sw.bank, "prototype bank file");
  sw.epochs_opt = sweep_cmd->add_option("--epochs", sw.epochs, "epochs per ratio")->check(CLI::PositiveNumber);
  sw.steps_opt = sweep_cmd->add_option("--steps", sw.steps, "step cap per ratio")->check(CLI::PositiveNumber);

  app.footer(
      "Exit codes: 0 success, 1 unexpected failure, 2 usage, 3 configuration, 4 I/O or data, 5 numeric failure.");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  set_log_level(quiet ? LogLevel::kQuiet : verbose ? LogLevel::kInfo : LogLevel::kWarn);
  try {
    if (gen_cmd->parsed()) return cmd_gen_data(gen, out);
    if (train_cmd->parsed()) return cmd_train(tr, out);
    if (eval_cmd->parsed()) return cmd_eval(ev, out);
    if (rec_cmd->parsed()) return cmd_reconstruct(rec, out);
    if (edit_cmd->parsed()) return cmd_edit(ed, out);
    if (sweep_cmd->parsed()) return cmd_sweep(sw, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return kExitUsage;
}

MCM_END_NAMESPACE
