#include "mcm/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "mcm/random.hpp"

MCM_BEGIN_NAMESPACE

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kFull: return "full";
    case Variant::kNoBranches: return "no_branches";
    case Variant::kFixedConcepts: return "fixed_concepts";
    case Variant::kRepetitiveConcepts: return "repetitive_concepts";
  }
  return "full";
}

std::string to_string(MaskShape s) { return s == MaskShape::kSquare ? "square" : "random"; }

std::string to_string(AttnScale s) { return s == AttnScale::kFullDim ? "full_dim" : "per_head"; }

Variant parse_variant(std::string_view text) {
  if (text == "full") return Variant::kFull;
  if (text == "no_branches") return Variant::kNoBranches;
  if (text == "fixed_concepts") return Variant::kFixedConcepts;
  if (text == "repetitive_concepts") return Variant::kRepetitiveConcepts;
  throw ConfigError("unknown variant '" + std::string(text) +
                    "' (expected full, no_branches, fixed_concepts or repetitive_concepts)");
}

MaskShape parse_mask_shape(std::string_view text) {
  if (text == "random") return MaskShape::kRandom;
  if (text == "square") return MaskShape::kSquare;
  throw ConfigError("unknown mask shape '" + std::string(text) + "' (expected random or square)");
}

AttnScale parse_attn_scale(std::string_view text) {
  if (text == "per_head") return AttnScale::kPerHead;
  if (text == "full_dim") return AttnScale::kFullDim;
  throw ConfigError("unknown attn_scale '" + std::string(text) + "' (expected per_head or full_dim)");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (patch == 0) fail("patch must be positive");
  if (image_h == 0 || image_w == 0 || channels == 0) fail("image geometry must be positive");
  if (image_h % patch != 0 || image_w % patch != 0) {
    fail("image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
         " is not divisible by patch " + std::to_string(patch));
  }
  if (width == 0 || heads == 0) fail("width and heads must be positive");
  if (width % heads != 0) {
    fail("width " + std::to_string(width) + " is not divisible by " + std::to_string(heads) + " heads");
  }
  if (enc_layers == 0 || enc_layers % 2 != 0) {
    fail("encoder depth must be even and positive, got " + std::to_string(enc_layers));
  }
  if (enc_ffn == 0 || dec_ffn == 0) fail("feedforward widths must be positive");
  if (concepts == 0) fail("concept count must be positive");
  if (concept_dim == 0) fail("concept_dim must be positive");
}

std::map<std::string, std::string> ModelConfig::to_map() const {
  return {
      {"image_h", std::to_string(image_h)},
      {"image_w", std::to_string(image_w)},
      {"channels", std::to_string(channels)},
      {"patch", std::to_string(patch)},
      {"width", std::to_string(width)},
      {"heads", std::to_string(heads)},
      {"enc_layers", std::to_string(enc_layers)},
      {"enc_ffn", std::to_string(enc_ffn)},
      {"dec_ffn", std::to_string(dec_ffn)},
      {"concepts", std::to_string(concepts)},
      {"concept_dim", std::to_string(concept_dim)},
      {"variant", to_string(variant)},
      {"attn_scale", to_string(attn_scale)},
      {"pos_embed", pos_embed ? "on" : "off"},
  };
}

namespace {

std::size_t parse_size(const std::string& key, const std::string& text) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(text, &pos);
  } catch (const std::exception&) {
    throw ConfigError("model config: '" + key + "' expects an unsigned integer, got '" + text + "'");
  }
  if (pos != text.size() || text.find('-') != std::string::npos) {
    throw ConfigError("model config: '" + key + "' expects an unsigned integer, got '" + text + "'");
  }
  return static_cast<std::size_t>(v);
}

}  // namespace

ModelConfig ModelConfig::from_map(const std::map<std::string, std::string>& values) {
  ModelConfig c;
  for (const auto& [key, text] : values) {
    if (key == "image_h") c.image_h = parse_size(key, text);
    else if (key == "image_w") c.image_w = parse_size(key, text);
    else if (key == "channels") c.channels = parse_size(key, text);
    else if (key == "patch") c.patch = parse_size(key, text);
    else if (key == "width") c.width = parse_size(key, text);
    else if (key == "heads") c.heads = parse_size(key, text);
    else if (key == "enc_layers") c.enc_layers = parse_size(key, text);
    else if (key == "enc_ffn") c.enc_ffn = parse_size(key, text);
    else if (key == "dec_ffn") c.dec_ffn = parse_size(key, text);
    else if (key == "concepts") c.concepts = parse_size(key, text);
    else if (key == "concept_dim") c.concept_dim = parse_size(key, text);
    else if (key == "variant") c.variant = parse_variant(text);
    else if (key == "attn_scale") c.attn_scale = parse_attn_scale(text);
    else if (key == "pos_embed") {
      if (text != "on" && text != "off") throw ConfigError("model config: pos_embed expects on|off");
      c.pos_embed = text == "on";
    } else {
      throw ConfigError("model config: unknown key '" + key + "'");
    }
  }
  return c;
}

std::vector<std::string> ModelConfig::differences(const ModelConfig& other) const {
  std::vector<std::string> out;
  const auto a = to_map();
  const auto b = other.to_map();
  for (const auto& [key, value] : a) {
    const auto& theirs = b.at(key);
    if (value != theirs) out.push_back(key + ": " + value + " != " + theirs);
  }
  return out;
}

std::size_t masked_count(std::size_t patches, double ratio) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) {
    throw ConfigError("mask ratio must lie in [0, 1], got " + std::to_string(ratio));
  }
  // The small bias keeps e.g. 0.29 * 100 from flooring to 28.
  const auto n = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(patches) + 1e-9));
  return std::min(n, patches);
}

MaskPlan make_mask_plan(std::size_t patches, double ratio, std::uint64_t seed, MaskShape shape,
                        std::size_t grid_h, std::size_t grid_w) {
  if (patches == 0) throw ConfigError("mask plan needs at least one patch");
  const std::size_t count = masked_count(patches, ratio);
  if (count == patches) {
    throw ConfigError("mask ratio " + std::to_string(ratio) + " leaves no visible patch out of " +
                      std::to_string(patches));
  }
  MaskPlan plan;
  plan.seed = seed;
  plan.patches = patches;
  plan.ratio = ratio;
  plan.shape = shape;

  Rng rng(seed);
  std::vector<bool> is_masked(patches, false);
  if (shape == MaskShape::kRandom) {
    IndexList idx(patches);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    shuffle_in_place(std::span<std::size_t>(idx), rng);
    for (std::size_t i = 0; i < count; ++i) is_masked[idx[i]] = true;
  } else {
    if (grid_h == 0 || grid_w == 0) {
      const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(patches))));
      if (side * side != patches) {
        throw ConfigError("square mask needs the patch grid for " + std::to_string(patches) + " patches");
      }
      grid_h = grid_w = side;
    }
    if (grid_h * grid_w != patches) throw ConfigError("patch grid does not match the patch count");
    auto side = static_cast<std::size_t>(std::floor(std::sqrt(static_cast<double>(count))));
    while ((side + 1) * (side + 1) <= count) ++side;
    while (side * side > count) --side;
    side = std::min({side, grid_h, grid_w});
    const std::size_t top = (grid_h - side) / 2;
    const std::size_t left = (grid_w - side) / 2;
    for (std::size_t y = top; y < top + side; ++y) {
      for (std::size_t x = left; x < left + side; ++x) is_masked[y * grid_w + x] = true;
    }
    IndexList rest;
    for (std::size_t j = 0; j < patches; ++j) {
      if (!is_masked[j]) rest.push_back(j);
    }
    shuffle_in_place(std::span<std::size_t>(rest), rng);
    for (std::size_t i = 0; i < count - side * side; ++i) is_masked[rest[i]] = true;
  }

  for (std::size_t j = 0; j < patches; ++j) (is_masked[j] ? plan.masked : plan.visible).push_back(j);
  plan.order = plan.visible;
  plan.order.insert(plan.order.end(), plan.masked.begin(), plan.masked.end());
  plan.restore.assign(patches, 0);
  for (std::size_t i = 0; i < patches; ++i) plan.restore[plan.order[i]] = i;
  return plan;
}

std::vector<Scalar> patchify_values(std::span<const float> image, const ModelConfig& cfg) {
  const std::size_t h = cfg.image_h, w = cfg.image_w, c = cfg.channels, p = cfg.patch;
  if (image.size() != h * w * c) {
    throw DimensionError("patchify: image has " + std::to_string(image.size()) + " values, expected " +
                         std::to_string(h * w * c));
  }
  const std::size_t gw = w / p;
  const std::size_t d = p * p * c;
  std::vector<Scalar> out(cfg.patches() * d);
  for (std::size_t gy = 0; gy < h / p; ++gy) {
    for (std::size_t gx = 0; gx < gw; ++gx) {
      Scalar* dst = out.data() + (gy * gw + gx) * d;
      for (std::size_t py = 0; py < p; ++py) {
        for (std::size_t px = 0; px < p; ++px) {
          const float* src = image.data() + ((gy * p + py) * w + gx * p + px) * c;
          for (std::size_t ch = 0; ch < c; ++ch) dst[(py * p + px) * c + ch] = static_cast<Scalar>(src[ch]);
        }
      }
    }
  }
  return out;
}

std::vector<float> unpatchify_values(std::span<const Scalar> patches, const ModelConfig& cfg) {
  const std::size_t h = cfg.image_h, w = cfg.image_w, c = cfg.channels, p = cfg.patch;
  const std::size_t d = p * p * c;
  if (patches.size() != cfg.patches() * d) {
    throw DimensionError("unpatchify: got " + std::to_string(patches.size()) + " values for " +
                         std::to_string(cfg.patches()) + " patches of " + std::to_string(d));
  }
  const std::size_t gw = w / p;
  std::vector<float> out(h * w * c);
  for (std::size_t gy = 0; gy < h / p; ++gy) {
    for (std::size_t gx = 0; gx < gw; ++gx) {
      const Scalar* src = patches.data() + (gy * gw + gx) * d;
      for (std::size_t py = 0; py < p; ++py) {
        for (std::size_t px = 0; px < p; ++px) {
          float* dst = out.data() + ((gy * p + py) * w + gx * p + px) * c;
          for (std::size_t ch = 0; ch < c; ++ch) dst[ch] = static_cast<float>(src[(py * p + px) * c + ch]);
        }
      }
    }
  }
  return out;
}

Tensor patchify(const Tensor& image, std::size_t patch) {
  if (image.dim() != 3) throw DimensionError("patchify expects [H, W, C], got " + shape_str(image.shape()));
  ModelConfig cfg;
  cfg.image_h = image.size(0);
  cfg.image_w = image.size(1);
  cfg.channels = image.size(2);
  cfg.patch = patch;
  if (patch == 0 || cfg.image_h % patch != 0 || cfg.image_w % patch != 0) {
    throw ConfigError("patchify: image " + shape_str(image.shape()) + " is not divisible by patch " +
                      std::to_string(patch));
  }
  const std::size_t d = cfg.patch_dim();
  const std::size_t gw = cfg.grid_w();
  const std::size_t w = cfg.image_w, c = cfg.channels;
  auto src = image.data();
  std::vector<Scalar> out(image.numel());
  for (std::size_t gy = 0; gy < cfg.grid_h(); ++gy) {
    for (std::size_t gx = 0; gx < gw; ++gx) {
      for (std::size_t py = 0; py < patch; ++py) {
        for (std::size_t px = 0; px < patch; ++px) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            out[(gy * gw + gx) * d + (py * patch + px) * c + ch] =
                src[((gy * patch + py) * w + gx * patch + px) * c + ch];
          }
        }
      }
    }
  }
  return Tensor::from({cfg.patches(), d}, std::move(out));
}

Tensor unpatchify(const Tensor& patches, const ModelConfig& cfg) {
  if (patches.dim() != 2 || patches.size(0) != cfg.patches() || patches.size(1) != cfg.patch_dim()) {
    throw DimensionError("unpatchify: expected [" + std::to_string(cfg.patches()) + "," +
                         std::to_string(cfg.patch_dim()) + "], got " + shape_str(patches.shape()));
  }
  const std::size_t h = cfg.image_h, w = cfg.image_w, c = cfg.channels, p = cfg.patch;
  const std::size_t d = cfg.patch_dim();
  const std::size_t gw = cfg.grid_w();
  auto src = patches.data();
  std::vector<Scalar> out(h * w * c);
  for (std::size_t gy = 0; gy < cfg.grid_h(); ++gy) {
    for (std::size_t gx = 0; gx < gw; ++gx) {
      for (std::size_t py = 0; py < p; ++py) {
        for (std::size_t px = 0; px < p; ++px) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            out[((gy * p + py) * w + gx * p + px) * c + ch] = src[(gy * gw + gx) * d + (py * p + px) * c + ch];
          }
        }
      }
    }
  }
  return Tensor::from({h, w, c}, std::move(out));
}

Tensor edit_concepts(const Tensor& concepts, std::span<const ConceptEdit> edits) {
  if (concepts.dim() != 3) throw DimensionError("edit_concepts expects [b, M, E]");
  const std::size_t b = concepts.size(0);
  const std::size_t m = concepts.size(1);
  const std::size_t e = concepts.size(2);
  std::set<std::size_t> seen;
  for (const auto& edit : edits) {
    if (edit.position >= m) {
      throw ContractError("concept edit position " + std::to_string(edit.position) + " out of range");
    }
    if (!seen.insert(edit.position).second) {
      throw ContractError("duplicate concept edit at position " + std::to_string(edit.position));
    }
    if (edit.target.numel() != e) throw DimensionError("concept edit target must have width " + std::to_string(e));
  }
  Tensor out = concepts;
  for (const auto& edit : edits) {
    out = replace_row(out, edit.position, expand_leading(reshape(edit.target, {e}), b));
  }
  return out;
}

Model::Model(ModelConfig config, std::uint64_t init_seed) : config_(std::move(config)) {
  config_.validate();
  const std::size_t n = config_.patches();
  const std::size_t e = config_.width;
  const std::size_t h = config_.heads;

  patch_embed_ = LinearLayer::create(params_, "patch_embed", config_.patch_dim(), e);
  if (config_.pos_embed) encoder_pos_ = params_.add("encoder_pos", {n, e}, ParamKind::kEmbedding);
  concept_tokens_ = params_.add("concept_tokens", {config_.concepts, e}, ParamKind::kToken);
  for (std::size_t l = 0; l < config_.enc_layers; ++l) {
    const std::string p = "enc" + std::to_string(l);
    EncoderLayer layer;
    layer.concept_attn = MultiHeadAttention::create(params_, p + ".concept_attn", e, h, config_.attn_scale);
    layer.concept_norm1 = LayerNorm::create(params_, p + ".concept_norm1", e);
    layer.concept_ffn = FeedForward::create(params_, p + ".concept_ffn", e, config_.enc_ffn);
    layer.concept_norm2 = LayerNorm::create(params_, p + ".concept_norm2", e);
    layer.visible_attn = MultiHeadAttention::create(params_, p + ".visible_attn", e, h, config_.attn_scale);
    layer.visible_norm1 = LayerNorm::create(params_, p + ".visible_norm1", e);
    layer.visible_ffn = FeedForward::create(params_, p + ".visible_ffn", e, config_.enc_ffn);
    layer.visible_norm2 = LayerNorm::create(params_, p + ".visible_norm2", e);
    encoder_.push_back(std::move(layer));
  }
  mask_token_ = params_.add("mask_token", {e}, ParamKind::kEmbedding);
  if (config_.pos_embed) decoder_pos_ = params_.add("decoder_pos", {n, e}, ParamKind::kEmbedding);
  for (std::size_t d = 0; d < config_.dec_layers(); ++d) {
    const std::string p = "dec" + std::to_string(d);
    DecoderLayer layer;
    layer.attn = MultiHeadAttention::create(params_, p + ".attn", e, h, config_.attn_scale);
    layer.norm1 = LayerNorm::create(params_, p + ".norm1", e);
    layer.ffn = FeedForward::create(params_, p + ".ffn", e, config_.dec_ffn);
    layer.norm2 = LayerNorm::create(params_, p + ".norm2", e);
    decoder_.push_back(std::move(layer));
  }
  head_ = LinearLayer::create(params_, "head", e, config_.patch_dim());
  if (config_.concept_dim != e) {
    has_concept_proj_ = true;
    concept_proj_ = LinearLayer::create(params_, "concept_proj", config_.concept_dim, e);
  }
  init_params(params_, init_seed);
}

void Model::set_concept_anchors(Tensor anchors) {
  if (anchors.shape() != Shape{config_.concepts, config_.concept_dim}) {
    throw DimensionError("concept anchors must be [" + std::to_string(config_.concepts) + "," +
                         std::to_string(config_.concept_dim) + "], got " + shape_str(anchors.shape()));
  }
  anchors_ = anchors.detach();
}

Tensor Model::project_concepts(const Tensor& bank_vectors) const {
  if (bank_vectors.size(-1) != config_.concept_dim) {
    throw ConfigError("bank vectors have width " + std::to_string(bank_vectors.size(-1)) +
                      " but the model expects concept_dim " + std::to_string(config_.concept_dim));
  }
  if (!has_concept_proj_) return bank_vectors;
  return concept_proj_.forward(bank_vectors);
}

Tensor Model::embed(const Tensor& patches, const IndexList& rows) const {
  Tensor v = patch_embed_.forward(gather_rows(patches, rows));
  if (config_.pos_embed) v = add(v, gather_rows(encoder_pos_, rows));
  return v;
}

std::pair<Tensor, Tensor> Model::encoder_layer(std::size_t layer, const Tensor& visible,
                                               const Tensor& concepts) const {
  const auto& L = encoder_.at(layer);
  // Concept tokens only query the visible tokens; they never attend to each other.
  Tensor c = residual_block(concepts, L.concept_attn.forward(concepts, visible), L.concept_norm1,
                            L.concept_ffn, L.concept_norm2);
  Tensor v = residual_block(visible, L.visible_attn.forward(visible, visible), L.visible_norm1,
                            L.visible_ffn, L.visible_norm2);
  return {v, c};
}

EncodeResult Model::encode(const Tensor& patches, const MaskPlan& plan) const {
  const std::size_t n = config_.patches();
  if (patches.dim() != 3 || patches.size(1) != n || patches.size(2) != config_.patch_dim()) {
    throw DimensionError("encode expects patches [b," + std::to_string(n) + "," +
                         std::to_string(config_.patch_dim()) + "], got " + shape_str(patches.shape()));
  }
  if (plan.patches != n) throw ContractError("mask plan covers " + std::to_string(plan.patches) + " patches, model has " + std::to_string(n));
  if (plan.visible.empty()) throw ContractError("mask plan leaves no visible patch");
  const std::size_t b = patches.size(0);

  EncodeResult out;
  Tensor v = embed(patches, plan.visible);
  Tensor c;
  Tensor fixed_queries;
  if (config_.variant == Variant::kFixedConcepts) {
    if (!anchors_.defined()) throw ContractError("fixed_concepts variant needs concept anchors");
    fixed_queries = expand_leading(project_concepts(anchors_), b);
  } else {
    c = expand_leading(concept_tokens_, b);
  }
  for (std::size_t l = 0; l < encoder_.size(); ++l) {
    auto [v_next, c_next] = encoder_layer(l, v, fixed_queries.defined() ? fixed_queries : c);
    v = std::move(v_next);
    c = std::move(c_next);
    if ((l + 1) % 2 == 0) out.snapshots.push_back(c);
  }
  out.visible = v;
  out.concepts = c;
  return out;
}

Tensor Model::assemble_decoder_input(const Tensor& visible_latents, const MaskPlan& plan) const {
  if (visible_latents.dim() != 3 || visible_latents.size(1) != plan.keep() ||
      plan.patches != config_.patches()) {
    throw ContractError("visible latents " + shape_str(visible_latents.shape()) +
                        " do not match a plan with " + std::to_string(plan.keep()) + " visible of " +
                        std::to_string(plan.patches) + " patches");
  }
  const std::size_t b = visible_latents.size(0);
  Tensor arranged = visible_latents;
  if (!plan.masked.empty()) {
    Tensor fill = expand_leading(expand_leading(mask_token_, plan.masked.size()), b);
    arranged = concat_rows(visible_latents, fill);
  }
  Tensor full = gather_rows(arranged, plan.restore);
  if (config_.pos_embed) full = add(full, decoder_pos_);
  return full;
}

Tensor Model::decoder_layer(std::size_t layer, const Tensor& full, const Tensor& kv) const {
  const auto& L = decoder_.at(layer);
  return residual_block(full, L.attn.forward(full, kv), L.norm1, L.ffn, L.norm2);
}

Tensor Model::decode(const Tensor& full0, std::span<const Tensor> snapshots,
                     const Tensor& final_concepts) const {
  const std::size_t depth = decoder_.size();
  Tensor x = full0;
  switch (config_.variant) {
    case Variant::kFull:
    case Variant::kFixedConcepts:
      if (snapshots.size() != depth) {
        throw ContractError("decoder needs " + std::to_string(depth) + " concept snapshots, got " +
                            std::to_string(snapshots.size()));
      }
      for (std::size_t d = 0; d < depth; ++d) x = decoder_layer(d, x, snapshots[depth - 1 - d]);
      break;
    case Variant::kRepetitiveConcepts:
      for (std::size_t d = 0; d < depth; ++d) x = decoder_layer(d, x, final_concepts);
      break;
    case Variant::kNoBranches: {
      const std::size_t n = full0.size(1);
      x = concat_rows(full0, final_concepts);
      for (std::size_t d = 0; d < depth; ++d) x = decoder_layer(d, x, x);
      IndexList rows(n);
      std::iota(rows.begin(), rows.end(), std::size_t{0});
      x = gather_rows(x, rows);
      break;
    }
  }
  return head_.forward(x);
}

ForwardOutput Model::forward(const Tensor& patches, const MaskPlan& plan) const {
  EncodeResult enc = encode(patches, plan);
  Tensor full0 = assemble_decoder_input(enc.visible, plan);
  ForwardOutput out;
  out.recon = decode(full0, enc.snapshots, enc.concepts);
  out.concepts = std::move(enc.concepts);
  out.visible = std::move(enc.visible);
  out.snapshots = std::move(enc.snapshots);
  out.plan = plan;
  return out;
}

ForwardOutput Model::forward(const Tensor& patches, double ratio, std::uint64_t seed, MaskShape shape) const {
  return forward(patches, plan(ratio, seed, shape));
}

Tensor Model::decode_edited(const ForwardOutput& fwd, std::span<const ConceptEdit> edits) const {
  Tensor concepts = edit_concepts(fwd.concepts, edits);
  std::vector<Tensor> snapshots;
  snapshots.reserve(fwd.snapshots.size());
  for (const auto& s : fwd.snapshots) snapshots.push_back(edit_concepts(s, edits));
  return decode(assemble_decoder_input(fwd.visible, fwd.plan), snapshots, concepts);
}

MaskPlan Model::plan(double ratio, std::uint64_t seed, MaskShape shape) const {
  return make_mask_plan(config_.patches(), ratio, seed, shape, config_.grid_h(), config_.grid_w());
}

MCM_END_NAMESPACE
