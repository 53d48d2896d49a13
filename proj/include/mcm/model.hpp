#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mcm/nn.hpp"
#include "mcm/tensor.hpp"

MCM_BEGIN_NAMESPACE

enum class Variant {
  kFull,
  kNoBranches,          // decoder self-attends over [tokens; C_L], no per-layer snapshots
  kFixedConcepts,       // encoder concept queries are fixed prototype anchors
  kRepetitiveConcepts,  // every decoder layer consumes C_L
};

enum class MaskShape { kRandom, kSquare };

std::string to_string(Variant v);
std::string to_string(MaskShape s);
std::string to_string(AttnScale s);
Variant parse_variant(std::string_view text);
MaskShape parse_mask_shape(std::string_view text);
AttnScale parse_attn_scale(std::string_view text);

struct ModelConfig {
  std::size_t image_h = 24;
  std::size_t image_w = 24;
  std::size_t channels = 3;
  std::size_t patch = 6;
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t enc_layers = 2;
  std::size_t enc_ffn = 128;
  std::size_t dec_ffn = 128;
  std::size_t concepts = 4;
  // Width of the prototype bank vectors; a learned projection maps them into
  // the model width when this differs from `width`.
  std::size_t concept_dim = 64;
  Variant variant = Variant::kFull;
  AttnScale attn_scale = AttnScale::kPerHead;
  bool pos_embed = true;

  std::size_t grid_h() const { return image_h / patch; }
  std::size_t grid_w() const { return image_w / patch; }
  std::size_t patches() const { return grid_h() * grid_w(); }
  std::size_t patch_dim() const { return patch * patch * channels; }
  std::size_t dec_layers() const { return enc_layers / 2; }

  void validate() const;

  // Flat key/value echo used by checkpoints and run directories.
  std::map<std::string, std::string> to_map() const;
  static ModelConfig from_map(const std::map<std::string, std::string>& values);
  // Human-readable "field: a != b" entries for every differing field.
  std::vector<std::string> differences(const ModelConfig& other) const;
};

// Seeded split of patch indices. `visible` and `masked` are ascending;
// `order` is visible ++ masked and `restore[j]` is the position of patch j in
// `order`, so gathering `order`-arranged rows with `restore` returns patch order.
struct MaskPlan {
  std::uint64_t seed = 0;
  std::size_t patches = 0;
  double ratio = 0.0;
  MaskShape shape = MaskShape::kRandom;
  IndexList order;
  IndexList visible;
  IndexList masked;
  IndexList restore;

  std::size_t keep() const { return visible.size(); }
};

std::size_t masked_count(std::size_t patches, double ratio);

// Square shape needs the patch grid; grid_h/grid_w of 0 mean a square grid.
MaskPlan make_mask_plan(std::size_t patches, double ratio, std::uint64_t seed,
                        MaskShape shape = MaskShape::kRandom, std::size_t grid_h = 0,
                        std::size_t grid_w = 0);

// [H, W, C] -> [N, P*P*C], patches in reading order, pixels row-major then channels.
Tensor patchify(const Tensor& image, std::size_t patch);
// [N, P*P*C] -> [H, W, C]
Tensor unpatchify(const Tensor& patches, const ModelConfig& cfg);
std::vector<Scalar> patchify_values(std::span<const float> image, const ModelConfig& cfg);
std::vector<float> unpatchify_values(std::span<const Scalar> patches, const ModelConfig& cfg);

struct EncoderLayer {
  MultiHeadAttention concept_attn;
  LayerNorm concept_norm1;
  FeedForward concept_ffn;
  LayerNorm concept_norm2;
  MultiHeadAttention visible_attn;
  LayerNorm visible_norm1;
  FeedForward visible_ffn;
  LayerNorm visible_norm2;
};

struct DecoderLayer {
  MultiHeadAttention attn;
  LayerNorm norm1;
  FeedForward ffn;
  LayerNorm norm2;
};

struct EncodeResult {
  Tensor visible;                 // [b, keep, E]
  std::vector<Tensor> snapshots;  // one [b, M, E] after every second layer
  Tensor concepts;                // C_L, [b, M, E]
};

struct ForwardOutput {
  Tensor recon;     // [b, N, P*P*C]
  Tensor concepts;  // [b, M, E]
  Tensor visible;   // [b, keep, E]
  std::vector<Tensor> snapshots;
  MaskPlan plan;
};

struct ConceptEdit {
  std::size_t position = 0;
  Tensor target;  // [E] in model space
};

// Replaces the rows at the edited positions of [b, M, E] concepts.
Tensor edit_concepts(const Tensor& concepts, std::span<const ConceptEdit> edits);

class Model {
 public:
  Model(ModelConfig config, std::uint64_t init_seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return config_; }
  ParamRegistry& params() { return params_; }
  const ParamRegistry& params() const { return params_; }

  // Fixed queries for the kFixedConcepts variant, [M, concept_dim].
  void set_concept_anchors(Tensor anchors);
  const Tensor& concept_anchors() const { return anchors_; }

  // Maps bank vectors [..., concept_dim] into model width.
  Tensor project_concepts(const Tensor& bank_vectors) const;

  // Patch projection plus encoder positions for the given patch rows.
  Tensor embed(const Tensor& patches, const IndexList& rows) const;
  std::pair<Tensor, Tensor> encoder_layer(std::size_t layer, const Tensor& visible,
                                          const Tensor& concepts) const;
  EncodeResult encode(const Tensor& patches, const MaskPlan& plan) const;
  Tensor assemble_decoder_input(const Tensor& visible_latents, const MaskPlan& plan) const;
  Tensor decoder_layer(std::size_t layer, const Tensor& full, const Tensor& kv) const;
  // Decoder layer d (0-based) consumes snapshots[size - 1 - d].
  Tensor decode(const Tensor& full0, std::span<const Tensor> snapshots,
                const Tensor& final_concepts) const;

  ForwardOutput forward(const Tensor& patches, const MaskPlan& plan) const;
  ForwardOutput forward(const Tensor& patches, double ratio, std::uint64_t seed,
                        MaskShape shape = MaskShape::kRandom) const;

  // Decodes `fwd` again with the edits applied to C_L and to every snapshot.
  Tensor decode_edited(const ForwardOutput& fwd, std::span<const ConceptEdit> edits) const;

  MaskPlan plan(double ratio, std::uint64_t seed, MaskShape shape = MaskShape::kRandom) const;
  MaskPlan full_plan() const { return plan(0.0, 0); }

  const std::vector<EncoderLayer>& encoder_layers() const { return encoder_; }
  const std::vector<DecoderLayer>& decoder_layers() const { return decoder_; }

 private:
  ModelConfig config_;
  ParamRegistry params_;
  LinearLayer patch_embed_;
  Tensor encoder_pos_;
  Tensor concept_tokens_;
  std::vector<EncoderLayer> encoder_;
  Tensor mask_token_;
  Tensor decoder_pos_;
  std::vector<DecoderLayer> decoder_;
  LinearLayer head_;
  bool has_concept_proj_ = false;
  LinearLayer concept_proj_;
  Tensor anchors_;
};

MCM_END_NAMESPACE
