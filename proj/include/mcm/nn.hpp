#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mcm/ops.hpp"
#include "mcm/tensor.hpp"

MCM_BEGIN_NAMESPACE

// How init_params fills a parameter.
enum class ParamKind {
  kWeight,     // truncated normal, std 0.02
  kBias,       // zeros
  kNormGain,   // ones
  kNormBias,   // zeros
  kEmbedding,  // truncated normal, std 0.02 (positional tables, mask token)
  kToken,      // standard normal (concept tokens)
};

// Ordered name -> parameter map. Iteration follows insertion order.
class ParamRegistry {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
    ParamKind kind;
  };

  Tensor add(std::string name, Shape shape, ParamKind kind);
  bool contains(std::string_view name) const;
  const Tensor& get(std::string_view name) const;
  Tensor& get(std::string_view name);

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

void init_params(ParamRegistry& registry, std::uint64_t seed);

struct LinearLayer {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  static LinearLayer create(ParamRegistry& reg, const std::string& prefix, std::size_t in,
                            std::size_t out);
  std::size_t in_features() const { return weight.size(0); }
  std::size_t out_features() const { return weight.size(1); }
  Tensor forward(const Tensor& x) const;
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;
  Scalar eps = Scalar(1e-5);

  static LayerNorm create(ParamRegistry& reg, const std::string& prefix, std::size_t width);
  Tensor forward(const Tensor& x) const { return layer_norm(x, gain, bias, eps); }
};

struct FeedForward {
  LinearLayer in;
  LinearLayer out;

  static FeedForward create(ParamRegistry& reg, const std::string& prefix, std::size_t width,
                            std::size_t hidden);
  Tensor forward(const Tensor& x) const;
};

enum class AttnScale {
  kPerHead,  // 1 / sqrt(E / heads)
  kFullDim,  // 1 / sqrt(E)
};

struct MultiHeadAttention {
  std::string name;
  std::size_t heads = 1;
  AttnScale scale_mode = AttnScale::kPerHead;
  LinearLayer query;
  LinearLayer key;
  LinearLayer value;
  LinearLayer merge;

  static MultiHeadAttention create(ParamRegistry& reg, const std::string& prefix, std::size_t width,
                                   std::size_t heads, AttnScale scale);
  std::size_t width() const { return query.in_features(); }
  // q_seq [b, Lq, E] attends over kv_seq [b, Lk, E]. Self-attention is q == kv.
  Tensor forward(const Tensor& q_seq, const Tensor& kv_seq) const;
};

// Post-LN residual block: h = LN1(x + attended); return LN2(h + FFN(h)).
Tensor residual_block(const Tensor& x, const Tensor& attended, const LayerNorm& norm1,
                      const FeedForward& ffn, const LayerNorm& norm2);

struct AdamWConfig {
  double lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Decoupled weight decay Adam with bias correction. Moments are kept per
// parameter in registry order.
class AdamW {
 public:
  AdamW(const ParamRegistry& registry, AdamWConfig config);

  // Applies one update from the current gradients. Gradients are left as-is.
  void step(ParamRegistry& registry);

  std::int64_t steps() const { return steps_; }
  const AdamWConfig& config() const { return config_; }

  std::vector<Scalar>& first_moment(std::size_t i) { return m_.at(i); }
  std::vector<Scalar>& second_moment(std::size_t i) { return v_.at(i); }
  const std::vector<Scalar>& first_moment(std::size_t i) const { return m_.at(i); }
  const std::vector<Scalar>& second_moment(std::size_t i) const { return v_.at(i); }
  void set_steps(std::int64_t steps) { steps_ = steps; }

 private:
  AdamWConfig config_;
  std::int64_t steps_ = 0;
  std::vector<std::string> names_;
  std::vector<std::vector<Scalar>> m_;
  std::vector<std::vector<Scalar>> v_;
};

MCM_END_NAMESPACE
