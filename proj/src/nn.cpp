#include "mcm/nn.hpp"

#include <cmath>
#include <random>

#include "mcm/random.hpp"

MCM_BEGIN_NAMESPACE

Tensor ParamRegistry::add(std::string name, Shape shape, ParamKind kind) {
  if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
  Tensor t = Tensor::zeros(std::move(shape), true);
  index_.emplace(name, entries_.size());
  entries_.push_back({std::move(name), t, kind});
  return t;
}

bool ParamRegistry::contains(std::string_view name) const { return index_.count(std::string(name)) > 0; }

const Tensor& ParamRegistry::get(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ContractError("unknown parameter: " + std::string(name));
  return entries_[it->second].tensor;
}

Tensor& ParamRegistry::get(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ContractError("unknown parameter: " + std::string(name));
  return entries_[it->second].tensor;
}

std::size_t ParamRegistry::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

void ParamRegistry::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

void init_params(ParamRegistry& registry, std::uint64_t seed) {
  Rng rng(seed);
  auto truncated = [&](double std_dev) {
    // Resample outside two standard deviations.
    for (;;) {
      double z = standard_normal(rng);
      if (std::abs(z) <= 2.0) return z * std_dev;
    }
  };
  for (auto& entry : registry.entries()) {
    auto data = entry.tensor.mutable_data();
    switch (entry.kind) {
      case ParamKind::kWeight:
      case ParamKind::kEmbedding:
        for (auto& v : data) v = static_cast<Scalar>(truncated(0.02));
        break;
      case ParamKind::kBias:
      case ParamKind::kNormBias:
        for (auto& v : data) v = Scalar{0};
        break;
      case ParamKind::kNormGain:
        for (auto& v : data) v = Scalar{1};
        break;
      case ParamKind::kToken:
        for (auto& v : data) v = static_cast<Scalar>(standard_normal(rng));
        break;
    }
  }
}

LinearLayer LinearLayer::create(ParamRegistry& reg, const std::string& prefix, std::size_t in,
                                std::size_t out) {
  LinearLayer l;
  l.weight = reg.add(prefix + ".weight", {in, out}, ParamKind::kWeight);
  l.bias = reg.add(prefix + ".bias", {out}, ParamKind::kBias);
  return l;
}

Tensor LinearLayer::forward(const Tensor& x) const {
  if (x.size(-1) != in_features()) {
    throw DimensionError("linear: input width " + std::to_string(x.size(-1)) + " != " +
                         std::to_string(in_features()));
  }
  return add(matmul(x, weight), bias);
}

LayerNorm LayerNorm::create(ParamRegistry& reg, const std::string& prefix, std::size_t width) {
  LayerNorm n;
  n.gain = reg.add(prefix + ".gain", {width}, ParamKind::kNormGain);
  n.bias = reg.add(prefix + ".bias", {width}, ParamKind::kNormBias);
  return n;
}

FeedForward FeedForward::create(ParamRegistry& reg, const std::string& prefix, std::size_t width,
                                std::size_t hidden) {
  FeedForward f;
  f.in = LinearLayer::create(reg, prefix + ".fc1", width, hidden);
  f.out = LinearLayer::create(reg, prefix + ".fc2", hidden, width);
  return f;
}

Tensor FeedForward::forward(const Tensor& x) const { return out.forward(gelu(in.forward(x))); }

MultiHeadAttention MultiHeadAttention::create(ParamRegistry& reg, const std::string& prefix,
                                              std::size_t width, std::size_t heads, AttnScale scale) {
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("attention width " + std::to_string(width) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  MultiHeadAttention a;
  a.name = prefix;
  a.heads = heads;
  a.scale_mode = scale;
  a.query = LinearLayer::create(reg, prefix + ".q", width, width);
  a.key = LinearLayer::create(reg, prefix + ".k", width, width);
  a.value = LinearLayer::create(reg, prefix + ".v", width, width);
  a.merge = LinearLayer::create(reg, prefix + ".o", width, width);
  return a;
}

Tensor MultiHeadAttention::forward(const Tensor& q_seq, const Tensor& kv_seq) const {
  const std::size_t e = width();
  if (q_seq.dim() != 3 || kv_seq.dim() != 3 || q_seq.size(2) != e || kv_seq.size(2) != e ||
      q_seq.size(0) != kv_seq.size(0)) {
    throw DimensionError("attention " + name + ": expected [b, L, " + std::to_string(e) +
                         "] inputs, got " + shape_str(q_seq.shape()) + " and " +
                         shape_str(kv_seq.shape()));
  }
  Tensor q, k, v;
  {
    MacTag tag(name + ".proj");
    q = split_heads(query.forward(q_seq), heads);
    k = split_heads(key.forward(kv_seq), heads);
    v = split_heads(value.forward(kv_seq), heads);
  }
  const double denom = scale_mode == AttnScale::kPerHead ? static_cast<double>(e / heads) : static_cast<double>(e);
  Tensor mixed;
  {
    MacTag tag(name + ".core");
    Tensor scores = scale(matmul(q, transpose_last2(k)), static_cast<Scalar>(1.0 / std::sqrt(denom)));
    mixed = matmul(softmax_lastdim(scores), v);
  }
  MacTag tag(name + ".proj");
  return merge.forward(merge_heads(mixed));
}

Tensor residual_block(const Tensor& x, const Tensor& attended, const LayerNorm& norm1,
                      const FeedForward& ffn, const LayerNorm& norm2) {
  Tensor h = norm1.forward(add(x, attended));
  return norm2.forward(add(h, ffn.forward(h)));
}

AdamW::AdamW(const ParamRegistry& registry, AdamWConfig config) : config_(config) {
  for (const auto& e : registry.entries()) {
    names_.push_back(e.name);
    m_.emplace_back(e.tensor.numel(), Scalar{0});
    v_.emplace_back(e.tensor.numel(), Scalar{0});
  }
}

void AdamW::step(ParamRegistry& registry) {
  auto& entries = registry.entries();
  if (entries.size() != names_.size()) throw ContractError("optimizer state does not match the registry");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].name != names_[i] || entries[i].tensor.numel() != m_[i].size()) {
      throw ContractError("optimizer state does not match parameter " + entries[i].name);
    }
    if (!entries[i].tensor.has_grad()) throw ContractError("missing gradient for parameter " + entries[i].name);
  }
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double bc1 = 1.0 - std::pow(config_.beta1, t);
  const double bc2 = 1.0 - std::pow(config_.beta2, t);
  const double decay = 1.0 - config_.lr * config_.weight_decay;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto theta = entries[i].tensor.mutable_data();
    auto grad = entries[i].tensor.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double g = grad[j];
      const double mj = config_.beta1 * m[j] + (1.0 - config_.beta1) * g;
      const double vj = config_.beta2 * v[j] + (1.0 - config_.beta2) * g * g;
      m[j] = static_cast<Scalar>(mj);
      v[j] = static_cast<Scalar>(vj);
      const double mhat = mj / bc1;
      const double vhat = vj / bc2;
      double p = static_cast<double>(theta[j]) * decay;
      p -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
      theta[j] = static_cast<Scalar>(p);
    }
  }
}

MCM_END_NAMESPACE
