#pragma once

// Transformer building blocks shared by the summarizer and the attention
// predictor. Parameters are owned by a ParameterSet so a model can be
// checkpointed and optimized as one ordered list.

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "pht/checkpoint.hpp"
#include "pht/tensor.hpp"

namespace pht::nn {

inline constexpr double kLayerNormEps = 1e-6;
inline constexpr double kMaskValue = -1e9;

class ParameterSet {
 public:
  // Registers a trainable tensor; names must be unique.
  Tensor& add(const std::string& name, Tensor value);
  const Tensor& get(const std::string& name) const;

  const std::vector<NamedTensor>& entries() const { return entries_; }
  std::vector<Tensor> tensors() const;
  std::size_t count_values() const;
  void zero_grad();

  // Copies values from `source` by name; every parameter must be present with
  // an identical shape.
  void assign(const std::vector<NamedTensor>& source);

 private:
  std::vector<NamedTensor> entries_;
};

// Forward-pass switches. Dropout draws from `rng` only when training.
struct RunContext {
  bool training = false;
  std::mt19937_64* rng = nullptr;
  double attention_dropout = 0.0;
  double residual_dropout = 0.0;
  double ffn_dropout = 0.0;

  Tensor drop(const Tensor& x, double rate) const;
};

// Uniform Glorot initialization for a (fan_in x fan_out) matrix.
Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);

// Row i is the sinusoid at positions[i]: sin on even columns, cos on odd.
Tensor sinusoidal_encoding(std::span<const std::size_t> positions, std::size_t dim);
Tensor sinusoidal_encoding(std::size_t length, std::size_t dim);

struct Linear {
  Tensor weight;  // (in x out)
  Tensor bias;    // (out), undefined when the map has no bias

  Tensor operator()(const Tensor& x) const;
};

Linear make_linear(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out,
                   std::mt19937_64& rng, bool with_bias = true);

struct LayerNorm {
  Tensor gain;
  Tensor bias;

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias, kLayerNormEps); }
};

LayerNorm make_layer_norm(ParameterSet& params, const std::string& name, std::size_t dim);

// Two-layer ReLU network.
struct FeedForward {
  Linear inner;
  Linear outer;

  Tensor operator()(const Tensor& x, const RunContext& ctx) const;
};

FeedForward make_feed_forward(ParameterSet& params, const std::string& name, std::size_t dim,
                              std::size_t hidden, std::mt19937_64& rng);

// Keys and values already projected and split into heads: (..., h, s, dh).
struct ProjectedMemory {
  Tensor keys;
  Tensor values;
};

struct AttentionOutput {
  Tensor context;       // (..., q, d)
  Tensor mean_weights;  // (..., q, s), averaged over heads
};

struct MultiHeadAttention {
  Linear query;
  Linear key;
  Linear value;
  Linear output;
  std::size_t heads = 1;

  ProjectedMemory project(const Tensor& memory) const;
  // `mask` is additive and broadcastable to (..., h, q, s); pass an undefined
  // tensor for no mask.
  AttentionOutput attend(const Tensor& queries, const ProjectedMemory& memory, const Tensor& mask,
                         const RunContext& ctx) const;
  AttentionOutput operator()(const Tensor& queries, const Tensor& memory, const Tensor& mask,
                             const RunContext& ctx) const {
    return attend(queries, project(memory), mask, ctx);
  }
};

MultiHeadAttention make_attention(ParameterSet& params, const std::string& name, std::size_t dim,
                                  std::size_t heads, std::mt19937_64& rng);

// (..., n, d) -> (..., h, n, d/h)
Tensor split_heads(const Tensor& x, std::size_t heads);
// (..., h, n, dh) -> (..., n, h*dh)
Tensor merge_heads(const Tensor& x);

// Additive (q x q) mask hiding later positions.
Tensor causal_mask(std::size_t length);

}  // namespace pht::nn
