#pragma once

// Parallel hierarchical summarizer: a shared paragraph encoder with
// multi-head attention pooling, and a decoder whose middle block attends to
// paragraphs and to words in parallel, fusing the word-level contexts with the
// paragraph attention weights.

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <span>
#include <vector>

#include "pht/keyvalue.hpp"
#include "pht/nn.hpp"
#include "pht/tensor.hpp"

namespace pht::model {

inline constexpr std::int64_t kConfigSchemaVersion = 1;

struct ModelConfig {
  std::size_t vocab_size = 2000;
  std::size_t model_dim = 64;
  std::size_t ffn_dim = 256;
  std::size_t num_heads = 4;
  std::size_t num_layers = 2;
  std::size_t max_paragraphs = 8;
  std::size_t max_paragraph_len = 40;
  std::size_t max_target_len = 60;
  double dropout_rate = 0.3;
  // Per-site overrides; negative means "use dropout_rate".
  double attention_dropout = -1.0;
  double residual_dropout = -1.0;
  double ffn_dropout = -1.0;
  double label_smoothing = 0.0;
  bool title_as_paragraph = true;
  std::uint64_t seed = 1;

  // ConfigError on any violated bound.
  void validate() const;
  static ModelConfig full_scale();

  KeyValueDoc to_doc() const;
  // Missing keys keep their defaults; a schema mismatch is a ConfigError.
  static ModelConfig from_doc(const KeyValueDoc& doc);
};

nn::RunContext make_run_context(const ModelConfig& config, bool training, std::mt19937_64* rng);

// Paragraphs in storage order; ranks[i] is the rank attached to paragraphs[i].
struct SourceDocument {
  std::vector<std::vector<int>> paragraphs;
  std::vector<std::size_t> ranks;
};

// Ranks 0..m-1 in storage order, with the title (when non-empty and enabled)
// as rank 0.
SourceDocument make_source(const std::vector<int>& title, const std::vector<std::vector<int>>& paragraphs,
                           bool title_as_paragraph);

struct EncodedSource {
  Tensor word_contexts;         // (m, n, d); row p is C_p padded to n
  Tensor paragraph_embeddings;  // (m, d), ranking encoding added
  Tensor token_mask;            // (m, 1, 1, n) additive: 0 or kMaskValue
  Tensor paragraph_mask;        // (1, 1, m) additive
  std::vector<std::size_t> paragraph_lengths;
  std::vector<bool> paragraph_present;  // false for fully masked paragraphs
  std::vector<std::size_t> ranks;

  std::size_t num_paragraphs() const { return paragraph_lengths.size(); }
  std::size_t padded_length() const { return word_contexts.dim(1); }
  // C_p without padding rows: (len_p, d).
  Tensor paragraph_contexts(std::size_t p) const;
};

struct ParagraphEncoding {
  Tensor contexts;  // (n, d); zero rows for an empty paragraph
  bool fully_masked = false;
};

struct PooledParagraph {
  Tensor embedding;  // (d)
  bool fully_masked = false;
  Tensor head_weights;  // (h, n), one softmax over tokens per head
};

// Per-layer cross-attention keys and values, computed once per source.
struct DecoderMemory {
  std::vector<nn::ProjectedMemory> paragraph;  // (h, m, dh)
  std::vector<nn::ProjectedMemory> word;       // (m, h, n, dh)
  Tensor token_mask;
  Tensor paragraph_mask;
  std::size_t num_paragraphs = 0;
};

struct DecoderOutput {
  Tensor logits;                                // (k, V)
  std::vector<Tensor> paragraph_attention;      // per layer (k, m), head-averaged
  Tensor paragraph_attention_sum;               // (k, m), summed over layers
  std::vector<Tensor> word_attention;           // per layer (m, k, n), head-averaged
  std::vector<Tensor> word_contexts;            // per layer (m, k, d)
  std::vector<Tensor> fused_contexts;           // per layer (k, d)
};

struct TrainingExample {
  SourceDocument source;
  std::vector<int> summary;  // without BOS/EOS
};

class PhtModel {
 public:
  explicit PhtModel(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  nn::ParameterSet& parameters() { return params_; }
  const nn::ParameterSet& parameters() const { return params_; }

  // Tokens beyond max_paragraph_len are dropped and counted.
  ParagraphEncoding encode_paragraph(std::span<const int> tokens, const nn::RunContext& ctx = {}) const;
  PooledParagraph pool_paragraph(const Tensor& contexts, const nn::RunContext& ctx = {}) const;
  Tensor add_ranking_encoding(const Tensor& phi, std::span<const std::size_t> ranks) const;

  // Paragraphs beyond max_paragraphs are dropped and counted. At least one
  // paragraph must contain a token.
  EncodedSource encode(const SourceDocument& source, const nn::RunContext& ctx = {}) const;
  DecoderMemory prepare(const EncodedSource& source) const;

  // `inputs` starts with BOS; logits row t scores the token after inputs[t].
  DecoderOutput decode(std::span<const int> inputs, const EncodedSource& source,
                       const nn::RunContext& ctx = {}) const;
  DecoderOutput decode(std::span<const int> inputs, const DecoderMemory& memory,
                       const nn::RunContext& ctx = {}) const;

  std::size_t truncated_paragraphs() const { return counters_->paragraphs.load(); }
  std::size_t truncated_tokens() const { return counters_->tokens.load(); }

  void save(const std::filesystem::path& checkpoint) const;
  void load(const std::filesystem::path& checkpoint);

 private:
  struct EncoderLayer {
    nn::MultiHeadAttention self_attention;
    nn::LayerNorm attention_norm;
    nn::FeedForward ffn;
    nn::LayerNorm ffn_norm;
  };
  struct DecoderLayer {
    nn::MultiHeadAttention self_attention;
    nn::LayerNorm self_norm;
    nn::MultiHeadAttention paragraph_attention;
    nn::MultiHeadAttention word_attention;
    nn::LayerNorm cross_norm;
    nn::FeedForward ffn;
    nn::LayerNorm ffn_norm;
  };
  struct Counters {
    std::atomic<std::size_t> paragraphs{0};
    std::atomic<std::size_t> tokens{0};
  };

  Tensor embed(const std::vector<int>& ids) const;
  Tensor run_encoder(Tensor x, const Tensor& mask, const nn::RunContext& ctx) const;
  Tensor pool(const Tensor& contexts, const Tensor& mask, const nn::RunContext& ctx, Tensor* head_weights) const;

  ModelConfig config_;
  nn::ParameterSet params_;
  Tensor embedding_;  // (V, d), shared by encoder, decoder and output
  std::vector<EncoderLayer> encoder_;
  nn::Linear pool_project_;  // W1
  nn::Linear pool_score_;    // W2, (dh, 1) shared across heads
  nn::Linear pool_output_;   // W3
  nn::FeedForward pool_ffn_;
  nn::LayerNorm pool_norm_;
  std::vector<DecoderLayer> decoder_;
  std::shared_ptr<Counters> counters_;
};

// Mean token-level NLL over the batch with targets [summary..., EOS] and
// inputs [BOS, summary...], truncated to max_target_len.
Tensor training_loss(const PhtModel& model, const std::vector<TrainingExample>& batch,
                     const nn::RunContext& ctx = {});

}  // namespace pht::model
