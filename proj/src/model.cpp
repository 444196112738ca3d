#include "pht/model.hpp"

#include <cmath>
#include <numeric>

#include "pht/checkpoint.hpp"
#include "pht/errors.hpp"
#include "pht/special_tokens.hpp"

namespace pht::model {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("invalid model config: " + what);
}

bool valid_rate(double r) { return r >= 0.0 && r < 1.0; }

double resolve(double site, double fallback) { return site < 0.0 ? fallback : site; }

}  // namespace

void ModelConfig::validate() const {
  require(vocab_size > 0, "vocab_size must be positive");
  require(model_dim > 0 && ffn_dim > 0 && num_heads > 0 && num_layers > 0, "dimensions must be positive");
  require(model_dim % num_heads == 0, "model_dim must be divisible by num_heads");
  require(max_paragraphs > 0 && max_paragraph_len > 0 && max_target_len > 0, "length bounds must be positive");
  require(valid_rate(dropout_rate), "dropout_rate must lie in [0, 1)");
  for (double r : {attention_dropout, residual_dropout, ffn_dropout}) {
    require(r < 0.0 || valid_rate(r), "site dropout must lie in [0, 1) or be negative");
  }
  require(label_smoothing >= 0.0 && label_smoothing < 1.0, "label_smoothing must lie in [0, 1)");
}

ModelConfig ModelConfig::full_scale() {
  ModelConfig c;
  c.model_dim = 256;
  c.ffn_dim = 1024;
  c.num_heads = 4;
  c.num_layers = 3;
  c.max_paragraphs = 30;
  c.max_paragraph_len = 100;
  c.max_target_len = 200;
  return c;
}

KeyValueDoc ModelConfig::to_doc() const {
  KeyValueDoc doc;
  doc.set("schema_version", kConfigSchemaVersion);
  doc.set("vocab_size", static_cast<std::uint64_t>(vocab_size));
  doc.set("model_dim", static_cast<std::uint64_t>(model_dim));
  doc.set("ffn_dim", static_cast<std::uint64_t>(ffn_dim));
  doc.set("num_heads", static_cast<std::uint64_t>(num_heads));
  doc.set("num_layers", static_cast<std::uint64_t>(num_layers));
  doc.set("max_paragraphs", static_cast<std::uint64_t>(max_paragraphs));
  doc.set("max_paragraph_len", static_cast<std::uint64_t>(max_paragraph_len));
  doc.set("max_target_len", static_cast<std::uint64_t>(max_target_len));
  doc.set("dropout_rate", dropout_rate);
  doc.set("attention_dropout", attention_dropout);
  doc.set("residual_dropout", residual_dropout);
  doc.set("ffn_dropout", ffn_dropout);
  doc.set("label_smoothing", label_smoothing);
  doc.set("title_as_paragraph", title_as_paragraph);
  doc.set("seed", seed);
  return doc;
}

ModelConfig ModelConfig::from_doc(const KeyValueDoc& doc) {
  const auto version = doc.get_int("schema_version");
  if (version != kConfigSchemaVersion) {
    throw ConfigError("unsupported model config schema " + std::to_string(version));
  }
  ModelConfig c;
  auto size = [&](const char* key, std::size_t& field) {
    if (doc.contains(key)) field = static_cast<std::size_t>(doc.get_uint(key));
  };
  auto real = [&](const char* key, double& field) {
    if (doc.contains(key)) field = doc.get_double(key);
  };
  size("vocab_size", c.vocab_size);
  size("model_dim", c.model_dim);
  size("ffn_dim", c.ffn_dim);
  size("num_heads", c.num_heads);
  size("num_layers", c.num_layers);
  size("max_paragraphs", c.max_paragraphs);
  size("max_paragraph_len", c.max_paragraph_len);
  size("max_target_len", c.max_target_len);
  real("dropout_rate", c.dropout_rate);
  real("attention_dropout", c.attention_dropout);
  real("residual_dropout", c.residual_dropout);
  real("ffn_dropout", c.ffn_dropout);
  real("label_smoothing", c.label_smoothing);
  if (doc.contains("title_as_paragraph")) c.title_as_paragraph = doc.get_bool("title_as_paragraph");
  if (doc.contains("seed")) c.seed = doc.get_uint("seed");
  c.validate();
  return c;
}

nn::RunContext make_run_context(const ModelConfig& config, bool training, std::mt19937_64* rng) {
  nn::RunContext ctx;
  ctx.training = training;
  ctx.rng = rng;
  ctx.attention_dropout = resolve(config.attention_dropout, config.dropout_rate);
  ctx.residual_dropout = resolve(config.residual_dropout, config.dropout_rate);
  ctx.ffn_dropout = resolve(config.ffn_dropout, config.dropout_rate);
  return ctx;
}

SourceDocument make_source(const std::vector<int>& title, const std::vector<std::vector<int>>& paragraphs,
                           bool title_as_paragraph) {
  SourceDocument src;
  if (title_as_paragraph && !title.empty()) src.paragraphs.push_back(title);
  src.paragraphs.insert(src.paragraphs.end(), paragraphs.begin(), paragraphs.end());
  src.ranks.resize(src.paragraphs.size());
  std::iota(src.ranks.begin(), src.ranks.end(), 0);
  return src;
}

Tensor EncodedSource::paragraph_contexts(std::size_t p) const {
  if (p >= num_paragraphs()) throw ContractError("paragraph index out of range");
  const std::size_t d = word_contexts.dim(2);
  Tensor row = reshape(slice(word_contexts, 0, p, 1), {padded_length(), d});
  return slice(row, 0, 0, paragraph_lengths[p]);
}

PhtModel::PhtModel(const ModelConfig& config) : config_(config), counters_(std::make_shared<Counters>()) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  const std::size_t d = config_.model_dim;
  const std::size_t h = config_.num_heads;
  embedding_ = params_.add("embedding", nn::xavier_uniform(config_.vocab_size, d, rng));
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    const std::string p = "encoder." + std::to_string(l);
    encoder_.push_back({nn::make_attention(params_, p + ".self_attention", d, h, rng),
                        nn::make_layer_norm(params_, p + ".attention_norm", d),
                        nn::make_feed_forward(params_, p + ".ffn", d, config_.ffn_dim, rng),
                        nn::make_layer_norm(params_, p + ".ffn_norm", d)});
  }
  pool_project_ = nn::make_linear(params_, "pool.project", d, d, rng, false);
  pool_score_ = nn::make_linear(params_, "pool.score", d / h, 1, rng, false);
  pool_output_ = nn::make_linear(params_, "pool.output", d, d, rng, false);
  pool_ffn_ = nn::make_feed_forward(params_, "pool.ffn", d, config_.ffn_dim, rng);
  pool_norm_ = nn::make_layer_norm(params_, "pool.norm", d);
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    const std::string p = "decoder." + std::to_string(l);
    decoder_.push_back({nn::make_attention(params_, p + ".self_attention", d, h, rng),
                        nn::make_layer_norm(params_, p + ".self_norm", d),
                        nn::make_attention(params_, p + ".paragraph_attention", d, h, rng),
                        nn::make_attention(params_, p + ".word_attention", d, h, rng),
                        nn::make_layer_norm(params_, p + ".cross_norm", d),
                        nn::make_feed_forward(params_, p + ".ffn", d, config_.ffn_dim, rng),
                        nn::make_layer_norm(params_, p + ".ffn_norm", d)});
  }
}

// (len, d) token embeddings scaled by sqrt(d).
Tensor PhtModel::embed(const std::vector<int>& ids) const {
  return scale(embedding(embedding_, ids), std::sqrt(static_cast<double>(config_.model_dim)));
}

Tensor PhtModel::run_encoder(Tensor x, const Tensor& mask, const nn::RunContext& ctx) const {
  for (const EncoderLayer& layer : encoder_) {
    Tensor a = layer.self_attention(x, x, mask, ctx).context;
    x = layer.attention_norm(add(x, ctx.drop(a, ctx.residual_dropout)));
    Tensor f = layer.ffn(x, ctx);
    x = layer.ffn_norm(add(x, ctx.drop(f, ctx.residual_dropout)));
  }
  return x;
}

// contexts: (m, n, d); mask: (m, 1, 1, n) or undefined. Returns (m, d).
Tensor PhtModel::pool(const Tensor& contexts, const Tensor& mask, const nn::RunContext& ctx,
                      Tensor* head_weights) const {
  const std::size_t m = contexts.dim(0);
  const std::size_t n = contexts.dim(1);
  const std::size_t d = config_.model_dim;
  const std::size_t h = config_.num_heads;
  Tensor heads = nn::split_heads(pool_project_(contexts), h);  // (m, h, n, dh)
  Tensor scores = transpose(pool_score_(heads));               // (m, h, 1, n)
  if (mask.defined()) scores = add(scores, mask);
  Tensor weights = softmax(scores, -1);
  if (head_weights != nullptr) *head_weights = reshape(weights, {m, h, n});
  Tensor merged = reshape(matmul(weights, heads), {m, d});
  Tensor x = pool_output_(merged);
  Tensor f = pool_ffn_(x, ctx);
  return pool_norm_(add(x, ctx.drop(f, ctx.residual_dropout)));
}

ParagraphEncoding PhtModel::encode_paragraph(std::span<const int> tokens, const nn::RunContext& ctx) const {
  const std::size_t d = config_.model_dim;
  std::size_t n = tokens.size();
  if (n > config_.max_paragraph_len) {
    counters_->tokens += n - config_.max_paragraph_len;
    n = config_.max_paragraph_len;
  }
  if (n == 0) return {Tensor::zeros({0, d}), true};
  std::vector<int> ids(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(n));
  Tensor x = add(embed(ids), nn::sinusoidal_encoding(n, d));
  x = ctx.drop(reshape(x, {1, n, d}), ctx.residual_dropout);
  return {reshape(run_encoder(x, Tensor(), ctx), {n, d}), false};
}

PooledParagraph PhtModel::pool_paragraph(const Tensor& contexts, const nn::RunContext& ctx) const {
  const std::size_t d = config_.model_dim;
  if (contexts.rank() != 2 || contexts.dim(1) != d) {
    throw DimensionError("pool_paragraph expects (n x " + std::to_string(d) + "), got " +
                         shape_str(contexts.shape()));
  }
  const std::size_t n = contexts.dim(0);
  if (n == 0) return {Tensor::zeros({d}), true, Tensor::zeros({config_.num_heads, 0})};
  PooledParagraph out;
  Tensor weights;
  out.embedding = reshape(pool(reshape(contexts, {1, n, d}), Tensor(), ctx, &weights), {d});
  out.head_weights = reshape(weights, {config_.num_heads, n});
  return out;
}

Tensor PhtModel::add_ranking_encoding(const Tensor& phi, std::span<const std::size_t> ranks) const {
  if (phi.rank() != 2 || phi.dim(0) != ranks.size()) {
    throw DimensionError("ranking encoding: " + std::to_string(ranks.size()) + " ranks for Φ of shape " +
                         shape_str(phi.shape()));
  }
  return add(phi, nn::sinusoidal_encoding(ranks, phi.dim(1)));
}

EncodedSource PhtModel::encode(const SourceDocument& source, const nn::RunContext& ctx) const {
  if (source.paragraphs.size() != source.ranks.size()) {
    throw ContractError("source needs one rank per paragraph");
  }
  if (source.paragraphs.empty()) throw InputError("source has no paragraphs");
  const std::size_t d = config_.model_dim;
  std::size_t m = source.paragraphs.size();
  if (m > config_.max_paragraphs) {
    counters_->paragraphs += m - config_.max_paragraphs;
    m = config_.max_paragraphs;
  }

  EncodedSource out;
  out.ranks.assign(source.ranks.begin(), source.ranks.begin() + static_cast<std::ptrdiff_t>(m));
  std::size_t n = 1;
  bool any = false;
  for (std::size_t p = 0; p < m; ++p) {
    std::size_t len = source.paragraphs[p].size();
    if (len > config_.max_paragraph_len) {
      counters_->tokens += len - config_.max_paragraph_len;
      len = config_.max_paragraph_len;
    }
    out.paragraph_lengths.push_back(len);
    out.paragraph_present.push_back(len > 0);
    any = any || len > 0;
    n = std::max(n, len);
  }
  if (!any) throw InputError("source has no tokens");

  std::vector<int> ids(m * n, kPadId);
  std::vector<double> token_mask(m * n, nn::kMaskValue);
  std::vector<double> para_mask(m, nn::kMaskValue);
  std::vector<double> present(m, 0.0);
  for (std::size_t p = 0; p < m; ++p) {
    for (std::size_t i = 0; i < out.paragraph_lengths[p]; ++i) {
      ids[p * n + i] = source.paragraphs[p][i];
      token_mask[p * n + i] = 0.0;
    }
    if (out.paragraph_present[p]) {
      para_mask[p] = 0.0;
      present[p] = 1.0;
    }
  }
  out.token_mask = Tensor({m, 1, 1, n}, std::move(token_mask));
  out.paragraph_mask = Tensor({1, 1, m}, std::move(para_mask));

  Tensor x = add(reshape(embed(ids), {m, n, d}), nn::sinusoidal_encoding(n, d));
  x = ctx.drop(x, ctx.residual_dropout);
  out.word_contexts = run_encoder(x, out.token_mask, ctx);
  Tensor phi = pool(out.word_contexts, out.token_mask, ctx, nullptr);
  phi = mul(phi, Tensor({m, 1}, std::move(present)));
  out.paragraph_embeddings = add_ranking_encoding(phi, out.ranks);
  return out;
}

DecoderMemory PhtModel::prepare(const EncodedSource& source) const {
  DecoderMemory mem;
  mem.num_paragraphs = source.num_paragraphs();
  mem.token_mask = source.token_mask;
  mem.paragraph_mask = source.paragraph_mask;
  for (const DecoderLayer& layer : decoder_) {
    mem.paragraph.push_back(layer.paragraph_attention.project(source.paragraph_embeddings));
    mem.word.push_back(layer.word_attention.project(source.word_contexts));
  }
  return mem;
}

DecoderOutput PhtModel::decode(std::span<const int> inputs, const EncodedSource& source,
                               const nn::RunContext& ctx) const {
  return decode(inputs, prepare(source), ctx);
}

DecoderOutput PhtModel::decode(std::span<const int> inputs, const DecoderMemory& memory,
                               const nn::RunContext& ctx) const {
  const std::size_t k = inputs.size();
  const std::size_t d = config_.model_dim;
  const std::size_t m = memory.num_paragraphs;
  if (k == 0) throw ContractError("decode needs a non-empty prefix");
  if (k > config_.max_target_len) {
    throw ContractError("prefix length " + std::to_string(k) + " exceeds max_target_len " +
                        std::to_string(config_.max_target_len));
  }
  std::vector<int> ids(inputs.begin(), inputs.end());
  Tensor x = ctx.drop(add(embed(ids), nn::sinusoidal_encoding(k, d)), ctx.residual_dropout);
  const Tensor causal = nn::causal_mask(k);

  DecoderOutput out;
  for (std::size_t l = 0; l < decoder_.size(); ++l) {
    const DecoderLayer& layer = decoder_[l];
    Tensor s = layer.self_attention(x, x, causal, ctx).context;
    Tensor x1 = layer.self_norm(add(x, ctx.drop(s, ctx.residual_dropout)));

    nn::AttentionOutput para = layer.paragraph_attention.attend(x1, memory.paragraph[l], memory.paragraph_mask, ctx);
    nn::AttentionOutput word = layer.word_attention.attend(x1, memory.word[l], memory.token_mask, ctx);
    // (m, k, d) -> (k, d, m), weighted by A (k, m, 1) over paragraphs.
    Tensor stacked = permute(word.context, {1, 2, 0});
    Tensor fused = reshape(matmul(stacked, reshape(para.mean_weights, {k, m, 1})), {k, d});

    Tensor x2 = layer.cross_norm(
        add(add(x1, ctx.drop(para.context, ctx.residual_dropout)), ctx.drop(fused, ctx.residual_dropout)));
    Tensor f = layer.ffn(x2, ctx);
    x = layer.ffn_norm(add(x2, ctx.drop(f, ctx.residual_dropout)));

    out.paragraph_attention.push_back(para.mean_weights);
    out.word_attention.push_back(word.mean_weights);
    out.word_contexts.push_back(word.context);
    out.fused_contexts.push_back(fused);
    out.paragraph_attention_sum =
        out.paragraph_attention_sum.defined() ? add(out.paragraph_attention_sum, para.mean_weights) : para.mean_weights;
  }
  out.logits = matmul(x, transpose(embedding_));
  return out;
}

void PhtModel::save(const std::filesystem::path& checkpoint) const { save_checkpoint(checkpoint, params_.entries()); }

void PhtModel::load(const std::filesystem::path& checkpoint) { params_.assign(load_checkpoint(checkpoint)); }

Tensor training_loss(const PhtModel& model, const std::vector<TrainingExample>& batch, const nn::RunContext& ctx) {
  if (batch.empty()) throw ContractError("training_loss needs a non-empty batch");
  const ModelConfig& cfg = model.config();
  const double eps = cfg.label_smoothing;
  Tensor total;
  std::size_t tokens = 0;
  for (const TrainingExample& ex : batch) {
    const std::size_t len = std::min(ex.summary.size() + 1, cfg.max_target_len);
    std::vector<int> inputs{kBosId};
    std::vector<int> targets;
    for (std::size_t t = 0; t < len; ++t) {
      if (t + 1 < len) inputs.push_back(ex.summary[t]);
      targets.push_back(t < ex.summary.size() ? ex.summary[t] : kEosId);
    }
    DecoderOutput dec = model.decode(inputs, model.encode(ex.source, ctx), ctx);
    Tensor nll = cross_entropy_sum(dec.logits, targets);
    if (eps > 0.0) {
      const double v = static_cast<double>(cfg.vocab_size);
      Tensor uniform = scale(sum(log_softmax(dec.logits, -1)), -1.0 / v);
      nll = add(scale(nll, 1.0 - eps), scale(uniform, eps));
    }
    total = total.defined() ? add(total, nll) : nll;
    tokens += targets.size();
  }
  return scale(total, 1.0 / static_cast<double>(tokens));
}

}  // namespace pht::model
