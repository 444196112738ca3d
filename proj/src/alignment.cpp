#include "pht/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "pht/checkpoint.hpp"
#include "pht/errors.hpp"
#include "pht/optim.hpp"
#include "pht/seeding.hpp"
#include "pht/special_tokens.hpp"

namespace pht::align {

std::vector<double> normalize_mass(std::span<const double> column_sums, const std::vector<bool>& present) {
  if (!present.empty() && present.size() != column_sums.size()) {
    throw ContractError("paragraph mask length does not match attention width");
  }
  std::vector<double> eta(column_sums.begin(), column_sums.end());
  double total = 0.0;
  for (std::size_t p = 0; p < eta.size(); ++p) {
    if (!present.empty() && !present[p]) eta[p] = 0.0;
    if (eta[p] < 0.0 || !std::isfinite(eta[p])) throw ContractError("attention mass must be finite and non-negative");
    total += eta[p];
  }
  if (!(total > 0.0)) throw ContractError("cannot normalize an all-zero attention matrix");
  for (double& e : eta) e /= total;
  return eta;
}

std::vector<double> extract_label(const Tensor& attention, const std::vector<bool>& present) {
  if (attention.rank() != 2) throw DimensionError("attention must be (k x m), got " + shape_str(attention.shape()));
  const std::size_t k = attention.dim(0), m = attention.dim(1);
  std::vector<double> sums(m, 0.0);
  for (std::size_t t = 0; t < k; ++t) {
    for (std::size_t p = 0; p < m; ++p) sums[p] += attention.data()[t * m + p];
  }
  return normalize_mass(sums, present);
}

double att_align_score(std::span<const double> eta_y, std::span<const double> eta_hat) {
  if (eta_y.size() != eta_hat.size()) {
    throw ContractError("alignment needs distributions of equal length, got " + std::to_string(eta_y.size()) +
                        " and " + std::to_string(eta_hat.size()));
  }
  double score = 0.0;
  for (std::size_t p = 0; p < eta_y.size(); ++p) {
    score += std::log(std::max(std::min(eta_y[p], eta_hat[p]), kAlignFloor));
  }
  return score;
}

double mean_squared_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw ContractError("mean_squared_error needs equal non-empty inputs");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

TeacherForcedLabel label_from_model(const model::PhtModel& model, const model::TrainingExample& example) {
  NoGradGuard no_grad;
  const model::EncodedSource enc = model.encode(example.source);
  std::vector<int> inputs{kBosId};
  for (int t : example.summary) {
    if (inputs.size() >= model.config().max_target_len) break;
    inputs.push_back(t);
  }
  const model::DecoderOutput out = model.decode(inputs, enc);
  return {extract_label(out.paragraph_attention_sum, enc.paragraph_present), enc.paragraph_embeddings.detach(),
          enc.paragraph_present};
}

// ---------------------------------------------------------------------------

void PredictorConfig::validate() const {
  if (model_dim == 0 || ffn_dim == 0 || num_heads == 0 || num_layers == 0) {
    throw ConfigError("predictor dimensions must be positive");
  }
  if (model_dim % num_heads != 0) throw ConfigError("predictor model_dim must be divisible by num_heads");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("predictor dropout must lie in [0, 1)");
}

KeyValueDoc PredictorConfig::to_doc() const {
  KeyValueDoc doc;
  doc.set("schema_version", model::kConfigSchemaVersion);
  doc.set("model_dim", static_cast<std::uint64_t>(model_dim));
  doc.set("ffn_dim", static_cast<std::uint64_t>(ffn_dim));
  doc.set("num_heads", static_cast<std::uint64_t>(num_heads));
  doc.set("num_layers", static_cast<std::uint64_t>(num_layers));
  doc.set("dropout_rate", dropout_rate);
  doc.set("seed", seed);
  return doc;
}

PredictorConfig PredictorConfig::from_doc(const KeyValueDoc& doc) {
  if (doc.get_int("schema_version") != model::kConfigSchemaVersion) {
    throw ConfigError("unsupported predictor config schema");
  }
  PredictorConfig c;
  c.model_dim = doc.get_uint("model_dim");
  c.ffn_dim = doc.get_uint("ffn_dim");
  c.num_heads = doc.get_uint("num_heads");
  c.num_layers = doc.get_uint("num_layers");
  c.dropout_rate = doc.get_double("dropout_rate");
  c.seed = doc.get_uint("seed");
  c.validate();
  return c;
}

AttentionPredictor::AttentionPredictor(const PredictorConfig& config) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  const std::size_t d = config_.model_dim;
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    const std::string p = "predictor." + std::to_string(l);
    layers_.push_back({nn::make_attention(params_, p + ".attention", d, config_.num_heads, rng),
                       nn::make_layer_norm(params_, p + ".attention_norm", d),
                       nn::make_feed_forward(params_, p + ".ffn", d, config_.ffn_dim, rng),
                       nn::make_layer_norm(params_, p + ".ffn_norm", d)});
  }
  head_ = nn::make_linear(params_, "predictor.head", d, 1, rng);
}

Tensor AttentionPredictor::forward(const Tensor& phi, const std::vector<bool>& present,
                                   const nn::RunContext& ctx) const {
  if (phi.rank() != 2 || phi.dim(1) != config_.model_dim) {
    throw DimensionError("predictor expects (m x " + std::to_string(config_.model_dim) + "), got " +
                         shape_str(phi.shape()));
  }
  const std::size_t m = phi.dim(0);
  if (m == 0) throw ContractError("predictor needs at least one paragraph");
  if (!present.empty() && present.size() != m) throw ContractError("paragraph mask length mismatch");

  Tensor mask;
  std::vector<double> logit_mask(m, 0.0);
  if (!present.empty()) {
    if (std::none_of(present.begin(), present.end(), [](bool b) { return b; })) {
      throw ContractError("predictor needs at least one present paragraph");
    }
    for (std::size_t p = 0; p < m; ++p) logit_mask[p] = present[p] ? 0.0 : nn::kMaskValue;
    mask = Tensor({1, 1, m}, logit_mask);
  }

  Tensor x = ctx.drop(add(phi, nn::sinusoidal_encoding(m, config_.model_dim)), ctx.residual_dropout);
  for (const Layer& layer : layers_) {
    Tensor a = layer.attention(x, x, mask, ctx).context;
    x = layer.attention_norm(add(x, ctx.drop(a, ctx.residual_dropout)));
    Tensor f = layer.ffn(x, ctx);
    x = layer.ffn_norm(add(x, ctx.drop(f, ctx.residual_dropout)));
  }
  Tensor logits = reshape(head_(x), {m});
  if (mask.defined()) logits = add(logits, Tensor({m}, std::move(logit_mask)));
  return softmax(logits, 0);
}

std::vector<double> AttentionPredictor::predict(const Tensor& phi, const std::vector<bool>& present) const {
  NoGradGuard no_grad;
  const Tensor out = forward(phi, present, {});
  return {out.data().begin(), out.data().end()};
}

void AttentionPredictor::save(const std::filesystem::path& checkpoint) const {
  save_checkpoint(checkpoint, params_.entries());
}

void AttentionPredictor::load(const std::filesystem::path& checkpoint) {
  params_.assign(load_checkpoint(checkpoint));
}

// ---------------------------------------------------------------------------

namespace {

Tensor pair_loss(const AttentionPredictor& predictor, const AlignmentPair& pair, const nn::RunContext& ctx) {
  Tensor pred = predictor.forward(pair.phi, pair.present, ctx);
  if (pair.eta.size() != pred.numel()) throw ContractError("label length does not match paragraph count");
  Tensor diff = sub(pred, Tensor({pair.eta.size()}, pair.eta));
  return mean(mul(diff, diff));
}

}  // namespace

PredictorReport train_predictor(AttentionPredictor& predictor, const std::vector<AlignmentPair>& data,
                                const PredictorTraining& options) {
  if (data.empty()) throw ContractError("train_predictor needs a non-empty dataset");
  if (options.batch_size == 0) throw ConfigError("batch_size must be positive");
  AdamConfig adam;
  adam.base_rate = options.base_rate;
  adam.warmup_steps = options.warmup_steps;
  adam.model_dim = predictor.config().model_dim;
  std::vector<Tensor> params = predictor.parameters().tensors();
  AdamState state = make_adam_state(adam, params);

  const double rate = predictor.config().dropout_rate;
  std::vector<std::size_t> order(data.size());
  std::size_t cursor = order.size();
  std::uint64_t epoch = 0;
  PredictorReport report;
  for (std::size_t step = 1; step <= options.steps; ++step) {
    std::mt19937_64 drop_rng(mix_seed(options.seed, {1, step}));
    nn::RunContext ctx{true, &drop_rng, rate, rate, rate};
    Tensor total;
    const std::size_t batch = std::min(options.batch_size, data.size());
    for (std::size_t b = 0; b < batch; ++b) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 shuffle_rng(mix_seed(options.seed, {0, epoch++}));
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        cursor = 0;
      }
      Tensor l = pair_loss(predictor, data[order[cursor++]], ctx);
      total = total.defined() ? add(total, l) : l;
    }
    Tensor loss = scale(total, 1.0 / static_cast<double>(batch));
    predictor.parameters().zero_grad();
    backward(loss);
    adam_step(params, state);
    report.final_batch_loss = loss.item();
    report.steps = step;
  }
  report.train_mse = dataset_mse(predictor, data);
  return report;
}

double dataset_mse(const AttentionPredictor& predictor, const std::vector<AlignmentPair>& data) {
  if (data.empty()) throw ContractError("dataset_mse needs a non-empty dataset");
  double total = 0.0;
  for (const AlignmentPair& pair : data) total += mean_squared_error(predictor.predict(pair.phi, pair.present), pair.eta);
  return total / static_cast<double>(data.size());
}

double uniform_baseline_mse(const std::vector<AlignmentPair>& data) {
  if (data.empty()) throw ContractError("uniform_baseline_mse needs a non-empty dataset");
  double total = 0.0;
  for (const AlignmentPair& pair : data) {
    const std::size_t m = pair.eta.size();
    std::size_t live = m;
    if (!pair.present.empty()) live = static_cast<std::size_t>(std::count(pair.present.begin(), pair.present.end(), true));
    std::vector<double> uniform(m, 0.0);
    for (std::size_t p = 0; p < m; ++p) {
      if (pair.present.empty() || pair.present[p]) uniform[p] = 1.0 / static_cast<double>(live);
    }
    total += mean_squared_error(uniform, pair.eta);
  }
  return total / static_cast<double>(data.size());
}

}  // namespace pht::align
