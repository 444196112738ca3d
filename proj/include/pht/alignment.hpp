#pragma once

// Paragraph-attention labels, the attention predictor that learns them from
// paragraph embeddings, and the alignment score used to rerank candidates.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "pht/keyvalue.hpp"
#include "pht/model.hpp"
#include "pht/nn.hpp"
#include "pht/tensor.hpp"

namespace pht::align {

inline constexpr double kAlignFloor = 1e-12;

// Column sums of `attention` (k x m) normalized to a distribution. Entries
// with present[p] == false are forced to zero; an empty `present` keeps all.
// ContractError when the retained mass is zero.
std::vector<double> extract_label(const Tensor& attention, const std::vector<bool>& present = {});
std::vector<double> normalize_mass(std::span<const double> column_sums, const std::vector<bool>& present = {});

// sum_p log(max(min(eta_y[p], eta_hat[p]), kAlignFloor))
double att_align_score(std::span<const double> eta_y, std::span<const double> eta_hat);

double mean_squared_error(std::span<const double> a, std::span<const double> b);

struct TeacherForcedLabel {
  std::vector<double> eta;
  Tensor phi;  // (m, d) paragraph embeddings after ranking encoding, detached
  std::vector<bool> present;
};

// Runs the reference summary through the model (eval mode, no tape) and
// normalizes the layer-summed paragraph attention.
TeacherForcedLabel label_from_model(const model::PhtModel& model, const model::TrainingExample& example);

struct PredictorConfig {
  std::size_t model_dim = 64;
  std::size_t ffn_dim = 256;
  std::size_t num_heads = 4;
  std::size_t num_layers = 2;
  double dropout_rate = 0.5;
  std::uint64_t seed = 1;

  void validate() const;
  KeyValueDoc to_doc() const;
  static PredictorConfig from_doc(const KeyValueDoc& doc);
};

class AttentionPredictor {
 public:
  explicit AttentionPredictor(const PredictorConfig& config);

  const PredictorConfig& config() const { return config_; }
  nn::ParameterSet& parameters() { return params_; }
  const nn::ParameterSet& parameters() const { return params_; }

  // phi: (m, d). Returns the (m) distribution; absent paragraphs get zero.
  Tensor forward(const Tensor& phi, const std::vector<bool>& present, const nn::RunContext& ctx) const;
  // Eval mode, no tape. ContractError for m == 0.
  std::vector<double> predict(const Tensor& phi, const std::vector<bool>& present = {}) const;

  void save(const std::filesystem::path& checkpoint) const;
  void load(const std::filesystem::path& checkpoint);

 private:
  struct Layer {
    nn::MultiHeadAttention attention;
    nn::LayerNorm attention_norm;
    nn::FeedForward ffn;
    nn::LayerNorm ffn_norm;
  };

  PredictorConfig config_;
  nn::ParameterSet params_;
  std::vector<Layer> layers_;
  nn::Linear head_;
};

struct AlignmentPair {
  Tensor phi;
  std::vector<double> eta;
  std::vector<bool> present;
};

struct PredictorTraining {
  std::size_t steps = 2000;
  std::size_t batch_size = 8;
  double base_rate = 0.5;
  std::int64_t warmup_steps = 200;
  std::uint64_t seed = 1;
};

struct PredictorReport {
  std::size_t steps = 0;
  double final_batch_loss = 0.0;
  double train_mse = 0.0;
};

// Minimizes the mean squared error between predictions and labels. Batches
// follow shuffle(seed, epoch); dropout draws from (seed, step).
PredictorReport train_predictor(AttentionPredictor& predictor, const std::vector<AlignmentPair>& data,
                                const PredictorTraining& options);

double dataset_mse(const AttentionPredictor& predictor, const std::vector<AlignmentPair>& data);
// MSE of predicting the uniform distribution over present paragraphs.
double uniform_baseline_mse(const std::vector<AlignmentPair>& data);

}  // namespace pht::align
