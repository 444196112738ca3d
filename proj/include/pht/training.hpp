#pragma once

// Teacher-forced training of the summarizer with periodic checkpoints that
// carry the optimizer state, so an interrupted run resumes bit-identically.
//
// Output directory layout:
//   checkpoint-<step>.bin  parameters, Adam moments and the step counter
//   best.bin, best.txt     copy of the checkpoint with the lowest validation
//                          loss and its step/loss
//   model.cfg              model config, training options and vocab hash

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <vector>

#include "pht/decoding.hpp"
#include "pht/keyvalue.hpp"
#include "pht/model.hpp"
#include "pht/optim.hpp"

namespace pht::train {

struct TrainOptions {
  std::size_t steps = 2000;
  std::size_t batch_size = 8;
  double base_rate = 1.0;
  std::int64_t warmup_steps = 400;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-9;
  std::size_t checkpoint_every = 200;
  std::size_t log_every = 0;  // 0 silences progress lines
  std::uint64_t seed = 1;
  // Called before each step; lets callers observe or perturb the model.
  std::function<void(std::size_t step, model::PhtModel& model)> before_step;

  void validate() const;
  // Keys are prefixed with "train.".
  void write_to(KeyValueDoc& doc) const;
  static TrainOptions from_doc(const KeyValueDoc& doc);
};

struct CheckpointRecord {
  std::size_t step = 0;
  std::filesystem::path path;
  double validation_loss = 0.0;
};

struct TrainReport {
  std::size_t first_step = 1;  // first step executed by this call
  std::size_t last_step = 0;   // last step whose update was applied
  std::vector<double> losses;  // batch loss of each executed step
  std::vector<CheckpointRecord> checkpoints;
  std::optional<CheckpointRecord> best;
  bool diverged = false;
  std::size_t diverged_at = 0;
};

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::size_t step);
// Highest-step checkpoint in `dir`, if any.
std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& dir);

// Token-mean loss over `data` in eval mode.
double validation_loss(const model::PhtModel& model, const std::vector<model::TrainingExample>& data);

// Runs steps up to options.steps. With `resume`, the newest checkpoint in
// `output_dir` restores parameters, moments and step first. A non-finite loss
// or parameter stops training with `diverged` set; checkpoints written before
// remain. Batches follow shuffle(seed, epoch); dropout draws from (seed, step).
TrainReport train_model(model::PhtModel& model, const std::vector<model::TrainingExample>& train_set,
                        const std::vector<model::TrainingExample>& validation_set, const TrainOptions& options,
                        const std::filesystem::path& output_dir, bool resume = false, std::ostream* log = nullptr);

// Restores only the parameters of a training checkpoint.
void load_parameters(model::PhtModel& model, const std::filesystem::path& checkpoint);

// Keys are prefixed with "decode.".
void write_decode_config(KeyValueDoc& doc, const decoding::DecodeConfig& config);
decoding::DecodeConfig read_decode_config(const KeyValueDoc& doc);

struct ModelSidecar {
  model::ModelConfig config;
  TrainOptions training;
  decoding::DecodeConfig decode;  // defaults for summarize
  std::uint64_t vocab_hash = 0;
};

void write_model_sidecar(const std::filesystem::path& path, const ModelSidecar& sidecar);
ModelSidecar read_model_sidecar(const std::filesystem::path& path);

}  // namespace pht::train
