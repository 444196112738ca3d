#include "pht/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>

#include "pht/checkpoint.hpp"
#include "pht/errors.hpp"
#include "pht/seeding.hpp"

namespace pht::train {

namespace {

constexpr const char* kStepKey = "train.step";
constexpr const char* kFirstPrefix = "adam.first.";
constexpr const char* kSecondPrefix = "adam.second.";

AdamConfig adam_config(const TrainOptions& o, const model::ModelConfig& c) {
  AdamConfig a;
  a.base_rate = o.base_rate;
  a.warmup_steps = o.warmup_steps;
  a.model_dim = c.model_dim;
  a.beta1 = o.adam_beta1;
  a.beta2 = o.adam_beta2;
  a.eps = o.adam_eps;
  return a;
}

void save_training_checkpoint(const std::filesystem::path& path, const model::PhtModel& model,
                              const AdamState& state) {
  std::vector<NamedTensor> entries = model.parameters().entries();
  const auto& params = model.parameters().entries();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Shape& shape = params[i].tensor.shape();
    entries.push_back({kFirstPrefix + params[i].name, Tensor(shape, state.first_moment[i])});
    entries.push_back({kSecondPrefix + params[i].name, Tensor(shape, state.second_moment[i])});
  }
  entries.push_back({kStepKey, Tensor(Shape{1}, {static_cast<double>(state.step)})});
  save_checkpoint(path, entries);
}

const NamedTensor& find_entry(const std::vector<NamedTensor>& entries, const std::string& name,
                              const std::filesystem::path& path) {
  for (const auto& e : entries) {
    if (e.name == name) return e;
  }
  throw ConfigError("checkpoint " + path.string() + " lacks " + name);
}

void restore_training_checkpoint(const std::filesystem::path& path, model::PhtModel& model, AdamState& state) {
  const auto entries = load_checkpoint(path);
  model.parameters().assign(entries);
  const auto& params = model.parameters().entries();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto first = find_entry(entries, kFirstPrefix + params[i].name, path).tensor.data();
    const auto second = find_entry(entries, kSecondPrefix + params[i].name, path).tensor.data();
    if (first.size() != state.first_moment[i].size() || second.size() != state.second_moment[i].size()) {
      throw DimensionError("optimizer moments for " + params[i].name + " do not match the model");
    }
    state.first_moment[i].assign(first.begin(), first.end());
    state.second_moment[i].assign(second.begin(), second.end());
  }
  state.step = static_cast<std::int64_t>(find_entry(entries, kStepKey, path).tensor.data()[0]);
}

bool parameters_finite(const model::PhtModel& model) {
  for (const auto& e : model.parameters().entries()) {
    for (double v : e.tensor.data()) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

std::optional<CheckpointRecord> read_best(const std::filesystem::path& dir) {
  const auto marker = dir / "best.txt";
  if (!std::filesystem::exists(marker)) return std::nullopt;
  const auto doc = KeyValueDoc::load(marker);
  const auto step = static_cast<std::size_t>(doc.get_uint("step"));
  return CheckpointRecord{step, checkpoint_path(dir, step), doc.get_double("validation_loss")};
}

void write_best(const std::filesystem::path& dir, const CheckpointRecord& best) {
  const auto tmp = dir / "best.bin.tmp";
  std::filesystem::copy_file(best.path, tmp, std::filesystem::copy_options::overwrite_existing);
  std::filesystem::rename(tmp, dir / "best.bin");
  KeyValueDoc doc;
  doc.set("step", static_cast<std::uint64_t>(best.step));
  doc.set("validation_loss", best.validation_loss);
  doc.set("checkpoint", best.path.filename().string());
  doc.save(dir / "best.txt");
}

// Example index at position `pos` of the endless epoch-shuffled stream.
class BatchStream {
 public:
  BatchStream(std::size_t size, std::uint64_t seed) : size_(size), seed_(seed) {}

  std::size_t at(std::uint64_t pos) {
    const std::uint64_t epoch = pos / size_;
    if (epoch != epoch_ || order_.empty()) {
      order_.resize(size_);
      std::iota(order_.begin(), order_.end(), 0);
      std::mt19937_64 rng(mix_seed(seed_, {0, epoch}));
      std::shuffle(order_.begin(), order_.end(), rng);
      epoch_ = epoch;
    }
    return order_[pos % size_];
  }

 private:
  std::size_t size_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<std::size_t> order_;
};

}  // namespace

void TrainOptions::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (checkpoint_every == 0) throw ConfigError("checkpoint_every must be positive");
  if (warmup_steps <= 0) throw ConfigError("warmup_steps must be positive");
  if (!(base_rate > 0.0)) throw ConfigError("base_rate must be positive");
  if (adam_beta1 < 0.0 || adam_beta1 >= 1.0 || adam_beta2 < 0.0 || adam_beta2 >= 1.0) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
}

void TrainOptions::write_to(KeyValueDoc& doc) const {
  doc.set("train.steps", static_cast<std::uint64_t>(steps));
  doc.set("train.batch_size", static_cast<std::uint64_t>(batch_size));
  doc.set("train.base_rate", base_rate);
  doc.set("train.warmup_steps", warmup_steps);
  doc.set("train.adam_beta1", adam_beta1);
  doc.set("train.adam_beta2", adam_beta2);
  doc.set("train.adam_eps", adam_eps);
  doc.set("train.checkpoint_every", static_cast<std::uint64_t>(checkpoint_every));
  doc.set("train.seed", seed);
}

TrainOptions TrainOptions::from_doc(const KeyValueDoc& doc) {
  TrainOptions o;
  if (doc.contains("train.steps")) o.steps = doc.get_uint("train.steps");
  if (doc.contains("train.batch_size")) o.batch_size = doc.get_uint("train.batch_size");
  if (doc.contains("train.base_rate")) o.base_rate = doc.get_double("train.base_rate");
  if (doc.contains("train.warmup_steps")) o.warmup_steps = doc.get_int("train.warmup_steps");
  if (doc.contains("train.adam_beta1")) o.adam_beta1 = doc.get_double("train.adam_beta1");
  if (doc.contains("train.adam_beta2")) o.adam_beta2 = doc.get_double("train.adam_beta2");
  if (doc.contains("train.adam_eps")) o.adam_eps = doc.get_double("train.adam_eps");
  if (doc.contains("train.checkpoint_every")) o.checkpoint_every = doc.get_uint("train.checkpoint_every");
  if (doc.contains("train.seed")) o.seed = doc.get_uint("train.seed");
  o.validate();
  return o;
}

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::size_t step) {
  char name[64];
  std::snprintf(name, sizeof name, "checkpoint-%08zu.bin", step);
  return dir / name;
}

std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) return std::nullopt;
  std::optional<std::filesystem::path> best;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("checkpoint-", 0) != 0 || entry.path().extension() != ".bin") continue;
    if (!best || name > best->filename().string()) best = entry.path();
  }
  return best;
}

double validation_loss(const model::PhtModel& model, const std::vector<model::TrainingExample>& data) {
  NoGradGuard no_grad;
  return model::training_loss(model, data).item();
}

TrainReport train_model(model::PhtModel& model, const std::vector<model::TrainingExample>& train_set,
                        const std::vector<model::TrainingExample>& validation_set, const TrainOptions& options,
                        const std::filesystem::path& output_dir, bool resume, std::ostream* log) {
  options.validate();
  if (train_set.empty()) throw ContractError("training needs a non-empty training split");
  if (validation_set.empty()) throw ContractError("training needs a non-empty validation split");
  std::filesystem::create_directories(output_dir);

  std::vector<Tensor> params = model.parameters().tensors();
  AdamState state = make_adam_state(adam_config(options, model.config()), params);
  TrainReport report;

  auto record_checkpoint = [&](std::size_t step) {
    const auto path = checkpoint_path(output_dir, step);
    save_training_checkpoint(path, model, state);
    const CheckpointRecord rec{step, path, validation_loss(model, validation_set)};
    report.checkpoints.push_back(rec);
    if (!report.best || rec.validation_loss < report.best->validation_loss) {
      report.best = rec;
      write_best(output_dir, rec);
    }
    if (log != nullptr) *log << "checkpoint step " << step << " validation_loss " << rec.validation_loss << '\n';
  };

  std::size_t start = 0;
  if (resume) {
    if (const auto latest = latest_checkpoint(output_dir)) {
      restore_training_checkpoint(*latest, model, state);
      start = static_cast<std::size_t>(state.step);
      report.best = read_best(output_dir);
      if (log != nullptr) *log << "resumed from " << latest->string() << " at step " << start << '\n';
    }
  }
  if (start == 0) record_checkpoint(0);
  report.first_step = start + 1;
  report.last_step = start;

  BatchStream stream(train_set.size(), options.seed);
  for (std::size_t step = start + 1; step <= options.steps; ++step) {
    if (options.before_step) options.before_step(step, model);
    std::vector<model::TrainingExample> batch;
    for (std::size_t b = 0; b < options.batch_size; ++b) {
      batch.push_back(train_set[stream.at(static_cast<std::uint64_t>((step - 1) * options.batch_size + b))]);
    }
    std::mt19937_64 drop_rng(mix_seed(options.seed, {1, step}));
    const nn::RunContext ctx = model::make_run_context(model.config(), true, &drop_rng);
    Tensor loss;
    double value = std::numeric_limits<double>::quiet_NaN();
    try {
      loss = model::training_loss(model, batch, ctx);
      value = loss.item();
    } catch (const NumericError&) {
      // Non-finite activations surface here before the loss is formed.
    }
    if (!std::isfinite(value)) {
      report.diverged = true;
      report.diverged_at = step;
      if (log != nullptr) *log << "non-finite loss at step " << step << "; stopping\n";
      break;
    }
    model.parameters().zero_grad();
    backward(loss);
    adam_step(params, state);
    report.losses.push_back(value);
    if (!parameters_finite(model)) {
      report.diverged = true;
      report.diverged_at = step;
      if (log != nullptr) *log << "non-finite parameters after step " << step << "; stopping\n";
      break;
    }
    report.last_step = step;
    if (log != nullptr && options.log_every > 0 && step % options.log_every == 0) {
      *log << "step " << step << " loss " << value << " rate " << warmup_rate(state.config, state.step) << '\n';
    }
    if (step % options.checkpoint_every == 0 || step == options.steps) record_checkpoint(step);
  }
  return report;
}

void load_parameters(model::PhtModel& model, const std::filesystem::path& checkpoint) {
  model.parameters().assign(load_checkpoint(checkpoint));
}

void write_decode_config(KeyValueDoc& doc, const decoding::DecodeConfig& c) {
  doc.set("decode.beam_size", static_cast<std::uint64_t>(c.beam_size));
  doc.set("decode.max_len", static_cast<std::uint64_t>(c.max_len));
  doc.set("decode.beta", c.beta);
  doc.set("decode.scorer", decoding::scorer_name(c.scorer));
  doc.set("decode.block_ngram", static_cast<std::uint64_t>(c.block_ngram));
  doc.set("decode.block_window", static_cast<std::uint64_t>(c.block_window));
  doc.set("decode.compress_s", static_cast<std::uint64_t>(c.compress_s));
  doc.set("decode.coverage_weight", c.coverage_weight);
}

decoding::DecodeConfig read_decode_config(const KeyValueDoc& doc) {
  decoding::DecodeConfig c;
  if (doc.contains("decode.beam_size")) c.beam_size = doc.get_uint("decode.beam_size");
  if (doc.contains("decode.max_len")) c.max_len = doc.get_uint("decode.max_len");
  if (doc.contains("decode.beta")) c.beta = doc.get_double("decode.beta");
  if (doc.contains("decode.scorer")) c.scorer = decoding::parse_scorer(doc.get("decode.scorer"));
  if (doc.contains("decode.block_ngram")) c.block_ngram = doc.get_uint("decode.block_ngram");
  if (doc.contains("decode.block_window")) c.block_window = doc.get_uint("decode.block_window");
  if (doc.contains("decode.compress_s")) c.compress_s = doc.get_uint("decode.compress_s");
  if (doc.contains("decode.coverage_weight")) c.coverage_weight = doc.get_double("decode.coverage_weight");
  c.validate();
  return c;
}

void write_model_sidecar(const std::filesystem::path& path, const ModelSidecar& sidecar) {
  KeyValueDoc doc = sidecar.config.to_doc();
  sidecar.training.write_to(doc);
  write_decode_config(doc, sidecar.decode);
  doc.set("vocab_hash", sidecar.vocab_hash);
  doc.save(path);
}

ModelSidecar read_model_sidecar(const std::filesystem::path& path) {
  const auto doc = KeyValueDoc::load(path);
  ModelSidecar s;
  s.config = model::ModelConfig::from_doc(doc);
  s.training = TrainOptions::from_doc(doc);
  s.decode = read_decode_config(doc);
  s.vocab_hash = doc.get_uint("vocab_hash");
  return s;
}

}  // namespace pht::train
