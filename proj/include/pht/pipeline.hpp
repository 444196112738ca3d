#pragma once

// End-to-end flows over datasets: label extraction for the attention
// predictor, summarization with an optional predictor, and evaluation.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "pht/alignment.hpp"
#include "pht/dataset.hpp"
#include "pht/decoding.hpp"
#include "pht/model.hpp"
#include "pht/vocab.hpp"

namespace pht::pipeline {

struct LabelRecord {
  std::string id;
  std::vector<double> eta;

  bool operator==(const LabelRecord&) const = default;
};

std::vector<LabelRecord> extract_labels(const model::PhtModel& model, const std::vector<Sample>& samples);
void write_labels(const std::filesystem::path& path, const std::vector<LabelRecord>& labels);
std::vector<LabelRecord> read_labels(const std::filesystem::path& path);

// Pairs each sample's paragraph embeddings with its cached label by id.
// ContractError when a label is missing or covers a different paragraph count.
std::vector<align::AlignmentPair> alignment_pairs(const model::PhtModel& model, const std::vector<Sample>& samples,
                                                  const std::vector<LabelRecord>& labels);

struct PredictorSidecar {
  align::PredictorConfig config;
  align::PredictorTraining training;
  std::uint64_t vocab_hash = 0;
};

void write_predictor_sidecar(const std::filesystem::path& path, const PredictorSidecar& sidecar);
PredictorSidecar read_predictor_sidecar(const std::filesystem::path& path);

struct GenerationRecord {
  std::string id;
  std::string summary;
  std::vector<int> tokens;  // without EOS
  double score = 0.0;
  // Both over the paragraphs of the uncompressed source; dropped paragraphs
  // get zero in eta_y. eta_hat is empty without a predictor.
  std::vector<double> eta_y;
  std::vector<double> eta_hat;
  bool forced = false;
  bool degenerate = false;
  bool title_included = false;
  std::vector<std::size_t> kept;

  nlohmann::json to_json() const;
  static GenerationRecord from_json(const nlohmann::json& doc);
};

struct SummarizeOptions {
  decoding::DecodeConfig decode;
  std::size_t threads = 1;
};

// attalign scoring or compression without a predictor is a ConfigError.
// max_len is clamped to the model's max_target_len.
GenerationRecord summarize_sample(const model::PhtModel& model, const align::AttentionPredictor* predictor,
                                  const Vocabulary& vocab, const Sample& sample, const decoding::DecodeConfig& config);

// Records keep the input order regardless of the thread count.
std::vector<GenerationRecord> summarize(const model::PhtModel& model, const align::AttentionPredictor* predictor,
                                        const Vocabulary& vocab, const std::vector<Sample>& samples,
                                        const SummarizeOptions& options);

void write_generations(const std::filesystem::path& path, const std::vector<GenerationRecord>& records);
std::vector<GenerationRecord> read_generations(const std::filesystem::path& path);

// Per-sample and mean ROUGE-1/2/L F1 against the reference summaries, plus
// the mean cosine between eta_y and tf-idf gold attention (and eta_hat when
// present). Records are matched to references by id.
nlohmann::json evaluate(const std::vector<GenerationRecord>& records, const std::vector<RawRecord>& references);

// ConfigError unless `expected` matches `actual`.
void check_vocab_hash(std::uint64_t expected, std::uint64_t actual, const std::string& what);

}  // namespace pht::pipeline
