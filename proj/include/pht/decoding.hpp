#pragma once

// Beam search over a step-wise scoring model with pluggable hypothesis
// scorers, repetition constraints and top-s source compression.

#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "pht/model.hpp"
#include "pht/special_tokens.hpp"

namespace pht::decoding {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();
inline constexpr double kCoverageFloor = 1e-12;

// Next-token distribution plus the attention the model spent choosing it.
struct StepResult {
  std::vector<double> log_probs;            // (V)
  std::vector<double> paragraph_attention;  // (m), sums to 1
  std::vector<double> token_attention;      // (source tokens), sums to 1
};

class StepModel {
 public:
  virtual ~StepModel() = default;
  virtual std::size_t vocab_size() const = 0;
  virtual std::size_t num_paragraphs() const = 0;
  virtual std::size_t num_source_tokens() const = 0;
  // `prefix` starts with BOS.
  virtual StepResult step(std::span<const int> prefix) const = 0;
};

// Decoder steps of a trained model against one encoded source. Attention is
// averaged over layers; token attention is the fused weight A[p] * w[p, i].
class PhtStepModel : public StepModel {
 public:
  PhtStepModel(const model::PhtModel& model, const model::EncodedSource& source);

  std::size_t vocab_size() const override;
  std::size_t num_paragraphs() const override { return memory_.num_paragraphs; }
  std::size_t num_source_tokens() const override { return num_tokens_; }
  StepResult step(std::span<const int> prefix) const override;

 private:
  const model::PhtModel& model_;
  model::DecoderMemory memory_;
  std::vector<std::size_t> lengths_;
  std::size_t num_tokens_ = 0;
};

enum class ScorerKind { kVanilla, kAttAlign, kStrCov, kGnmtCoverage, kPtrGenCoverage };

std::string scorer_name(ScorerKind kind);
// Accepts vanilla, attalign, strcov, gnmt-cp, ptrgen-cov; ConfigError otherwise.
ScorerKind parse_scorer(const std::string& name);

struct DecodeConfig {
  std::size_t beam_size = 5;
  std::size_t max_len = 200;
  double beta = 0.8;
  ScorerKind scorer = ScorerKind::kVanilla;
  std::size_t block_ngram = 3;   // 0 disables
  std::size_t block_window = 2;  // 0 disables
  int exempt_token = kCommaId;
  std::size_t compress_s = 0;    // 0 keeps every paragraph
  double coverage_weight = 1.0;

  void validate() const;
};

struct Coverage {
  std::vector<double> paragraph;  // running sum of step paragraph attention
  std::vector<double> token;      // running sum of step token attention
  double regularizer = 0.0;       // running sum of per-step strCov or cp_t
};

struct BeamHypothesis {
  std::vector<int> tokens;  // without BOS; ends with EOS when finished normally
  std::vector<double> step_log_probs;
  double log_prob = 0.0;
  std::size_t scored_steps = 0;  // |y|; a forced EOS is not scored
  Coverage coverage;
  double score = 0.0;
  bool finished = false;
  bool forced = false;      // EOS appended at max_len
  bool degenerate = false;  // every continuation was masked

  // Normalized paragraph accumulator (eta of the candidate).
  std::vector<double> eta() const;
};

// Per-token mean log-probability. ContractError for length 0.
double vanilla_score(double log_prob, std::size_t length);
double vanilla_score(const BeamHypothesis& h);
// vanilla + beta * attAlign(eta_y, eta_hat)
double att_align_full_score(const BeamHypothesis& h, std::span<const double> eta_hat, double beta);
// 1 - sum_i min(alpha_i, coverage_i)
double str_cov_score(std::span<const double> step_attention, std::span<const double> coverage);
// sum_i log(min(coverage_i, 1)), entries clamped below at kCoverageFloor
double gnmt_coverage_penalty(std::span<const double> coverage);
// sum_i min(alpha_i, coverage_i)
double ptrgen_coverage(std::span<const double> step_attention, std::span<const double> coverage);

class Scorer {
 public:
  Scorer(ScorerKind kind, double beta, double coverage_weight, std::vector<double> eta_hat = {});

  ScorerKind kind() const { return kind_; }
  const std::vector<double>& eta_hat() const { return eta_hat_; }

  // Accumulators after one more scored step.
  Coverage advance(const Coverage& before, const StepResult& step) const;
  double score(double log_prob, std::size_t length, const Coverage& coverage) const;
  // No completion of a live hypothesis within max_len can score higher.
  double upper_bound(double log_prob, std::size_t length, const Coverage& coverage, std::size_t max_len) const;

 private:
  ScorerKind kind_;
  double beta_;
  double weight_;
  std::vector<double> eta_hat_;
  double eta_hat_log_sum_ = 0.0;
};

// Sets to -inf every token that would repeat an n-gram of `history` or repeat
// one of its last `block_window` tokens. EOS and `exempt_token` are spared by
// the window rule; EOS is spared by both.
void apply_constraints(std::span<const int> history, std::span<double> log_probs, const DecodeConfig& config);

struct DecodeResult {
  std::vector<BeamHypothesis> ranked;  // best first
  bool degenerate = false;
  std::size_t steps = 0;
};

DecodeResult beam_search(const StepModel& model, const DecodeConfig& config, const Scorer& scorer);

struct CompressedSource {
  model::SourceDocument source;
  std::vector<double> eta_hat;
  std::vector<std::size_t> kept;  // storage indices into the original source
  bool clamped = false;           // s exceeded m
};

// Keeps the s paragraphs with the largest eta_hat in their original order and
// with their original ranks, renormalizing eta_hat over them. s >= m returns
// the input unchanged.
CompressedSource compress_source(const model::SourceDocument& source, std::span<const double> eta_hat,
                                 std::size_t s);

}  // namespace pht::decoding
