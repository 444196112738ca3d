#pragma once

// ROUGE-N / ROUGE-L F1 and the paragraph attention analysis against tf-idf
// gold attention. Text is case-folded and split on whitespace; no stemming.

#include <map>
#include <span>
#include <string>
#include <vector>

namespace pht::eval {

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool degenerate = false;  // an input was too short to score
};

std::vector<std::string> tokenize(const std::string& text);

// Clipped n-gram overlap. ContractError for n == 0.
RougeScore rouge_n(std::span<const std::string> candidate, std::span<const std::string> reference, std::size_t n);
RougeScore rouge_n(const std::string& candidate, const std::string& reference, std::size_t n);

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);
RougeScore rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference);
RougeScore rouge_l(const std::string& candidate, const std::string& reference);

// Document frequencies over a fixed collection, for corpus-level idf.
struct IdfTable {
  std::map<std::string, std::size_t> document_frequency;
  std::size_t documents = 0;

  // ln((1 + N) / (1 + df)) + 1
  double idf(const std::string& term) const;
};

IdfTable build_idf(const std::vector<std::vector<std::string>>& documents);

struct GoldAttention {
  std::vector<double> distribution;
  bool uniform_fallback = false;
};

// Cosine similarity of raw-count tf-idf vectors between the summary and each
// paragraph, normalized to sum 1. Without `corpus`, idf is computed over the
// paragraphs plus the summary. Empty paragraphs get zero mass.
GoldAttention gold_attention(const std::string& summary, const std::vector<std::string>& paragraphs,
                             const IdfTable* corpus = nullptr);

// Cosine similarity. ContractError on length mismatch or a zero vector.
double attention_similarity(std::span<const double> model, std::span<const double> gold);

}  // namespace pht::eval
