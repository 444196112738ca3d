#pragma once

// JSONL samples: one {id, title, paragraphs: [text], summary} object per line,
// paragraphs already in rank order.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pht/model.hpp"
#include "pht/vocab.hpp"

namespace pht {

struct RawRecord {
  std::string id;
  std::string title;
  std::vector<std::string> paragraphs;
  std::string summary;

  bool operator==(const RawRecord&) const = default;
};

struct Sample {
  std::string id;
  std::vector<int> title;
  std::vector<std::vector<int>> paragraphs;  // rank order
  std::vector<int> summary;

  bool operator==(const Sample&) const = default;
};

struct LoadLimits {
  std::size_t max_paragraphs = 8;
  std::size_t max_paragraph_len = 40;
  // A non-empty title takes one of the max_paragraphs slots.
  bool reserve_title_slot = true;

  static LoadLimits from_model(const model::ModelConfig& config);
};

struct LoadStats {
  std::size_t records = 0;
  std::size_t malformed_lines = 0;
  std::size_t truncated_paragraphs = 0;  // paragraphs dropped
  std::size_t truncated_tokens = 0;      // tokens dropped from kept paragraphs
};

// Blank lines are ignored; malformed lines are skipped and counted. IoError
// names the path when the file cannot be read.
std::vector<RawRecord> read_records(const std::filesystem::path& path, LoadStats* stats = nullptr);
void write_records(const std::filesystem::path& path, const std::vector<RawRecord>& records);

// Truncation keeps the leading paragraphs and tokens; nothing is reordered.
Sample tokenize_record(const RawRecord& record, const Vocabulary& vocab, const LoadLimits& limits,
                       LoadStats* stats = nullptr);
RawRecord detokenize_sample(const Sample& sample, const Vocabulary& vocab);
std::vector<Sample> load_dataset(const std::filesystem::path& path, const Vocabulary& vocab,
                                 const LoadLimits& limits, LoadStats* stats = nullptr);

// Title, paragraph and summary text of every record, for vocabulary building.
std::vector<std::string> corpus_text(const std::vector<RawRecord>& records);

model::TrainingExample to_example(const Sample& sample, bool title_as_paragraph);

struct ToyCorpusOptions {
  std::size_t samples = 20;
  // Index of the first generated sample; splits drawn with disjoint ranges
  // share the lexicon but never a sample.
  std::size_t first_index = 0;
  std::size_t min_paragraphs = 4;
  std::size_t max_paragraphs = 6;
  std::size_t key_paragraphs = 2;
  std::size_t sentences_per_paragraph = 2;
  std::size_t words_per_sentence = 5;
  std::size_t lexicon_size = 60;
  std::uint64_t seed = 1;
};

// Synthetic corpus whose summary is copied from identifiable paragraphs: a few
// key paragraphs open with a marker word and the title words, and the summary
// is their first sentences joined with " , " in rank order. Filler paragraphs
// never contain the marker.
std::vector<RawRecord> generate_toy_corpus(const ToyCorpusOptions& options);

// Storage indices (into RawRecord::paragraphs) of the key paragraphs.
std::vector<std::size_t> toy_key_paragraphs(const RawRecord& record);

inline constexpr const char* kToyMarker = "zq";

}  // namespace pht
