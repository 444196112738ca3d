#pragma once

// Byte-level BPE vocabulary. Text is cut into chunks that start at each space;
// a comma is always its own chunk and maps to the reserved comma id.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

namespace pht {

inline constexpr std::int64_t kVocabSchemaVersion = 1;

std::uint64_t fnv1a(std::string_view bytes);

class Vocabulary {
 public:
  // Learns merges greedily by pair frequency (ties: lexicographically smallest
  // pair of token strings) until `target_size` or no pair occurs twice.
  // ContractError for an empty corpus or a target below reserved + alphabet.
  static Vocabulary build(const std::vector<std::string>& corpus, std::size_t target_size);

  std::size_t size() const { return tokens_.size(); }
  std::size_t alphabet_size() const { return alphabet_.size(); }
  const std::vector<std::pair<int, int>>& merges() const { return merges_; }
  const std::string& token(int id) const;

  // Bytes outside the alphabet become the unknown id.
  std::vector<int> encode(const std::string& text) const;
  // Pad, begin and end ids are dropped; unknown renders as "<unk>".
  std::string decode(std::span<const int> ids) const;

  std::uint64_t hash() const;
  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& doc);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  void add_token(std::string bytes);
  std::vector<int> encode_chunk(const std::string& chunk) const;

  std::vector<std::string> tokens_;
  std::vector<unsigned char> alphabet_;
  std::unordered_map<unsigned char, int> byte_ids_;
  std::vector<std::pair<int, int>> merges_;
  std::map<std::pair<int, int>, std::size_t> merge_rank_;
};

// Splits text into BPE chunks: a new chunk at each space, commas alone.
std::vector<std::string> split_chunks(const std::string& text);

}  // namespace pht
