#include "pht/vocab.hpp"

#include <fstream>
#include <limits>

#include "pht/errors.hpp"
#include "pht/special_tokens.hpp"

namespace pht {

namespace {

const std::vector<std::string>& reserved_names() {
  static const std::vector<std::string> names{"<pad>", "<s>", "</s>", "<unk>", ","};
  return names;
}

void apply_merge(std::vector<int>& seq, std::pair<int, int> pair, int merged) {
  std::size_t out = 0;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i + 1 < seq.size() && seq[i] == pair.first && seq[i + 1] == pair.second) {
      seq[out++] = merged;
      ++i;
    } else {
      seq[out++] = seq[i];
    }
  }
  seq.resize(out);
}

}  // namespace

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<std::string> split_chunks(const std::string& text) {
  std::vector<std::string> chunks;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) chunks.push_back(std::move(cur));
    cur.clear();
  };
  for (char c : text) {
    if (c == ',') {
      flush();
      chunks.emplace_back(1, ',');
    } else if (c == ' ') {
      flush();
      cur.push_back(c);
    } else {
      cur.push_back(c);
    }
  }
  flush();
  return chunks;
}

void Vocabulary::add_token(std::string bytes) { tokens_.push_back(std::move(bytes)); }

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw InputError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

Vocabulary Vocabulary::build(const std::vector<std::string>& corpus, std::size_t target_size) {
  if (corpus.empty()) throw ContractError("build_vocab needs a non-empty corpus");
  std::map<std::string, std::size_t> chunk_counts;
  bool seen[256] = {};
  for (const auto& text : corpus) {
    for (auto& chunk : split_chunks(text)) {
      if (chunk == ",") continue;
      for (unsigned char c : chunk) seen[c] = true;
      ++chunk_counts[chunk];
    }
  }
  Vocabulary v;
  for (const auto& name : reserved_names()) v.add_token(name);
  for (int b = 0; b < 256; ++b) {
    if (!seen[b] || b == ',') continue;
    v.alphabet_.push_back(static_cast<unsigned char>(b));
    v.byte_ids_[static_cast<unsigned char>(b)] = static_cast<int>(v.tokens_.size());
    v.add_token(std::string(1, static_cast<char>(b)));
  }
  if (target_size < v.tokens_.size()) {
    throw ContractError("target vocabulary size " + std::to_string(target_size) + " is below reserved + alphabet (" +
                        std::to_string(v.tokens_.size()) + ")");
  }

  std::vector<std::pair<std::vector<int>, std::size_t>> words;
  for (const auto& [chunk, count] : chunk_counts) {
    std::vector<int> ids;
    for (unsigned char c : chunk) ids.push_back(v.byte_ids_.at(c));
    words.emplace_back(std::move(ids), count);
  }

  while (v.tokens_.size() < target_size) {
    std::map<std::pair<int, int>, std::size_t> pairs;
    for (const auto& [ids, count] : words) {
      for (std::size_t i = 0; i + 1 < ids.size(); ++i) pairs[{ids[i], ids[i + 1]}] += count;
    }
    const std::pair<int, int>* best = nullptr;
    std::size_t best_count = 0;
    for (const auto& [pair, count] : pairs) {
      if (count < 2) continue;
      const bool wins =
          best == nullptr || count > best_count ||
          (count == best_count &&
           std::tie(v.tokens_[pair.first], v.tokens_[pair.second]) < std::tie(v.tokens_[best->first], v.tokens_[best->second]));
      if (wins) {
        best = &pair;
        best_count = count;
      }
    }
    if (best == nullptr) break;
    const std::pair<int, int> chosen = *best;
    const int merged = static_cast<int>(v.tokens_.size());
    v.add_token(v.tokens_[chosen.first] + v.tokens_[chosen.second]);
    v.merge_rank_[chosen] = v.merges_.size();
    v.merges_.push_back(chosen);
    for (auto& [ids, count] : words) apply_merge(ids, chosen, merged);
  }
  return v;
}

std::vector<int> Vocabulary::encode_chunk(const std::string& chunk) const {
  std::vector<int> ids;
  ids.reserve(chunk.size());
  for (unsigned char c : chunk) {
    const auto it = byte_ids_.find(c);
    ids.push_back(it == byte_ids_.end() ? kUnkId : it->second);
  }
  while (ids.size() > 1) {
    std::size_t best_rank = std::numeric_limits<std::size_t>::max();
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
      const auto it = merge_rank_.find({ids[i], ids[i + 1]});
      if (it != merge_rank_.end()) best_rank = std::min(best_rank, it->second);
    }
    if (best_rank == std::numeric_limits<std::size_t>::max()) break;
    const auto pair = merges_[best_rank];
    apply_merge(ids, pair, static_cast<int>(kNumReserved + alphabet_.size() + best_rank));
  }
  return ids;
}

std::vector<int> Vocabulary::encode(const std::string& text) const {
  std::vector<int> out;
  for (const auto& chunk : split_chunks(text)) {
    if (chunk == ",") {
      out.push_back(kCommaId);
      continue;
    }
    const auto ids = encode_chunk(chunk);
    out.insert(out.end(), ids.begin(), ids.end());
  }
  return out;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (id == kPadId || id == kBosId || id == kEosId) continue;
    out += token(id);
  }
  return out;
}

nlohmann::json Vocabulary::to_json() const {
  nlohmann::json doc;
  doc["schema_version"] = kVocabSchemaVersion;
  doc["reserved"] = reserved_names();
  std::vector<int> alphabet(alphabet_.begin(), alphabet_.end());
  doc["alphabet"] = alphabet;
  nlohmann::json merges = nlohmann::json::array();
  for (const auto& [a, b] : merges_) merges.push_back({a, b});
  doc["merges"] = merges;
  return doc;
}

std::uint64_t Vocabulary::hash() const { return fnv1a(to_json().dump()); }

Vocabulary Vocabulary::from_json(const nlohmann::json& doc) {
  try {
    if (doc.at("schema_version").get<std::int64_t>() != kVocabSchemaVersion) {
      throw ConfigError("unsupported vocabulary schema");
    }
    if (doc.at("reserved").get<std::vector<std::string>>() != reserved_names()) {
      throw ConfigError("vocabulary reserves different special tokens");
    }
    Vocabulary v;
    for (const auto& name : reserved_names()) v.add_token(name);
    for (int b : doc.at("alphabet").get<std::vector<int>>()) {
      if (b < 0 || b > 255 || b == ',') throw ConfigError("invalid alphabet byte " + std::to_string(b));
      const auto byte = static_cast<unsigned char>(b);
      if (v.byte_ids_.count(byte) != 0) throw ConfigError("duplicate alphabet byte");
      v.alphabet_.push_back(byte);
      v.byte_ids_[byte] = static_cast<int>(v.tokens_.size());
      v.add_token(std::string(1, static_cast<char>(byte)));
    }
    for (const auto& m : doc.at("merges")) {
      const int a = m.at(0).get<int>(), b = m.at(1).get<int>();
      const int limit = static_cast<int>(v.tokens_.size());
      if (a < kNumReserved || b < kNumReserved || a >= limit || b >= limit) {
        throw ConfigError("merge refers to an unknown token");
      }
      v.merge_rank_[{a, b}] = v.merges_.size();
      v.merges_.emplace_back(a, b);
      v.add_token(v.tokens_[a] + v.tokens_[b]);
    }
    return v;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed vocabulary: ") + e.what());
  }
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write vocabulary: " + path.string());
  os << to_json().dump() << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read vocabulary: " + path.string());
  nlohmann::json doc;
  try {
    is >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed vocabulary " + path.string() + ": " + e.what());
  }
  return from_json(doc);
}

}  // namespace pht
