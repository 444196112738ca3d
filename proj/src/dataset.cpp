#include "pht/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>

#include "json.hpp"
#include "pht/errors.hpp"
#include "pht/seeding.hpp"
#include "pht/special_tokens.hpp"

namespace pht {

LoadLimits LoadLimits::from_model(const model::ModelConfig& config) {
  return {config.max_paragraphs, config.max_paragraph_len, config.title_as_paragraph};
}

std::vector<RawRecord> read_records(const std::filesystem::path& path, LoadStats* stats) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read dataset: " + path.string());
  std::vector<RawRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto doc = nlohmann::json::parse(line);
      RawRecord r;
      r.id = doc.at("id").get<std::string>();
      r.title = doc.at("title").get<std::string>();
      r.paragraphs = doc.at("paragraphs").get<std::vector<std::string>>();
      r.summary = doc.at("summary").get<std::string>();
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception&) {
      if (stats != nullptr) ++stats->malformed_lines;
    }
  }
  if (is.bad()) throw IoError("failed reading dataset: " + path.string());
  if (stats != nullptr) stats->records += out.size();
  return out;
}

void write_records(const std::filesystem::path& path, const std::vector<RawRecord>& records) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write dataset: " + path.string());
  for (const auto& r : records) {
    nlohmann::json doc;
    doc["id"] = r.id;
    doc["title"] = r.title;
    doc["paragraphs"] = r.paragraphs;
    doc["summary"] = r.summary;
    os << doc.dump() << '\n';
  }
  if (!os) throw IoError("failed writing dataset: " + path.string());
}

Sample tokenize_record(const RawRecord& record, const Vocabulary& vocab, const LoadLimits& limits,
                       LoadStats* stats) {
  Sample s;
  s.id = record.id;
  s.title = vocab.encode(record.title);
  s.summary = vocab.encode(record.summary);
  const bool title_slot = limits.reserve_title_slot && !s.title.empty();
  if (title_slot && s.title.size() > limits.max_paragraph_len) {
    if (stats != nullptr) stats->truncated_tokens += s.title.size() - limits.max_paragraph_len;
    s.title.resize(limits.max_paragraph_len);
  }
  const std::size_t budget = limits.max_paragraphs - std::min<std::size_t>(limits.max_paragraphs, title_slot ? 1 : 0);
  const std::size_t keep = std::min(budget, record.paragraphs.size());
  if (stats != nullptr) stats->truncated_paragraphs += record.paragraphs.size() - keep;
  for (std::size_t i = 0; i < keep; ++i) {
    auto ids = vocab.encode(record.paragraphs[i]);
    if (ids.size() > limits.max_paragraph_len) {
      if (stats != nullptr) stats->truncated_tokens += ids.size() - limits.max_paragraph_len;
      ids.resize(limits.max_paragraph_len);
    }
    s.paragraphs.push_back(std::move(ids));
  }
  return s;
}

RawRecord detokenize_sample(const Sample& sample, const Vocabulary& vocab) {
  RawRecord r;
  r.id = sample.id;
  r.title = vocab.decode(sample.title);
  for (const auto& p : sample.paragraphs) r.paragraphs.push_back(vocab.decode(p));
  r.summary = vocab.decode(sample.summary);
  return r;
}

std::vector<Sample> load_dataset(const std::filesystem::path& path, const Vocabulary& vocab,
                                 const LoadLimits& limits, LoadStats* stats) {
  std::vector<Sample> out;
  for (const auto& r : read_records(path, stats)) out.push_back(tokenize_record(r, vocab, limits, stats));
  return out;
}

std::vector<std::string> corpus_text(const std::vector<RawRecord>& records) {
  std::vector<std::string> out;
  for (const auto& r : records) {
    out.push_back(r.title);
    out.insert(out.end(), r.paragraphs.begin(), r.paragraphs.end());
    out.push_back(r.summary);
  }
  return out;
}

model::TrainingExample to_example(const Sample& sample, bool title_as_paragraph) {
  return {model::make_source(sample.title, sample.paragraphs, title_as_paragraph), sample.summary};
}

namespace {

std::vector<std::string> make_lexicon(std::size_t size, std::mt19937_64& rng) {
  static const std::string consonants = "bdfgklmnprstv";
  static const std::string vowels = "aeiou";
  std::set<std::string> seen{kToyMarker};
  std::vector<std::string> words;
  std::uniform_int_distribution<std::size_t> syllables(2, 3);
  std::uniform_int_distribution<std::size_t> pick_c(0, consonants.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_v(0, vowels.size() - 1);
  while (words.size() < size) {
    std::string w;
    const std::size_t n = syllables(rng);
    for (std::size_t i = 0; i < n; ++i) {
      w.push_back(consonants[pick_c(rng)]);
      w.push_back(vowels[pick_v(rng)]);
    }
    if (seen.insert(w).second) words.push_back(w);
  }
  return words;
}

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

}  // namespace

std::vector<RawRecord> generate_toy_corpus(const ToyCorpusOptions& o) {
  if (o.min_paragraphs == 0 || o.min_paragraphs > o.max_paragraphs || o.key_paragraphs == 0 ||
      o.key_paragraphs > o.min_paragraphs || o.words_per_sentence < 3 || o.sentences_per_paragraph == 0 ||
      o.lexicon_size < 4) {
    throw ConfigError("inconsistent toy corpus options");
  }
  std::mt19937_64 lex_rng(mix_seed(o.seed, {0}));
  const auto lexicon = make_lexicon(o.lexicon_size, lex_rng);
  std::uniform_int_distribution<std::size_t> pick_word(0, lexicon.size() - 1);

  std::vector<RawRecord> out;
  for (std::size_t i = o.first_index; i < o.first_index + o.samples; ++i) {
    std::mt19937_64 rng(mix_seed(o.seed, {1, i}));
    const std::string t1 = lexicon[pick_word(rng)], t2 = lexicon[pick_word(rng)];
    std::uniform_int_distribution<std::size_t> count(o.min_paragraphs, o.max_paragraphs);
    const std::size_t m = count(rng);
    std::vector<std::size_t> order(m);
    for (std::size_t p = 0; p < m; ++p) order[p] = p;
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<bool> is_key(m, false);
    for (std::size_t k = 0; k < o.key_paragraphs; ++k) is_key[order[k]] = true;

    auto filler = [&](std::size_t words) {
      std::vector<std::string> ws;
      for (std::size_t w = 0; w < words; ++w) ws.push_back(lexicon[pick_word(rng)]);
      return ws;
    };

    RawRecord r;
    r.id = "toy-" + std::to_string(i);
    r.title = t1 + " " + t2;
    std::vector<std::string> key_sentences;
    for (std::size_t p = 0; p < m; ++p) {
      std::vector<std::string> sentences;
      for (std::size_t s = 0; s < o.sentences_per_paragraph; ++s) {
        std::vector<std::string> ws;
        if (s == 0 && is_key[p]) {
          ws = {kToyMarker, t1};
          auto rest = filler(o.words_per_sentence - 3);
          ws.insert(ws.end(), rest.begin(), rest.end());
          ws.push_back(t2);
          key_sentences.push_back(join(ws));
        } else {
          ws = filler(o.words_per_sentence);
        }
        sentences.push_back(join(ws) + " .");
      }
      r.paragraphs.push_back(join(sentences));
    }
    for (std::size_t k = 0; k < key_sentences.size(); ++k) {
      if (k > 0) r.summary += " , ";
      r.summary += key_sentences[k];
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<std::size_t> toy_key_paragraphs(const RawRecord& record) {
  std::vector<std::size_t> out;
  const std::string prefix = std::string(kToyMarker) + " ";
  for (std::size_t p = 0; p < record.paragraphs.size(); ++p) {
    if (record.paragraphs[p].rfind(prefix, 0) == 0) out.push_back(p);
  }
  return out;
}

}  // namespace pht
