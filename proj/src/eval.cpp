#include "pht/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

#include "pht/errors.hpp"

namespace pht::eval {

namespace {

RougeScore from_overlap(double overlap, double candidate_total, double reference_total) {
  RougeScore s;
  s.precision = candidate_total > 0.0 ? overlap / candidate_total : 0.0;
  s.recall = reference_total > 0.0 ? overlap / reference_total : 0.0;
  const double sum = s.precision + s.recall;
  s.f1 = sum > 0.0 ? 2.0 * s.precision * s.recall / sum : 0.0;
  return s;
}

std::map<std::vector<std::string>, std::size_t> ngram_counts(std::span<const std::string> tokens, std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                      tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

std::map<std::string, double> tf_idf(const std::vector<std::string>& tokens,
                                     const std::map<std::string, std::size_t>& df, std::size_t docs,
                                     const IdfTable* corpus) {
  std::map<std::string, double> v;
  for (const auto& t : tokens) v[t] += 1.0;
  for (auto& [term, weight] : v) {
    if (corpus != nullptr) {
      weight *= corpus->idf(term);
    } else {
      const auto it = df.find(term);
      const double f = it == df.end() ? 0.0 : static_cast<double>(it->second);
      weight *= std::log((1.0 + static_cast<double>(docs)) / (1.0 + f)) + 1.0;
    }
  }
  return v;
}

double sparse_cosine(const std::map<std::string, double>& a, const std::map<std::string, double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (const auto& [t, w] : a) {
    na += w * w;
    const auto it = b.find(t);
    if (it != b.end()) dot += w * it->second;
  }
  for (const auto& [t, w] : b) nb += w * w;
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / std::sqrt(na * nb);
}

}  // namespace

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string word;
  while (is >> word) {
    std::transform(word.begin(), word.end(), word.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    out.push_back(std::move(word));
  }
  return out;
}

RougeScore rouge_n(std::span<const std::string> candidate, std::span<const std::string> reference, std::size_t n) {
  if (n == 0) throw ContractError("rouge_n needs n >= 1");
  const auto cand = ngram_counts(candidate, n);
  const auto ref = ngram_counts(reference, n);
  double overlap = 0.0;
  for (const auto& [gram, count] : cand) {
    const auto it = ref.find(gram);
    if (it != ref.end()) overlap += static_cast<double>(std::min(count, it->second));
  }
  const double cand_total = candidate.size() >= n ? static_cast<double>(candidate.size() - n + 1) : 0.0;
  const double ref_total = reference.size() >= n ? static_cast<double>(reference.size() - n + 1) : 0.0;
  RougeScore s = from_overlap(overlap, cand_total, ref_total);
  s.degenerate = reference.size() < n || candidate.size() < n;
  return s;
}

RougeScore rouge_n(const std::string& candidate, const std::string& reference, std::size_t n) {
  return rouge_n(tokenize(candidate), tokenize(reference), n);
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

RougeScore rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference) {
  const double lcs = static_cast<double>(lcs_length(candidate, reference));
  RougeScore s =
      from_overlap(lcs, static_cast<double>(candidate.size()), static_cast<double>(reference.size()));
  s.degenerate = candidate.empty() || reference.empty();
  return s;
}

RougeScore rouge_l(const std::string& candidate, const std::string& reference) {
  return rouge_l(tokenize(candidate), tokenize(reference));
}

double IdfTable::idf(const std::string& term) const {
  const auto it = document_frequency.find(term);
  const double df = it == document_frequency.end() ? 0.0 : static_cast<double>(it->second);
  return std::log((1.0 + static_cast<double>(documents)) / (1.0 + df)) + 1.0;
}

IdfTable build_idf(const std::vector<std::vector<std::string>>& documents) {
  IdfTable table;
  table.documents = documents.size();
  for (const auto& doc : documents) {
    std::vector<std::string> terms = doc;
    std::sort(terms.begin(), terms.end());
    terms.erase(std::unique(terms.begin(), terms.end()), terms.end());
    for (const auto& t : terms) ++table.document_frequency[t];
  }
  return table;
}

GoldAttention gold_attention(const std::string& summary, const std::vector<std::string>& paragraphs,
                             const IdfTable* corpus) {
  std::vector<std::vector<std::string>> docs;
  for (const auto& p : paragraphs) docs.push_back(tokenize(p));
  if (std::all_of(docs.begin(), docs.end(), [](const auto& d) { return d.empty(); })) {
    throw ContractError("gold_attention needs at least one non-empty paragraph");
  }
  const auto summary_tokens = tokenize(summary);
  std::vector<std::vector<std::string>> collection = docs;
  collection.push_back(summary_tokens);
  const IdfTable local = build_idf(collection);

  const auto s = tf_idf(summary_tokens, local.document_frequency, local.documents, corpus);
  GoldAttention out;
  double total = 0.0;
  for (const auto& d : docs) {
    out.distribution.push_back(sparse_cosine(s, tf_idf(d, local.document_frequency, local.documents, corpus)));
    total += out.distribution.back();
  }
  if (total > 0.0) {
    for (double& v : out.distribution) v /= total;
    return out;
  }
  out.uniform_fallback = true;
  const double live = static_cast<double>(std::count_if(docs.begin(), docs.end(), [](const auto& d) { return !d.empty(); }));
  for (std::size_t p = 0; p < docs.size(); ++p) out.distribution[p] = docs[p].empty() ? 0.0 : 1.0 / live;
  return out;
}

double attention_similarity(std::span<const double> model, std::span<const double> gold) {
  if (model.size() != gold.size()) {
    throw ContractError("attention_similarity needs equal lengths, got " + std::to_string(model.size()) + " and " +
                        std::to_string(gold.size()));
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < model.size(); ++i) {
    dot += model[i] * gold[i];
    na += model[i] * model[i];
    nb += gold[i] * gold[i];
  }
  if (na == 0.0 || nb == 0.0) throw ContractError("attention_similarity of a zero vector");
  return dot / std::sqrt(na * nb);
}

}  // namespace pht::eval
