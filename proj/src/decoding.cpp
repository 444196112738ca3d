#include "pht/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pht/alignment.hpp"
#include "pht/errors.hpp"

namespace pht::decoding {

namespace {

std::vector<double> normalized(const std::vector<double>& mass) {
  const double total = std::accumulate(mass.begin(), mass.end(), 0.0);
  std::vector<double> out(mass.size(), 0.0);
  if (total > 0.0) {
    for (std::size_t i = 0; i < mass.size(); ++i) out[i] = mass[i] / total;
  }
  return out;
}

void check_same_length(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw ContractError(std::string(what) + ": length " + std::to_string(a) + " vs " + std::to_string(b));
  }
}

// max of c / len over len in {lo, hi}; c / len is monotone in len.
double endpoint_max(double c_lo, double c_hi, std::size_t lo, std::size_t hi) {
  return std::max(c_lo / static_cast<double>(lo), c_hi / static_cast<double>(hi));
}

}  // namespace

// ---------------------------------------------------------------------------

PhtStepModel::PhtStepModel(const model::PhtModel& model, const model::EncodedSource& source)
    : model_(model), lengths_(source.paragraph_lengths) {
  NoGradGuard no_grad;
  memory_ = model.prepare(source);
  num_tokens_ = std::accumulate(lengths_.begin(), lengths_.end(), std::size_t{0});
}

std::size_t PhtStepModel::vocab_size() const { return model_.config().vocab_size; }

StepResult PhtStepModel::step(std::span<const int> prefix) const {
  NoGradGuard no_grad;
  const model::DecoderOutput out = model_.decode(prefix, memory_);
  const std::size_t k = prefix.size();
  const std::size_t t = k - 1;
  const std::size_t v = vocab_size();
  const std::size_t m = memory_.num_paragraphs;
  const double layers = static_cast<double>(out.paragraph_attention.size());

  StepResult r;
  const auto logits = out.logits.data().subspan(t * v, v);
  const double top = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double x : logits) z += std::exp(x - top);
  const double log_z = top + std::log(z);
  r.log_probs.reserve(v);
  for (double x : logits) r.log_probs.push_back(x - log_z);

  r.paragraph_attention.assign(m, 0.0);
  for (std::size_t p = 0; p < m; ++p) r.paragraph_attention[p] = out.paragraph_attention_sum.data()[t * m + p] / layers;

  r.token_attention.assign(num_tokens_, 0.0);
  for (std::size_t l = 0; l < out.paragraph_attention.size(); ++l) {
    const auto a = out.paragraph_attention[l].data();
    const auto w = out.word_attention[l].data();
    const std::size_t n = out.word_attention[l].dim(2);
    std::size_t offset = 0;
    for (std::size_t p = 0; p < m; ++p) {
      for (std::size_t i = 0; i < lengths_[p]; ++i) {
        r.token_attention[offset + i] += a[t * m + p] * w[(p * k + t) * n + i] / layers;
      }
      offset += lengths_[p];
    }
  }
  return r;
}

// ---------------------------------------------------------------------------

std::string scorer_name(ScorerKind kind) {
  switch (kind) {
    case ScorerKind::kVanilla: return "vanilla";
    case ScorerKind::kAttAlign: return "attalign";
    case ScorerKind::kStrCov: return "strcov";
    case ScorerKind::kGnmtCoverage: return "gnmt-cp";
    case ScorerKind::kPtrGenCoverage: return "ptrgen-cov";
  }
  throw ContractError("unknown scorer kind");
}

ScorerKind parse_scorer(const std::string& name) {
  for (ScorerKind k : {ScorerKind::kVanilla, ScorerKind::kAttAlign, ScorerKind::kStrCov, ScorerKind::kGnmtCoverage,
                       ScorerKind::kPtrGenCoverage}) {
    if (scorer_name(k) == name) return k;
  }
  throw ConfigError("unknown scorer: " + name);
}

void DecodeConfig::validate() const {
  if (beam_size == 0) throw ConfigError("beam_size must be at least 1");
  if (max_len == 0) throw ConfigError("max_len must be at least 1");
  if (!(beta >= 0.0)) throw ConfigError("beta must be non-negative");
  if (!(coverage_weight >= 0.0)) throw ConfigError("coverage_weight must be non-negative");
}

std::vector<double> BeamHypothesis::eta() const { return normalized(coverage.paragraph); }

double vanilla_score(double log_prob, std::size_t length) {
  if (length == 0) throw ContractError("score of an empty hypothesis");
  return log_prob / static_cast<double>(length);
}

double vanilla_score(const BeamHypothesis& h) { return vanilla_score(h.log_prob, h.scored_steps); }

double att_align_full_score(const BeamHypothesis& h, std::span<const double> eta_hat, double beta) {
  return vanilla_score(h) + beta * align::att_align_score(align::normalize_mass(h.coverage.paragraph), eta_hat);
}

double str_cov_score(std::span<const double> step_attention, std::span<const double> coverage) {
  return 1.0 - ptrgen_coverage(step_attention, coverage);
}

double gnmt_coverage_penalty(std::span<const double> coverage) {
  double cp = 0.0;
  for (double c : coverage) cp += std::log(std::max(std::min(c, 1.0), kCoverageFloor));
  return cp;
}

double ptrgen_coverage(std::span<const double> step_attention, std::span<const double> coverage) {
  check_same_length(step_attention.size(), coverage.size(), "coverage");
  double overlap = 0.0;
  for (std::size_t i = 0; i < coverage.size(); ++i) overlap += std::min(step_attention[i], coverage[i]);
  return overlap;
}

// ---------------------------------------------------------------------------

Scorer::Scorer(ScorerKind kind, double beta, double coverage_weight, std::vector<double> eta_hat)
    : kind_(kind), beta_(beta), weight_(coverage_weight), eta_hat_(std::move(eta_hat)) {
  if (!(beta_ >= 0.0) || !(weight_ >= 0.0)) throw ConfigError("scorer weights must be non-negative");
  if (kind_ == ScorerKind::kAttAlign && eta_hat_.empty()) throw ContractError("attalign scorer needs a prediction");
  for (double e : eta_hat_) eta_hat_log_sum_ += std::log(std::max(e, align::kAlignFloor));
}

Coverage Scorer::advance(const Coverage& before, const StepResult& step) const {
  check_same_length(step.paragraph_attention.size(), before.paragraph.size(), "paragraph attention");
  check_same_length(step.token_attention.size(), before.token.size(), "token attention");
  Coverage after = before;
  if (kind_ == ScorerKind::kStrCov) after.regularizer += str_cov_score(step.paragraph_attention, before.paragraph);
  if (kind_ == ScorerKind::kPtrGenCoverage) {
    after.regularizer += ptrgen_coverage(step.paragraph_attention, before.paragraph);
  }
  for (std::size_t i = 0; i < after.paragraph.size(); ++i) after.paragraph[i] += step.paragraph_attention[i];
  for (std::size_t i = 0; i < after.token.size(); ++i) after.token[i] += step.token_attention[i];
  return after;
}

double Scorer::score(double log_prob, std::size_t length, const Coverage& coverage) const {
  switch (kind_) {
    case ScorerKind::kVanilla:
      return vanilla_score(log_prob, length);
    case ScorerKind::kAttAlign:
      return vanilla_score(log_prob, length) +
             beta_ * align::att_align_score(normalized(coverage.paragraph), eta_hat_);
    case ScorerKind::kStrCov:
      return vanilla_score(log_prob + weight_ * coverage.regularizer, length);
    case ScorerKind::kPtrGenCoverage:
      return vanilla_score(log_prob - weight_ * coverage.regularizer, length);
    case ScorerKind::kGnmtCoverage:
      return vanilla_score(log_prob, length) + weight_ * gnmt_coverage_penalty(coverage.token);
  }
  throw ContractError("unknown scorer kind");
}

// A live hypothesis with `length` scored steps ends with a final length in
// [max(length, 1), max_len]; its log-probability can only fall, strCov gains
// at most 1 per step, cp_t is non-negative and the gnmt penalty is at most 0.
double Scorer::upper_bound(double log_prob, std::size_t length, const Coverage& coverage, std::size_t max_len) const {
  const std::size_t lo = std::max<std::size_t>(length, 1);
  const std::size_t hi = std::max(lo, max_len);
  switch (kind_) {
    case ScorerKind::kVanilla:
    case ScorerKind::kGnmtCoverage:
      return endpoint_max(log_prob, log_prob, lo, hi);
    case ScorerKind::kAttAlign:
      return endpoint_max(log_prob, log_prob, lo, hi) + beta_ * eta_hat_log_sum_;
    case ScorerKind::kStrCov: {
      const double base = log_prob + weight_ * coverage.regularizer;
      return endpoint_max(base + weight_ * static_cast<double>(lo - length),
                          base + weight_ * static_cast<double>(hi - length), lo, hi);
    }
    case ScorerKind::kPtrGenCoverage: {
      const double c = log_prob - weight_ * coverage.regularizer;
      return endpoint_max(c, c, lo, hi);
    }
  }
  throw ContractError("unknown scorer kind");
}

// ---------------------------------------------------------------------------

void apply_constraints(std::span<const int> history, std::span<double> log_probs, const DecodeConfig& config) {
  auto block = [&](int token) {
    if (token == kEosId || token < 0 || static_cast<std::size_t>(token) >= log_probs.size()) return;
    log_probs[static_cast<std::size_t>(token)] = kNegInf;
  };
  const std::size_t n = config.block_ngram;
  if (n > 0 && history.size() + 1 >= n) {
    const std::size_t context = n - 1;
    const auto suffix = history.subspan(history.size() - context);
    for (std::size_t i = 0; i + n <= history.size(); ++i) {
      if (std::equal(suffix.begin(), suffix.end(), history.begin() + static_cast<std::ptrdiff_t>(i))) {
        block(history[i + context]);
      }
    }
  }
  const std::size_t window = std::min(config.block_window, history.size());
  for (std::size_t j = history.size() - window; j < history.size(); ++j) {
    if (history[j] != config.exempt_token) block(history[j]);
  }
}

namespace {

bool better(const BeamHypothesis& a, const BeamHypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.tokens < b.tokens;
}

}  // namespace

DecodeResult beam_search(const StepModel& model, const DecodeConfig& config, const Scorer& scorer) {
  config.validate();
  const std::size_t m = model.num_paragraphs();
  const std::size_t vocab = model.vocab_size();
  if (scorer.kind() == ScorerKind::kAttAlign) check_same_length(scorer.eta_hat().size(), m, "eta_hat");

  BeamHypothesis root;
  root.coverage.paragraph.assign(m, 0.0);
  root.coverage.token.assign(model.num_source_tokens(), 0.0);
  std::vector<BeamHypothesis> live{root};
  std::vector<BeamHypothesis> finished;
  DecodeResult result;

  struct Candidate {
    std::size_t parent;
    int token;
    double step_log_prob;
    double score;
  };

  for (std::size_t step = 1; step <= config.max_len && !live.empty(); ++step) {
    result.steps = step;
    std::vector<Candidate> candidates;
    std::vector<Coverage> next(live.size());
    for (std::size_t i = 0; i < live.size(); ++i) {
      const BeamHypothesis& h = live[i];
      std::vector<int> prefix{kBosId};
      prefix.insert(prefix.end(), h.tokens.begin(), h.tokens.end());
      StepResult r = model.step(prefix);
      check_same_length(r.log_probs.size(), vocab, "log_probs");
      for (int special : {kPadId, kBosId}) {
        if (static_cast<std::size_t>(special) < vocab) r.log_probs[static_cast<std::size_t>(special)] = kNegInf;
      }
      apply_constraints(h.tokens, r.log_probs, config);
      next[i] = scorer.advance(h.coverage, r);
      bool any = false;
      for (std::size_t v = 0; v < vocab; ++v) {
        const double lp = r.log_probs[v];
        if (!(lp > kNegInf)) continue;
        any = true;
        candidates.push_back({i, static_cast<int>(v), lp, scorer.score(h.log_prob + lp, h.scored_steps + 1, next[i])});
      }
      if (!any) {
        BeamHypothesis dead = h;
        dead.tokens.push_back(kEosId);
        dead.finished = dead.forced = dead.degenerate = true;
        dead.score = scorer.score(h.log_prob, std::max<std::size_t>(h.scored_steps, 1), h.coverage);
        finished.push_back(std::move(dead));
        result.degenerate = true;
      }
    }

    std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.token != b.token) return a.token < b.token;
      return a.parent < b.parent;
    });
    if (candidates.size() > config.beam_size) candidates.resize(config.beam_size);

    std::vector<BeamHypothesis> survivors;
    for (const Candidate& c : candidates) {
      BeamHypothesis h = live[c.parent];
      h.tokens.push_back(c.token);
      h.step_log_probs.push_back(c.step_log_prob);
      h.log_prob += c.step_log_prob;
      h.scored_steps += 1;
      h.coverage = next[c.parent];
      h.score = c.score;
      if (c.token == kEosId) {
        h.finished = true;
        finished.push_back(std::move(h));
      } else {
        survivors.push_back(std::move(h));
      }
    }
    live = std::move(survivors);

    if (step == config.max_len) {
      for (BeamHypothesis& h : live) {
        h.tokens.push_back(kEosId);
        h.finished = h.forced = true;
        finished.push_back(std::move(h));
      }
      live.clear();
    }

    std::sort(finished.begin(), finished.end(), better);
    if (finished.size() > config.beam_size) finished.resize(config.beam_size);
    if (finished.size() >= config.beam_size && !live.empty()) {
      double best = kNegInf;
      for (const BeamHypothesis& h : live) {
        best = std::max(best, scorer.upper_bound(h.log_prob, h.scored_steps, h.coverage, config.max_len));
      }
      if (best <= finished.back().score) break;
    }
  }
  result.ranked = std::move(finished);
  return result;
}

// ---------------------------------------------------------------------------

CompressedSource compress_source(const model::SourceDocument& source, std::span<const double> eta_hat,
                                 std::size_t s) {
  const std::size_t m = source.paragraphs.size();
  check_same_length(eta_hat.size(), m, "eta_hat");
  check_same_length(source.ranks.size(), m, "ranks");
  if (s == 0) throw ContractError("compression must keep at least one paragraph");
  CompressedSource out;
  if (s >= m) {
    out.source = source;
    out.eta_hat.assign(eta_hat.begin(), eta_hat.end());
    out.kept.resize(m);
    std::iota(out.kept.begin(), out.kept.end(), 0);
    out.clamped = s > m;
    return out;
  }
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return eta_hat[a] > eta_hat[b]; });
  out.kept.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(s));
  std::sort(out.kept.begin(), out.kept.end());
  double total = 0.0;
  for (std::size_t p : out.kept) {
    out.source.paragraphs.push_back(source.paragraphs[p]);
    out.source.ranks.push_back(source.ranks[p]);
    out.eta_hat.push_back(eta_hat[p]);
    total += eta_hat[p];
  }
  if (!(total > 0.0)) throw ContractError("retained paragraphs carry no predicted attention");
  for (double& e : out.eta_hat) e /= total;
  return out;
}

}  // namespace pht::decoding
