#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "pht/decoding.hpp"
#include "pht/errors.hpp"
#include "toy_models.hpp"

namespace pht::decoding {
namespace {

using testing::HashStepModel;

BeamHypothesis hypothesis(double log_prob, std::size_t length, std::vector<double> paragraph = {}) {
  BeamHypothesis h;
  h.log_prob = log_prob;
  h.scored_steps = length;
  h.coverage.paragraph = std::move(paragraph);
  return h;
}

DecodeConfig unconstrained(std::size_t beam, std::size_t max_len) {
  DecodeConfig c;
  c.beam_size = beam;
  c.max_len = max_len;
  c.block_ngram = 0;
  c.block_window = 0;
  return c;
}

// ---------------------------------------------------------------------------

TEST(ScorerTest, VanillaIsPerTokenMean) {
  EXPECT_DOUBLE_EQ(vanilla_score(hypothesis(-10.0, 5)), -2.0);
  EXPECT_EQ(vanilla_score(hypothesis(0.0, 1)), 0.0);
  EXPECT_DOUBLE_EQ(vanilla_score(-3.0, 3), vanilla_score(-6.0, 6));
  EXPECT_THROW(vanilla_score(-1.0, 0), ContractError);
}

TEST(ScorerTest, AttAlignAddsWeightedAlignment) {
  const double x = 2.0 * std::exp(-2.0);  // log 0.5 + log x == -2
  const std::vector<double> eta_hat{0.5, 0.5};
  const BeamHypothesis h = hypothesis(-10.0, 5, {x, 1.0 - x});
  EXPECT_NEAR(att_align_full_score(h, eta_hat, 0.8), -3.6, 1e-12);
  EXPECT_EQ(att_align_full_score(h, eta_hat, 0.0), vanilla_score(h));
  const BeamHypothesis aligned = hypothesis(-4.0, 2, {1.0, 1.0});
  EXPECT_NEAR(att_align_full_score(aligned, eta_hat, 0.8), -2.0 + 0.8 * 2.0 * std::log(0.5), 1e-12);
}

TEST(ScorerTest, StrCovExamples) {
  const std::vector<double> alpha{0.3, 0.7};
  EXPECT_EQ(str_cov_score(alpha, std::vector<double>{0.0, 0.0}), 1.0);
  EXPECT_NEAR(str_cov_score(alpha, alpha), 0.0, 1e-15);
  EXPECT_NEAR(str_cov_score(alpha, std::vector<double>{0.9, 2.0}), 0.0, 1e-15);
}

TEST(ScorerTest, StrCovCollapsesToZeroOnLongStreams) {
  // Once every coverage entry reaches 1 it bounds any attention row, so each
  // later step overlaps completely.
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> logit(-2.0, 2.0);
  for (int stream = 0; stream < 50; ++stream) {
    const std::size_t m = 2 + stream % 6;
    std::vector<double> coverage(m, 0.0);
    std::size_t saturated_at = 0;
    for (std::size_t t = 1; t <= 200; ++t) {
      std::vector<double> l(m);
      for (double& v : l) v = logit(rng);
      const auto alpha = HashStepModel::softmax(l);
      bool dominated = true;
      for (std::size_t i = 0; i < m; ++i) dominated = dominated && coverage[i] >= alpha[i];
      const double value = str_cov_score(alpha, coverage);
      if (t == 1) EXPECT_EQ(value, 1.0);
      if (dominated) EXPECT_LE(std::abs(value), 1e-6);
      if (saturated_at > 0) EXPECT_LE(std::abs(value), 1e-6);
      for (std::size_t i = 0; i < m; ++i) coverage[i] += alpha[i];
      if (saturated_at == 0 && *std::min_element(coverage.begin(), coverage.end()) >= 1.0) saturated_at = t;
    }
    EXPECT_GT(saturated_at, 0u) << "stream " << stream;
  }
}

TEST(ScorerTest, GnmtPenaltyExamples) {
  EXPECT_EQ(gnmt_coverage_penalty(std::vector<double>{1.0, 3.0}), 0.0);
  EXPECT_NEAR(gnmt_coverage_penalty(std::vector<double>{1.0, 0.5}), std::log(0.5), 1e-15);
  EXPECT_NEAR(gnmt_coverage_penalty(std::vector<double>{0.0}), std::log(1e-12), 1e-12);
  double previous = -1e300;
  for (double c = 0.05; c <= 1.5; c += 0.05) {
    const double cp = gnmt_coverage_penalty(std::vector<double>{0.7, c});
    EXPECT_GE(cp, previous);
    EXPECT_LE(cp, 0.0);
    previous = cp;
  }
}

TEST(ScorerTest, PtrGenCoverageExamples) {
  EXPECT_EQ(ptrgen_coverage(std::vector<double>{0.4, 0.6}, std::vector<double>{0.0, 0.0}), 0.0);
  EXPECT_EQ(ptrgen_coverage(std::vector<double>{0.5, 0.5}, std::vector<double>{0.5, 0.5}), 1.0);
  EXPECT_EQ(ptrgen_coverage(std::vector<double>{1.0, 0.0}, std::vector<double>{0.0, 2.0}), 0.0);
}

TEST(ScorerTest, ParseNames) {
  for (const char* name : {"vanilla", "attalign", "strcov", "gnmt-cp", "ptrgen-cov"}) {
    EXPECT_EQ(scorer_name(parse_scorer(name)), name);
  }
  EXPECT_THROW(parse_scorer("extprob"), ConfigError);
}

// ---------------------------------------------------------------------------

TEST(ConstraintTest, RepeatedTrigramIsBlocked) {
  const int a = 5, b = 6, c = 7;
  std::vector<double> lp(10, -1.0);
  apply_constraints(std::vector<int>{a, b, c, a, b}, lp, DecodeConfig{});
  EXPECT_EQ(lp[c], kNegInf);
}

TEST(ConstraintTest, WindowBlocksRecentTokensExceptComma) {
  const int x = 5, y = 6;
  std::vector<double> lp(10, -1.0);
  apply_constraints(std::vector<int>{x, y}, lp, DecodeConfig{});
  EXPECT_EQ(lp[x], kNegInf);
  EXPECT_EQ(lp[y], kNegInf);
  std::vector<double> lp2(10, -1.0);
  apply_constraints(std::vector<int>{kCommaId, x}, lp2, DecodeConfig{});
  EXPECT_EQ(lp2[kCommaId], -1.0);
  EXPECT_EQ(lp2[x], kNegInf);
}

TEST(ConstraintTest, EndOfSequenceIsNeverBlocked) {
  std::vector<double> lp(10, -1.0);
  apply_constraints(std::vector<int>{kEosId, 5, kEosId, 5}, lp, DecodeConfig{});
  EXPECT_EQ(lp[kEosId], -1.0);
}

TEST(ConstraintTest, DisabledRulesLeaveScoresAlone) {
  std::vector<double> lp(10, -1.0);
  apply_constraints(std::vector<int>{5, 6, 7, 5, 6}, lp, unconstrained(1, 5));
  for (double v : lp) EXPECT_EQ(v, -1.0);
}

// ---------------------------------------------------------------------------

std::vector<int> greedy(const StepModel& model, const DecodeConfig& config) {
  std::vector<int> out;
  while (out.size() < config.max_len) {
    std::vector<int> prefix{kBosId};
    prefix.insert(prefix.end(), out.begin(), out.end());
    StepResult r = model.step(prefix);
    r.log_probs[kPadId] = r.log_probs[kBosId] = kNegInf;
    apply_constraints(out, r.log_probs, config);
    const auto best = std::max_element(r.log_probs.begin(), r.log_probs.end());
    out.push_back(static_cast<int>(best - r.log_probs.begin()));
    if (out.back() == kEosId) return out;
  }
  out.push_back(kEosId);
  return out;
}

TEST(BeamSearchTest, BeamOfOneIsGreedy) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const HashStepModel model(seed, 9, 3, 6, 1.0);
    DecodeConfig config;
    config.beam_size = 1;
    config.max_len = 25;
    const Scorer scorer(ScorerKind::kVanilla, 0.0, 0.0);
    EXPECT_EQ(beam_search(model, config, scorer).ranked.front().tokens, greedy(model, config)) << "seed " << seed;
  }
}

TEST(BeamSearchTest, ZeroBetaAttAlignMatchesVanilla) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const HashStepModel model(seed, 9, 4, 6, 1.0);
    DecodeConfig config;
    config.max_len = 20;
    const auto vanilla = beam_search(model, config, Scorer(ScorerKind::kVanilla, 0.0, 0.0)).ranked;
    const auto aligned =
        beam_search(model, config, Scorer(ScorerKind::kAttAlign, 0.0, 0.0, {0.1, 0.2, 0.3, 0.4})).ranked;
    ASSERT_EQ(vanilla.size(), aligned.size());
    for (std::size_t i = 0; i < vanilla.size(); ++i) EXPECT_EQ(vanilla[i].tokens, aligned[i].tokens);
  }
}

class ExhaustiveTest : public ::testing::TestWithParam<ScorerKind> {};

TEST_P(ExhaustiveTest, FullWidthBeamFindsScorerArgmax) {
  const ScorerKind kind = GetParam();
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    // Ids 0 and 1 are suppressed, leaving five choices per step.
    const HashStepModel model(seed * 31 + 7, 7, 3, 4, 1.0);
    const std::size_t length = 2 + seed % 3;
    const std::size_t beam = static_cast<std::size_t>(std::pow(5.0, static_cast<double>(length)));
    const std::vector<double> eta_hat{0.5, 0.3, 0.2};
    const Scorer scorer(kind, 0.8, 0.7, kind == ScorerKind::kAttAlign ? eta_hat : std::vector<double>{});
    const auto oracle = testing::exhaustive_argmax(model, kind, length, 0.8, 0.7, eta_hat);
    const auto result = beam_search(model, unconstrained(beam, length), scorer);
    EXPECT_EQ(result.ranked.front().tokens, oracle.tokens) << "seed " << seed;
    EXPECT_NEAR(result.ranked.front().score, oracle.score, 1e-12);
  }
}

INSTANTIATE_TEST_SUITE_P(AllScorers, ExhaustiveTest,
                         ::testing::Values(ScorerKind::kVanilla, ScorerKind::kAttAlign, ScorerKind::kStrCov,
                                           ScorerKind::kGnmtCoverage, ScorerKind::kPtrGenCoverage),
                         [](const auto& info) {
                           std::string n = scorer_name(info.param);
                           n.erase(std::remove(n.begin(), n.end(), '-'), n.end());
                           return n;
                         });

TEST(BeamSearchTest, OutputsRespectConstraints) {
  std::size_t outputs = 0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    // Small vocabulary with the comma so the rules actually bind.
    const HashStepModel model(seed, 8, 3, 5, 0.3);
    DecodeConfig config;
    config.max_len = 30;
    for (const auto& h : beam_search(model, config, Scorer(ScorerKind::kVanilla, 0.0, 0.0)).ranked) {
      const auto v = testing::scan_constraints(h.tokens, kCommaId);
      EXPECT_EQ(v.repeated_trigrams, 0u);
      EXPECT_EQ(v.window, 0u);
      ++outputs;
    }
  }
  EXPECT_GT(outputs, 100u);
}

TEST(BeamSearchTest, HypothesisBookkeepingIsConsistent) {
  const HashStepModel model(5, 9, 3, 6, 1.0);
  DecodeConfig config;
  config.max_len = 15;
  const Scorer scorer(ScorerKind::kStrCov, 0.0, 1.0);
  for (const auto& h : beam_search(model, config, scorer).ranked) {
    EXPECT_NEAR(h.log_prob, std::accumulate(h.step_log_probs.begin(), h.step_log_probs.end(), 0.0), 1e-9);
    EXPECT_EQ(h.step_log_probs.size(), h.scored_steps);
    EXPECT_LE(h.tokens.size(), config.max_len + 1);
    EXPECT_EQ(h.tokens.back(), kEosId);
    const double mass = std::accumulate(h.coverage.paragraph.begin(), h.coverage.paragraph.end(), 0.0);
    EXPECT_NEAR(mass, static_cast<double>(h.scored_steps), 1e-9);
    EXPECT_NEAR(h.score, scorer.score(h.log_prob, h.scored_steps, h.coverage), 1e-12);
  }
}

TEST(BeamSearchTest, CapForcesEndOfSequence) {
  // Sharp model that never prefers EOS within three steps.
  const HashStepModel model(11, 12, 2, 2, 0.1);
  const auto result = beam_search(model, unconstrained(2, 3), Scorer(ScorerKind::kVanilla, 0.0, 0.0));
  for (const auto& h : result.ranked) {
    EXPECT_LE(h.tokens.size(), 4u);
    if (h.forced) {
      EXPECT_EQ(h.tokens.size(), 4u);
      EXPECT_EQ(h.scored_steps, 3u);
    }
  }
}

class OneTokenModel : public StepModel {
 public:
  std::size_t vocab_size() const override { return 6; }
  std::size_t num_paragraphs() const override { return 1; }
  std::size_t num_source_tokens() const override { return 0; }
  StepResult step(std::span<const int>) const override {
    StepResult r;
    r.log_probs.assign(6, kNegInf);
    r.log_probs[5] = 0.0;
    r.paragraph_attention = {1.0};
    return r;
  }
};

TEST(BeamSearchTest, ExhaustedBeamIsFlaggedDegenerate) {
  const auto result = beam_search(OneTokenModel{}, DecodeConfig{}, Scorer(ScorerKind::kVanilla, 0.0, 0.0));
  EXPECT_TRUE(result.degenerate);
  ASSERT_FALSE(result.ranked.empty());
  EXPECT_EQ(result.ranked.front().tokens, (std::vector<int>{5, kEosId}));
  EXPECT_TRUE(result.ranked.front().degenerate);
}

TEST(BeamSearchTest, RejectsInvalidConfig) {
  const HashStepModel model(1, 8, 2, 2);
  DecodeConfig config;
  config.beam_size = 0;
  EXPECT_THROW(beam_search(model, config, Scorer(ScorerKind::kVanilla, 0.0, 0.0)), ConfigError);
  EXPECT_THROW(beam_search(model, DecodeConfig{}, Scorer(ScorerKind::kAttAlign, 0.8, 0.0, {1.0})), ContractError);
}

// ---------------------------------------------------------------------------

model::SourceDocument three_paragraphs() { return {{{5}, {6, 6}, {7, 7, 7}}, {0, 1, 2}}; }

TEST(CompressTest, FullWidthIsIdentity) {
  const auto src = three_paragraphs();
  const std::vector<double> eta{0.1, 0.6, 0.3};
  const auto out = compress_source(src, eta, 3);
  EXPECT_EQ(out.source.paragraphs, src.paragraphs);
  EXPECT_EQ(out.source.ranks, src.ranks);
  EXPECT_EQ(out.eta_hat, eta);
  EXPECT_FALSE(out.clamped);
  EXPECT_TRUE(compress_source(src, eta, 7).clamped);
}

TEST(CompressTest, KeepsTopTwoInOriginalOrder) {
  const auto out = compress_source(three_paragraphs(), std::vector<double>{0.1, 0.6, 0.3}, 2);
  EXPECT_EQ(out.kept, (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(out.source.ranks, (std::vector<std::size_t>{1, 2}));
  EXPECT_NEAR(out.eta_hat[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(out.eta_hat[1], 1.0 / 3.0, 1e-15);
}

TEST(CompressTest, SingleParagraphIsArgmax) {
  const auto out = compress_source(three_paragraphs(), std::vector<double>{0.1, 0.6, 0.3}, 1);
  EXPECT_EQ(out.kept, std::vector<std::size_t>{1});
  EXPECT_EQ(out.eta_hat, std::vector<double>{1.0});
  EXPECT_THROW(compress_source(three_paragraphs(), std::vector<double>{0.1, 0.6, 0.3}, 0), ContractError);
}

TEST(CompressTest, NeverReordersRetainedParagraphs) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = 2 + trial % 9;
    model::SourceDocument src;
    std::vector<double> eta(m);
    for (std::size_t p = 0; p < m; ++p) {
      src.paragraphs.push_back({static_cast<int>(p) + 5});
      src.ranks.push_back(p);
      eta[p] = u(rng);
    }
    const double total = std::accumulate(eta.begin(), eta.end(), 0.0);
    for (double& e : eta) e /= total;
    const auto out = compress_source(src, eta, 1 + trial % m);
    EXPECT_TRUE(std::is_sorted(out.kept.begin(), out.kept.end()));
    EXPECT_TRUE(std::is_sorted(out.source.ranks.begin(), out.source.ranks.end()));
    EXPECT_NEAR(std::accumulate(out.eta_hat.begin(), out.eta_hat.end(), 0.0), 1.0, 1e-12);
  }
}

// ---------------------------------------------------------------------------

TEST(PhtStepModelTest, StepOutputsAreDistributions) {
  model::ModelConfig cfg;
  cfg.vocab_size = 20;
  cfg.model_dim = 8;
  cfg.ffn_dim = 16;
  cfg.num_heads = 2;
  cfg.num_layers = 2;
  cfg.max_target_len = 12;
  const model::PhtModel m(cfg);
  const model::EncodedSource enc = m.encode({{{5, 6, 7}, {}, {8, 9}}, {0, 1, 2}});
  const PhtStepModel step_model(m, enc);
  EXPECT_EQ(step_model.num_source_tokens(), 5u);
  const StepResult r = step_model.step(std::vector<int>{kBosId, 5, 6});
  double p = 0.0;
  for (double lp : r.log_probs) p += std::exp(lp);
  EXPECT_NEAR(p, 1.0, 1e-12);
  EXPECT_NEAR(std::accumulate(r.paragraph_attention.begin(), r.paragraph_attention.end(), 0.0), 1.0, 1e-9);
  EXPECT_EQ(r.paragraph_attention[1], 0.0);
  EXPECT_NEAR(std::accumulate(r.token_attention.begin(), r.token_attention.end(), 0.0), 1.0, 1e-9);

  DecodeConfig config;
  config.max_len = 11;
  const auto result = beam_search(step_model, config, Scorer(ScorerKind::kAttAlign, 0.8, 0.0, {0.5, 0.0, 0.5}));
  ASSERT_FALSE(result.ranked.empty());
  EXPECT_LE(result.ranked.front().tokens.size(), 12u);
}

}  // namespace
}  // namespace pht::decoding
