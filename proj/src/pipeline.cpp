#include "pht/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <thread>

#include "pht/errors.hpp"
#include "pht/eval.hpp"
#include "pht/special_tokens.hpp"

namespace pht::pipeline {

std::vector<LabelRecord> extract_labels(const model::PhtModel& model, const std::vector<Sample>& samples) {
  const bool title = model.config().title_as_paragraph;
  std::vector<LabelRecord> out;
  for (const Sample& s : samples) out.push_back({s.id, align::label_from_model(model, to_example(s, title)).eta});
  return out;
}

void write_labels(const std::filesystem::path& path, const std::vector<LabelRecord>& labels) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write labels: " + path.string());
  for (const auto& l : labels) {
    nlohmann::json doc;
    doc["id"] = l.id;
    doc["m"] = l.eta.size();
    doc["eta"] = l.eta;
    os << doc.dump() << '\n';
  }
  if (!os) throw IoError("failed writing labels: " + path.string());
}

std::vector<LabelRecord> read_labels(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read labels: " + path.string());
  std::vector<LabelRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto doc = nlohmann::json::parse(line);
      LabelRecord l{doc.at("id").get<std::string>(), doc.at("eta").get<std::vector<double>>()};
      if (doc.at("m").get<std::size_t>() != l.eta.size()) throw InputError("m disagrees with eta length");
      out.push_back(std::move(l));
    } catch (const std::exception& e) {
      throw InputError(path.string() + ":" + std::to_string(line_no) + ": bad label record: " + e.what());
    }
  }
  return out;
}

std::vector<align::AlignmentPair> alignment_pairs(const model::PhtModel& model, const std::vector<Sample>& samples,
                                                  const std::vector<LabelRecord>& labels) {
  std::map<std::string, const LabelRecord*> by_id;
  for (const auto& l : labels) by_id[l.id] = &l;
  NoGradGuard no_grad;
  std::vector<align::AlignmentPair> out;
  for (const Sample& s : samples) {
    const auto it = by_id.find(s.id);
    if (it == by_id.end()) throw ContractError("no label for sample " + s.id);
    const auto enc = model.encode(to_example(s, model.config().title_as_paragraph).source);
    if (enc.num_paragraphs() != it->second->eta.size()) {
      throw ContractError("label for " + s.id + " covers " + std::to_string(it->second->eta.size()) +
                          " paragraphs, source has " + std::to_string(enc.num_paragraphs()));
    }
    out.push_back({enc.paragraph_embeddings.detach(), it->second->eta, enc.paragraph_present});
  }
  return out;
}

void write_predictor_sidecar(const std::filesystem::path& path, const PredictorSidecar& sidecar) {
  KeyValueDoc doc = sidecar.config.to_doc();
  doc.set("align.steps", static_cast<std::uint64_t>(sidecar.training.steps));
  doc.set("align.batch_size", static_cast<std::uint64_t>(sidecar.training.batch_size));
  doc.set("align.base_rate", sidecar.training.base_rate);
  doc.set("align.warmup_steps", sidecar.training.warmup_steps);
  doc.set("align.seed", sidecar.training.seed);
  doc.set("vocab_hash", sidecar.vocab_hash);
  doc.save(path);
}

PredictorSidecar read_predictor_sidecar(const std::filesystem::path& path) {
  const auto doc = KeyValueDoc::load(path);
  PredictorSidecar s;
  s.config = align::PredictorConfig::from_doc(doc);
  if (doc.contains("align.steps")) s.training.steps = doc.get_uint("align.steps");
  if (doc.contains("align.batch_size")) s.training.batch_size = doc.get_uint("align.batch_size");
  if (doc.contains("align.base_rate")) s.training.base_rate = doc.get_double("align.base_rate");
  if (doc.contains("align.warmup_steps")) s.training.warmup_steps = doc.get_int("align.warmup_steps");
  if (doc.contains("align.seed")) s.training.seed = doc.get_uint("align.seed");
  s.vocab_hash = doc.get_uint("vocab_hash");
  return s;
}

nlohmann::json GenerationRecord::to_json() const {
  nlohmann::json doc;
  doc["id"] = id;
  doc["summary"] = summary;
  doc["tokens"] = tokens;
  doc["score"] = score;
  doc["eta_y"] = eta_y;
  doc["eta_hat"] = eta_hat;
  doc["forced"] = forced;
  doc["degenerate"] = degenerate;
  doc["title_included"] = title_included;
  doc["kept"] = kept;
  return doc;
}

GenerationRecord GenerationRecord::from_json(const nlohmann::json& doc) {
  GenerationRecord r;
  r.id = doc.at("id").get<std::string>();
  r.summary = doc.at("summary").get<std::string>();
  r.tokens = doc.at("tokens").get<std::vector<int>>();
  r.score = doc.at("score").get<double>();
  r.eta_y = doc.at("eta_y").get<std::vector<double>>();
  r.eta_hat = doc.at("eta_hat").get<std::vector<double>>();
  r.forced = doc.at("forced").get<bool>();
  r.degenerate = doc.at("degenerate").get<bool>();
  r.title_included = doc.at("title_included").get<bool>();
  r.kept = doc.at("kept").get<std::vector<std::size_t>>();
  return r;
}

GenerationRecord summarize_sample(const model::PhtModel& model, const align::AttentionPredictor* predictor,
                                  const Vocabulary& vocab, const Sample& sample, const decoding::DecodeConfig& config) {
  config.validate();
  const bool needs_predictor = config.scorer == decoding::ScorerKind::kAttAlign || config.compress_s > 0;
  if (needs_predictor && predictor == nullptr) {
    throw ConfigError("scorer " + decoding::scorer_name(config.scorer) +
                      (config.compress_s > 0 ? " with compression" : "") + " needs an attention predictor");
  }
  NoGradGuard no_grad;
  const model::ModelConfig& cfg = model.config();
  model::SourceDocument source = to_example(sample, cfg.title_as_paragraph).source;
  if (source.paragraphs.size() > cfg.max_paragraphs) {
    source.paragraphs.resize(cfg.max_paragraphs);
    source.ranks.resize(cfg.max_paragraphs);
  }
  const std::size_t m = source.paragraphs.size();

  GenerationRecord rec;
  rec.id = sample.id;
  rec.title_included = cfg.title_as_paragraph && !sample.title.empty();
  model::EncodedSource encoded = model.encode(source);
  std::vector<double> eta_hat;
  if (predictor != nullptr) eta_hat = predictor->predict(encoded.paragraph_embeddings, encoded.paragraph_present);
  rec.eta_hat = eta_hat;

  std::vector<double> decode_eta = eta_hat;
  rec.kept.resize(m);
  for (std::size_t p = 0; p < m; ++p) rec.kept[p] = p;
  if (config.compress_s > 0) {
    decoding::CompressedSource compressed = decoding::compress_source(source, eta_hat, config.compress_s);
    encoded = model.encode(compressed.source);
    decode_eta = std::move(compressed.eta_hat);
    rec.kept = std::move(compressed.kept);
  }

  decoding::DecodeConfig effective = config;
  effective.max_len = std::min(config.max_len, cfg.max_target_len);
  const decoding::Scorer scorer(config.scorer, config.beta, config.coverage_weight,
                                config.scorer == decoding::ScorerKind::kAttAlign ? decode_eta : std::vector<double>{});
  const decoding::PhtStepModel step_model(model, encoded);
  const decoding::DecodeResult result = decoding::beam_search(step_model, effective, scorer);
  const decoding::BeamHypothesis& best = result.ranked.front();

  rec.tokens = best.tokens;
  if (!rec.tokens.empty() && rec.tokens.back() == kEosId) rec.tokens.pop_back();
  rec.summary = vocab.decode(rec.tokens);
  rec.score = best.score;
  rec.forced = best.forced;
  rec.degenerate = best.degenerate || result.degenerate;
  rec.eta_y.assign(m, 0.0);
  const std::vector<double> eta_y = best.eta();
  for (std::size_t i = 0; i < rec.kept.size() && i < eta_y.size(); ++i) rec.eta_y[rec.kept[i]] = eta_y[i];
  return rec;
}

std::vector<GenerationRecord> summarize(const model::PhtModel& model, const align::AttentionPredictor* predictor,
                                        const Vocabulary& vocab, const std::vector<Sample>& samples,
                                        const SummarizeOptions& options) {
  std::vector<GenerationRecord> out(samples.size());
  const std::size_t threads = std::max<std::size_t>(1, std::min(options.threads, samples.size()));
  if (threads == 1) {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      out[i] = summarize_sample(model, predictor, vocab, samples[i], options.decode);
    }
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < samples.size(); i = next++) {
      try {
        out[i] = summarize_sample(model, predictor, vocab, samples[i], options.decode);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = samples.size();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return out;
}

void write_generations(const std::filesystem::path& path, const std::vector<GenerationRecord>& records) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write generations: " + path.string());
  for (const auto& r : records) os << r.to_json().dump() << '\n';
  if (!os) throw IoError("failed writing generations: " + path.string());
}

std::vector<GenerationRecord> read_generations(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read generations: " + path.string());
  std::vector<GenerationRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(GenerationRecord::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw InputError(path.string() + ":" + std::to_string(line_no) + ": bad generation record: " + e.what());
    }
  }
  return out;
}

nlohmann::json evaluate(const std::vector<GenerationRecord>& records, const std::vector<RawRecord>& references) {
  std::map<std::string, const RawRecord*> by_id;
  for (const auto& r : references) by_id[r.id] = &r;
  nlohmann::json samples = nlohmann::json::array();
  double r1 = 0.0, r2 = 0.0, rl = 0.0, cos_y = 0.0, cos_hat = 0.0;
  std::size_t n_hat = 0;
  for (const auto& rec : records) {
    const auto it = by_id.find(rec.id);
    if (it == by_id.end()) throw ContractError("no reference for generated sample " + rec.id);
    const RawRecord& ref = *it->second;
    nlohmann::json s;
    s["id"] = rec.id;
    s["rouge1"] = eval::rouge_n(rec.summary, ref.summary, 1).f1;
    s["rouge2"] = eval::rouge_n(rec.summary, ref.summary, 2).f1;
    s["rougeL"] = eval::rouge_l(rec.summary, ref.summary).f1;
    r1 += s["rouge1"].get<double>();
    r2 += s["rouge2"].get<double>();
    rl += s["rougeL"].get<double>();

    std::vector<std::string> paragraphs;
    if (rec.title_included) paragraphs.push_back(ref.title);
    paragraphs.insert(paragraphs.end(), ref.paragraphs.begin(), ref.paragraphs.end());
    paragraphs.resize(rec.eta_y.size());
    const auto gold = eval::gold_attention(ref.summary, paragraphs);
    s["gold_attention"] = gold.distribution;
    s["gold_uniform_fallback"] = gold.uniform_fallback;
    s["attention_cosine"] = eval::attention_similarity(rec.eta_y, gold.distribution);
    cos_y += s["attention_cosine"].get<double>();
    if (!rec.eta_hat.empty()) {
      s["predicted_attention_cosine"] = eval::attention_similarity(rec.eta_hat, gold.distribution);
      s["eta_y_eta_hat_cosine"] = eval::attention_similarity(rec.eta_y, rec.eta_hat);
      cos_hat += s["eta_y_eta_hat_cosine"].get<double>();
      ++n_hat;
    }
    samples.push_back(std::move(s));
  }
  const double n = static_cast<double>(std::max<std::size_t>(records.size(), 1));
  nlohmann::json report;
  report["samples"] = samples;
  report["count"] = records.size();
  report["mean"] = {{"rouge1", r1 / n}, {"rouge2", r2 / n}, {"rougeL", rl / n}, {"attention_cosine", cos_y / n}};
  if (n_hat > 0) report["mean"]["eta_y_eta_hat_cosine"] = cos_hat / static_cast<double>(n_hat);
  return report;
}

void check_vocab_hash(std::uint64_t expected, std::uint64_t actual, const std::string& what) {
  if (expected != actual) {
    throw ConfigError(what + " was built with vocabulary hash " + std::to_string(expected) +
                      " but the supplied vocabulary hashes to " + std::to_string(actual));
  }
}

}  // namespace pht::pipeline
