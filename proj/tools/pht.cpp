// Command-line front end: corpus preparation, training of the summarizer and
// the attention predictor, summarization and evaluation.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "pht/dataset.hpp"
#include "pht/errors.hpp"
#include "pht/pipeline.hpp"
#include "pht/training.hpp"
#include "pht/vocab.hpp"

namespace fs = std::filesystem;
using namespace pht;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;

struct LoadedModel {
  train::ModelSidecar sidecar;
  Vocabulary vocab;
  std::unique_ptr<model::PhtModel> model;
};

// The model directory holds model.cfg, vocab.json and the checkpoints.
LoadedModel load_model_dir(const fs::path& dir, const std::string& vocab_override, const std::string& checkpoint) {
  LoadedModel m;
  m.sidecar = train::read_model_sidecar(dir / "model.cfg");
  m.vocab = Vocabulary::load(vocab_override.empty() ? dir / "vocab.json" : fs::path(vocab_override));
  pipeline::check_vocab_hash(m.sidecar.vocab_hash, m.vocab.hash(), "model " + dir.string());
  m.model = std::make_unique<model::PhtModel>(m.sidecar.config);
  m.model->load(checkpoint.empty() ? dir / "best.bin" : fs::path(checkpoint));
  return m;
}

void report_stats(const std::string& what, const LoadStats& s) {
  std::cerr << what << ": " << s.records << " records";
  if (s.malformed_lines > 0) std::cerr << ", skipped " << s.malformed_lines << " malformed lines";
  if (s.truncated_paragraphs > 0) std::cerr << ", dropped " << s.truncated_paragraphs << " paragraphs";
  if (s.truncated_tokens > 0) std::cerr << ", dropped " << s.truncated_tokens << " tokens";
  std::cerr << '\n';
}

std::vector<Sample> load_samples(const fs::path& path, const Vocabulary& vocab, const model::ModelConfig& config) {
  LoadStats stats;
  auto samples = load_dataset(path, vocab, LoadLimits::from_model(config), &stats);
  report_stats(path.string(), stats);
  return samples;
}

std::vector<model::TrainingExample> examples_of(const std::vector<Sample>& samples, const model::ModelConfig& c) {
  std::vector<model::TrainingExample> out;
  for (const auto& s : samples) out.push_back(to_example(s, c.title_as_paragraph));
  return out;
}

void add_seed(CLI::App* app, std::uint64_t& seed) {
  app->add_option("--seed", seed, "Random seed")->envname("PHT_SEED");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parallel hierarchical summarizer toolkit"};
  app.require_subcommand(1);

  // build-vocab
  std::vector<std::string> vocab_corpus;
  std::size_t vocab_size = 2000;
  std::string vocab_out;
  auto* build_vocab = app.add_subcommand("build-vocab", "Learn a byte-level BPE vocabulary from datasets");
  build_vocab->add_option("--corpus", vocab_corpus, "JSONL dataset(s)")->required();
  build_vocab->add_option("--size", vocab_size, "Target vocabulary size");
  build_vocab->add_option("--out", vocab_out, "Output vocabulary JSON")->required();

  // gen-toy-corpus
  ToyCorpusOptions toy;
  std::string toy_out;
  auto* gen_toy = app.add_subcommand("gen-toy-corpus", "Write a synthetic corpus with planted key paragraphs");
  gen_toy->add_option("--samples", toy.samples);
  gen_toy->add_option("--first-index", toy.first_index, "Index of the first sample (for disjoint splits)");
  gen_toy->add_option("--min-paragraphs", toy.min_paragraphs);
  gen_toy->add_option("--max-paragraphs", toy.max_paragraphs);
  gen_toy->add_option("--key-paragraphs", toy.key_paragraphs);
  gen_toy->add_option("--lexicon", toy.lexicon_size);
  gen_toy->add_option("--out", toy_out)->required();
  add_seed(gen_toy, toy.seed);

  // train
  model::ModelConfig mc;
  train::TrainOptions to;
  std::string train_data, valid_data, train_vocab, train_out, train_config;
  bool resume = false;
  auto* train_cmd = app.add_subcommand("train", "Train the summarizer with periodic checkpoints");
  train_cmd->add_option("--train", train_data)->required();
  train_cmd->add_option("--valid", valid_data)->required();
  train_cmd->add_option("--vocab", train_vocab)->required();
  train_cmd->add_option("--out", train_out, "Model directory")->required();
  train_cmd->add_option("--config", train_config, "Key-value file of model/training settings");
  train_cmd->add_option("--model-dim", mc.model_dim);
  train_cmd->add_option("--ffn-dim", mc.ffn_dim);
  train_cmd->add_option("--heads", mc.num_heads);
  train_cmd->add_option("--layers", mc.num_layers);
  train_cmd->add_option("--max-paragraphs", mc.max_paragraphs);
  train_cmd->add_option("--max-paragraph-len", mc.max_paragraph_len);
  train_cmd->add_option("--max-target-len", mc.max_target_len);
  train_cmd->add_option("--dropout", mc.dropout_rate);
  train_cmd->add_option("--label-smoothing", mc.label_smoothing);
  train_cmd->add_option("--steps", to.steps);
  train_cmd->add_option("--batch", to.batch_size);
  train_cmd->add_option("--base-rate", to.base_rate);
  train_cmd->add_option("--warmup", to.warmup_steps);
  train_cmd->add_option("--checkpoint-every", to.checkpoint_every);
  train_cmd->add_option("--log-every", to.log_every);
  train_cmd->add_flag("--resume", resume, "Continue from the newest checkpoint in --out");
  add_seed(train_cmd, to.seed);

  // extract-labels
  std::string model_dir, model_vocab, model_ckpt, label_data, label_out;
  auto* extract = app.add_subcommand("extract-labels", "Cache teacher-forced paragraph attention labels");
  extract->add_option("--model", model_dir)->required();
  extract->add_option("--vocab", model_vocab);
  extract->add_option("--checkpoint", model_ckpt);
  extract->add_option("--data", label_data)->required();
  extract->add_option("--out", label_out)->required();

  // train-align
  align::PredictorConfig pc;
  align::PredictorTraining pt;
  std::string align_labels, align_out;
  auto* train_align = app.add_subcommand("train-align", "Train the attention predictor on cached labels");
  train_align->add_option("--model", model_dir)->required();
  train_align->add_option("--vocab", model_vocab);
  train_align->add_option("--checkpoint", model_ckpt);
  train_align->add_option("--data", label_data)->required();
  train_align->add_option("--labels", align_labels)->required();
  train_align->add_option("--out", align_out, "Predictor directory")->required();
  train_align->add_option("--layers", pc.num_layers);
  train_align->add_option("--heads", pc.num_heads);
  train_align->add_option("--ffn-dim", pc.ffn_dim);
  train_align->add_option("--dropout", pc.dropout_rate);
  train_align->add_option("--steps", pt.steps);
  train_align->add_option("--batch", pt.batch_size);
  train_align->add_option("--base-rate", pt.base_rate);
  train_align->add_option("--warmup", pt.warmup_steps);
  add_seed(train_align, pt.seed);

  // summarize
  std::string predictor_dir, sum_data, sum_out, scorer = "vanilla", block = "on";
  std::optional<std::size_t> beam, max_len, compress_s;
  std::optional<double> beta;
  std::size_t threads = 1;
  std::uint64_t decode_seed = 1;
  auto* summarize = app.add_subcommand("summarize", "Generate summaries with beam search");
  summarize->add_option("--model", model_dir)->required();
  summarize->add_option("--vocab", model_vocab);
  summarize->add_option("--checkpoint", model_ckpt);
  summarize->add_option("--predictor", predictor_dir, "Predictor directory (needed by attalign and compression)");
  summarize->add_option("--data", sum_data)->required();
  summarize->add_option("--out", sum_out)->required();
  summarize->add_option("--beam", beam);
  summarize->add_option("--max-len", max_len);
  summarize->add_option("--beta", beta);
  summarize->add_option("--scorer", scorer)->check(CLI::IsMember({"vanilla", "attalign", "strcov", "gnmt-cp", "ptrgen-cov"}));
  summarize->add_option("--compress-s", compress_s, "Keep the top-s predicted paragraphs (0 keeps all)");
  summarize->add_option("--block-trigrams", block, "on|off")->check(CLI::IsMember({"on", "off"}));
  summarize->add_option("--threads", threads);
  add_seed(summarize, decode_seed);

  // evaluate
  std::string eval_generations, eval_data, eval_out;
  auto* evaluate = app.add_subcommand("evaluate", "Score generations with ROUGE and attention similarity");
  evaluate->add_option("--generations", eval_generations)->required();
  evaluate->add_option("--data", eval_data)->required();
  evaluate->add_option("--out", eval_out, "Report path (stdout when omitted)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*build_vocab) {
      std::vector<std::string> text;
      for (const auto& path : vocab_corpus) {
        LoadStats stats;
        const auto part = corpus_text(read_records(path, &stats));
        report_stats(path, stats);
        text.insert(text.end(), part.begin(), part.end());
      }
      const auto vocab = Vocabulary::build(text, vocab_size);
      vocab.save(vocab_out);
      std::cerr << "vocabulary: " << vocab.size() << " tokens, " << vocab.merges().size() << " merges, hash "
                << vocab.hash() << '\n';
    } else if (*gen_toy) {
      const auto records = generate_toy_corpus(toy);
      write_records(toy_out, records);
      std::cerr << "wrote " << records.size() << " samples to " << toy_out << '\n';
    } else if (*train_cmd) {
      const auto vocab = Vocabulary::load(train_vocab);
      if (!train_config.empty()) {
        // File values replace defaults; flags given on the command line win.
        const auto doc = KeyValueDoc::load(train_config);
        model::ModelConfig file_mc = model::ModelConfig::from_doc(doc);
        train::TrainOptions file_to = train::TrainOptions::from_doc(doc);
        file_to.log_every = to.log_every;
        for (auto* opt : train_cmd->get_options()) {
          if (opt->count() == 0) continue;
          const std::string& name = opt->get_name();
          if (name == "--model-dim") file_mc.model_dim = mc.model_dim;
          if (name == "--ffn-dim") file_mc.ffn_dim = mc.ffn_dim;
          if (name == "--heads") file_mc.num_heads = mc.num_heads;
          if (name == "--layers") file_mc.num_layers = mc.num_layers;
          if (name == "--max-paragraphs") file_mc.max_paragraphs = mc.max_paragraphs;
          if (name == "--max-paragraph-len") file_mc.max_paragraph_len = mc.max_paragraph_len;
          if (name == "--max-target-len") file_mc.max_target_len = mc.max_target_len;
          if (name == "--dropout") file_mc.dropout_rate = mc.dropout_rate;
          if (name == "--label-smoothing") file_mc.label_smoothing = mc.label_smoothing;
          if (name == "--steps") file_to.steps = to.steps;
          if (name == "--batch") file_to.batch_size = to.batch_size;
          if (name == "--base-rate") file_to.base_rate = to.base_rate;
          if (name == "--warmup") file_to.warmup_steps = to.warmup_steps;
          if (name == "--checkpoint-every") file_to.checkpoint_every = to.checkpoint_every;
          if (name == "--seed") file_to.seed = to.seed;
        }
        mc = file_mc;
        to = file_to;
      }
      mc.vocab_size = vocab.size();
      mc.seed = to.seed;
      mc.validate();
      const fs::path out(train_out);
      fs::create_directories(out);
      vocab.save(out / "vocab.json");
      train::ModelSidecar sidecar{mc, to, decoding::DecodeConfig{}, vocab.hash()};
      if (resume && fs::exists(out / "model.cfg")) {
        const auto previous = train::read_model_sidecar(out / "model.cfg");
        pipeline::check_vocab_hash(previous.vocab_hash, vocab.hash(), "resumed run " + out.string());
        if (previous.config.to_doc().to_string() != mc.to_doc().to_string()) {
          throw ConfigError("resumed run must keep the model configuration of " + out.string());
        }
      }
      train::write_model_sidecar(out / "model.cfg", sidecar);
      const auto train_set = examples_of(load_samples(train_data, vocab, mc), mc);
      const auto valid_set = examples_of(load_samples(valid_data, vocab, mc), mc);
      model::PhtModel model(mc);
      std::cerr << "parameters: " << model.parameters().count_values() << '\n';
      const auto report = train::train_model(model, train_set, valid_set, to, out, resume, &std::cerr);
      if (report.best) {
        std::cerr << "best checkpoint: step " << report.best->step << " validation_loss "
                  << report.best->validation_loss << '\n';
      }
      if (report.diverged) {
        std::cerr << "error: training diverged at step " << report.diverged_at << "; last good checkpoint kept\n";
        return kExitDiverged;
      }
    } else if (*extract) {
      const auto m = load_model_dir(model_dir, model_vocab, model_ckpt);
      const auto samples = load_samples(label_data, m.vocab, m.sidecar.config);
      pipeline::write_labels(label_out, pipeline::extract_labels(*m.model, samples));
    } else if (*train_align) {
      const auto m = load_model_dir(model_dir, model_vocab, model_ckpt);
      const auto samples = load_samples(label_data, m.vocab, m.sidecar.config);
      const auto pairs = pipeline::alignment_pairs(*m.model, samples, pipeline::read_labels(align_labels));
      pc.model_dim = m.sidecar.config.model_dim;
      pc.seed = pt.seed;
      pc.validate();
      align::AttentionPredictor predictor(pc);
      const auto report = align::train_predictor(predictor, pairs, pt);
      const fs::path out(align_out);
      fs::create_directories(out);
      predictor.save(out / "predictor.bin");
      pipeline::write_predictor_sidecar(out / "predictor.cfg", {pc, pt, m.vocab.hash()});
      std::cerr << "predictor: " << report.steps << " steps, train mse " << report.train_mse
                << " (uniform baseline " << align::uniform_baseline_mse(pairs) << ")\n";
    } else if (*summarize) {
      const auto m = load_model_dir(model_dir, model_vocab, model_ckpt);
      decoding::DecodeConfig dc = m.sidecar.decode;
      if (beam) dc.beam_size = *beam;
      if (max_len) dc.max_len = *max_len;
      if (beta) dc.beta = *beta;
      if (compress_s) dc.compress_s = *compress_s;
      dc.scorer = decoding::parse_scorer(scorer);
      if (block == "off") {
        dc.block_ngram = 0;
        dc.block_window = 0;
      }
      std::unique_ptr<align::AttentionPredictor> predictor;
      if (!predictor_dir.empty()) {
        const fs::path dir(predictor_dir);
        const auto sidecar = pipeline::read_predictor_sidecar(dir / "predictor.cfg");
        pipeline::check_vocab_hash(sidecar.vocab_hash, m.vocab.hash(), "predictor " + dir.string());
        predictor = std::make_unique<align::AttentionPredictor>(sidecar.config);
        predictor->load(dir / "predictor.bin");
      }
      // Beam search draws no random numbers; the seed is logged with the run.
      std::cerr << "decoding with scorer " << decoding::scorer_name(dc.scorer) << ", seed " << decode_seed << '\n';
      const auto samples = load_samples(sum_data, m.vocab, m.sidecar.config);
      const auto records = pipeline::summarize(*m.model, predictor.get(), m.vocab, samples, {dc, threads});
      pipeline::write_generations(sum_out, records);
    } else if (*evaluate) {
      LoadStats stats;
      const auto references = read_records(eval_data, &stats);
      report_stats(eval_data, stats);
      const auto report = pipeline::evaluate(pipeline::read_generations(eval_generations), references);
      if (eval_out.empty()) {
        std::cout << report.dump(2) << '\n';
      } else {
        std::ofstream os(eval_out);
        if (!os) throw IoError("cannot write report: " + eval_out);
        os << report.dump(2) << '\n';
      }
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
