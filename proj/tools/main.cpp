// melfuse command-line tool: preprocess -> featurize -> train -> generate ->
// evaluate -> retrieve, plus corpus stats. One subcommand per run; every
// artifact is byte-deterministic given the same inputs and seed.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "melfuse/dataset.hpp"
#include "melfuse/metrics.hpp"
#include "melfuse/model_io.hpp"
#include "melfuse/retrieval.hpp"
#include "melfuse/trainer.hpp"
#include "melfuse/wav.hpp"

namespace fs = std::filesystem;
using namespace melfuse;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string profile = "toy";
  std::string mode = "full";
  std::uint64_t seed = 0;
  std::string checkpoint;
  std::string embedder = "tfidf";
  std::size_t beam = 1;
  long max_new = 128;
};

// --config JSON supplies defaults for flags the user did not pass
void apply_config(const CLI::App* cmd, CommonArgs& args) {
  if (args.config_path.empty()) return;
  std::ifstream f(args.config_path);
  if (!f) throw std::runtime_error("cannot open config " + args.config_path);
  const nlohmann::json j = nlohmann::json::parse(f);
  const auto fill = [&](const char* flag, const char* key, auto& target) {
    if (cmd->count(flag) == 0 && j.contains(key)) target = j.at(key);
  };
  fill("--profile", "profile", args.profile);
  fill("--mode", "mode", args.mode);
  fill("--seed", "seed", args.seed);
  fill("--checkpoint", "checkpoint", args.checkpoint);
  fill("--embedder", "embedder", args.embedder);
  fill("--beam", "beam", args.beam);
  fill("--max-new", "max_new", args.max_new);
}

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "JSON file with default settings");
  cmd->add_option("--seed", args.seed, "random seed");
}

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  return f;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

// features cache: one [128 x frames] mel per song id
std::map<std::string, Tensor> load_features(const std::string& prefix) {
  std::map<std::string, Tensor> out;
  const Container c = load_container(prefix);
  for (const auto& e : c.entries) out.emplace(e.name, Tensor::from(e.shape, e.values));
  return out;
}

int cmd_preprocess(const CommonArgs& common, const std::string& dataset_path,
                   const std::string& test_ids_path, double valid_frac,
                   const std::string& out_dir) {
  auto records = data::load_dataset(dataset_path);
  records = data::filter_length(std::move(records));
  records = data::filter_votes(records, data::VoteFilter::parse(common.mode, common.seed));

  std::set<std::string> test_ids;
  if (!test_ids_path.empty())
    for (auto& id : data::load_id_list(test_ids_path)) test_ids.insert(id);

  std::vector<std::string> warnings;
  const data::DatasetSplit split =
      data::split_dataset(records, valid_frac, test_ids, common.seed, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";

  fs::create_directories(out_dir);
  data::save_items(out_dir + "/train.jsonl", data::flatten(records, split.train));
  data::save_items(out_dir + "/valid.jsonl", data::flatten(records, split.valid));
  data::save_items(out_dir + "/test.jsonl", data::flatten(records, split.test));
  std::cout << "train " << split.train.size() << " valid " << split.valid.size() << " test "
            << split.test.size() << "\n";
  return 0;
}

int cmd_featurize(const std::string& dataset_path, const std::string& audio_root,
                  const std::string& out_prefix, std::size_t workers) {
  const auto records = data::load_dataset(dataset_path);
  std::vector<const data::SongRecord*> todo;
  for (const auto& r : records)
    if (!r.audio_path.empty()) todo.push_back(&r);

  std::map<std::string, Tensor> features;
  std::mutex mu;
  std::atomic<std::size_t> next{0};
  std::vector<std::string> errors;
  const auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= todo.size()) return;
      const data::SongRecord& r = *todo[i];
      try {
        const std::string path =
            audio_root.empty() ? r.audio_path : audio_root + "/" + r.audio_path;
        const audio::AudioClip clip = audio::read_wav(path);
        const audio::MelSpectrogram mel = audio::log_mel(clip);
        std::lock_guard<std::mutex> lock(mu);
        features.emplace(r.song_id, mel.values);
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(mu);
        errors.push_back(r.song_id + std::string(": ") + e.what());
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::max<std::size_t>(1, workers); ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (!errors.empty()) {
    for (const auto& e : errors) std::cerr << "error: " << e << "\n";
    return 1;
  }

  Container c;
  c.meta = R"({"kind":"mel-features"})";
  for (const auto& [id, mel] : features) {
    ContainerEntry e;
    e.name = id;
    e.shape = mel.shape;
    e.values = *mel.data;
    c.entries.push_back(std::move(e));
  }
  save_container(out_prefix, c);
  std::cout << "featurized " << features.size() << " songs\n";
  return 0;
}

int cmd_train(const CommonArgs& common, const std::string& train_path,
              const std::string& valid_path, const std::string& features_path, bool no_audio,
              std::size_t vocab_cap, const train::TrainConfig& tcfg_in,
              const std::string& out_dir) {
  const auto train_items = data::load_items(train_path);
  const auto valid_items = data::load_items(valid_path);
  if (train_items.empty()) throw std::runtime_error("training set is empty");

  std::map<std::string, Tensor> features;
  if (!features_path.empty() && !no_audio) features = load_features(features_path);

  std::vector<std::string> corpus;
  for (const auto& it : train_items) {
    corpus.push_back(it.lyrics);
    corpus.push_back(it.target);
  }
  const text::Vocabulary vocab = text::Vocabulary::train(corpus, vocab_cap);

  model::ModelConfig mcfg = model::ModelConfig::profile(common.profile, vocab.size());
  model::FusionModel net(mcfg, common.seed);

  std::vector<train::Example> train_set;
  for (const auto& it : train_items) {
    std::optional<Tensor> mel;
    auto f = features.find(it.song_id);
    if (f != features.end()) mel = f->second;
    train_set.push_back(train::make_example(vocab, it.lyrics, it.target, mcfg.max_source_len,
                                            mcfg.max_target_len, std::move(mel)));
  }
  std::vector<train::EvalItem> valid_set;
  for (const auto& it : valid_items) {
    std::optional<Tensor> mel;
    auto f = features.find(it.song_id);
    if (f != features.end()) mel = f->second;
    valid_set.push_back({it.lyrics, std::move(mel), it.target});
  }

  train::TrainConfig tcfg = tcfg_in;
  tcfg.seed = common.seed;
  const train::FitResult result = train::fit(net, vocab, std::move(train_set), valid_set, tcfg);

  fs::create_directories(out_dir);
  // the best checkpoint already carries the model config as metadata
  save_container(out_dir + "/model", result.best_checkpoint);
  vocab.save(out_dir + "/vocab.txt");
  open_out(out_dir + "/history.jsonl") << train::history_to_jsonl(result.history);
  std::cout << "best epoch " << result.best_epoch << " val_rouge1 " << result.best_score << "\n";
  return 0;
}

struct LoadedModel {
  model::FusionModel net;
  text::Vocabulary vocab;
};

LoadedModel load_model_dir(const std::string& checkpoint) {
  // accepts either a directory produced by `train` or an explicit prefix
  std::string prefix = checkpoint;
  std::string vocab_path = checkpoint + ".vocab.txt";
  if (fs::exists(checkpoint + "/model.manifest")) {
    prefix = checkpoint + "/model";
    vocab_path = checkpoint + "/vocab.txt";
  }
  return {model::load_model(prefix), text::Vocabulary::load(vocab_path)};
}

int cmd_generate(const CommonArgs& common, const std::string& lyrics,
                 const std::string& lyrics_file, const std::string& audio_path,
                 const std::string& input_items, const std::string& features_path,
                 const std::string& out_path) {
  LoadedModel lm = load_model_dir(common.checkpoint);
  model::GenerateOptions opts;
  opts.mode = common.beam <= 1 ? model::DecodeMode::greedy : model::DecodeMode::beam;
  opts.beam_width = common.beam;
  opts.max_new = common.max_new;

  if (!input_items.empty()) {
    const auto items = data::load_items(input_items);
    std::map<std::string, Tensor> features;
    if (!features_path.empty()) features = load_features(features_path);
    std::ostringstream os;
    for (const auto& it : items) {
      const Tensor* mel = nullptr;
      auto f = features.find(it.song_id);
      if (f != features.end()) mel = &f->second;
      nlohmann::json j;
      j["song_id"] = it.song_id;
      j["output"] = model::generate(lm.net, lm.vocab, it.lyrics, mel, opts);
      os << j.dump() << "\n";
    }
    if (out_path.empty()) {
      std::cout << os.str();
    } else {
      open_out(out_path) << os.str();
    }
    return 0;
  }

  std::string text = lyrics;
  if (!lyrics_file.empty()) {
    std::ostringstream buf;
    std::ifstream f(lyrics_file, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + lyrics_file);
    buf << f.rdbuf();
    text = buf.str();
  }
  if (text.empty())
    throw std::runtime_error("no lyrics given (--lyrics, --lyrics-file or --input)");

  Tensor mel;
  const Tensor* mel_ptr = nullptr;
  if (!audio_path.empty()) {
    mel = audio::log_mel(audio::read_wav(audio_path)).values;
    mel_ptr = &mel;
  }
  std::cout << model::generate(lm.net, lm.vocab, text, mel_ptr, opts) << "\n";
  return 0;
}

int cmd_evaluate(const std::string& candidates_path, const std::string& references_path,
                 const std::string& out_path) {
  const auto candidates = read_lines(candidates_path);
  const auto references = read_lines(references_path);
  if (candidates.size() != references.size())
    throw std::runtime_error("candidate/reference line counts differ: " +
                             std::to_string(candidates.size()) + " vs " +
                             std::to_string(references.size()));
  const metrics::MetricReport report = metrics::evaluate_pairs(candidates, references);
  if (!out_path.empty()) {
    auto f = open_out(out_path);
    for (std::size_t i = 0; i < report.pairs.size(); ++i) {
      nlohmann::json j;
      j["index"] = i;
      j["rouge1"] = report.pairs[i].rouge1;
      j["rouge2"] = report.pairs[i].rouge2;
      j["rougeL"] = report.pairs[i].rouge_l;
      j["meteor"] = report.pairs[i].meteor;
      f << j.dump() << "\n";
    }
  }
  std::cout << "R-1 " << report.mean.rouge1 << " R-2 " << report.mean.rouge2 << " R-L "
            << report.mean.rouge_l << " METEOR " << report.mean.meteor << "\n";
  return 0;
}

int cmd_retrieve(const CommonArgs& common, const std::string& test_path,
                 const std::string& features_path, const std::string& out_path,
                 const std::string& index_out) {
  LoadedModel lm = load_model_dir(common.checkpoint);
  const auto items = data::load_items(test_path);
  if (items.empty()) throw std::runtime_error("test set is empty");

  std::map<std::string, Tensor> features;
  if (!features_path.empty()) features = load_features(features_path);

  // one database entry per unique song; references grouped per song
  std::map<std::string, std::string> lyrics_by_song;
  std::map<std::string, std::vector<std::string>> refs_by_song;
  for (const auto& it : items) {
    lyrics_by_song.emplace(it.song_id, it.lyrics);
    refs_by_song[it.song_id].push_back(it.target);
  }

  std::vector<retrieval::SongInput> songs;
  for (const auto& [id, lyr] : lyrics_by_song) {
    const Tensor* mel = nullptr;
    auto f = features.find(id);
    if (f != features.end()) mel = &f->second;
    songs.push_back({id, lyr, mel});
  }

  model::GenerateOptions gen;
  gen.mode = common.beam <= 1 ? model::DecodeMode::greedy : model::DecodeMode::beam;
  gen.beam_width = common.beam;
  gen.max_new = common.max_new;
  std::vector<std::string> warnings;
  const auto sources =
      retrieval::generate_interpretations(lm.net, lm.vocab, songs, gen, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";

  std::unique_ptr<retrieval::Embedder> embedder;
  if (common.embedder == "tfidf") {
    auto tfidf = std::make_unique<retrieval::HashedTfIdfEmbedder>();
    std::vector<std::string> corpus;
    for (const auto& s : sources) corpus.push_back(s.text);
    tfidf->fit(corpus);
    embedder = std::move(tfidf);
  } else if (common.embedder == "encoder") {
    embedder = std::make_unique<retrieval::EncoderEmbedder>(lm.net, lm.vocab);
  } else {
    throw std::runtime_error("unknown embedder '" + common.embedder + "' (tfidf|encoder)");
  }

  // skip songs whose generated text cannot be embedded (e.g. no tokens)
  std::vector<retrieval::IndexSource> usable;
  for (const auto& s : sources) {
    try {
      embedder->embed(s.text);
      usable.push_back(s);
    } catch (const std::exception& e) {
      std::cerr << "warning: skipping '" << s.song_id << "': " << e.what() << "\n";
    }
  }
  const retrieval::EmbeddingIndex index = retrieval::build_index(usable, *embedder);
  if (!index_out.empty()) index.save(index_out);

  std::vector<std::pair<std::string, std::vector<std::string>>> refs(refs_by_song.begin(),
                                                                     refs_by_song.end());
  const auto queries = retrieval::make_queries(refs, common.seed, &warnings);
  const retrieval::RetrievalResult result =
      retrieval::evaluate_retrieval(queries, index, *embedder);

  std::ostringstream os;
  os << "songs " << index.entries.size() << " queries " << queries.size() << " embedder "
     << common.embedder << " seed " << common.seed << "\n";
  for (const auto& [id, rank] : result.ranks) os << id << " rank " << rank << "\n";
  os << "mrr " << result.mrr << "\n";
  if (out_path.empty()) {
    std::cout << os.str();
  } else {
    open_out(out_path) << os.str();
    std::cout << "mrr " << result.mrr << "\n";
  }
  return 0;
}

int cmd_stats(const std::string& dataset_path) {
  const auto records = data::load_dataset(dataset_path);
  std::cout << data::render_stats(data::corpus_stats(records));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multimodal lyric interpretation toolkit"};
  app.require_subcommand(1);

  CommonArgs common;

  auto* pre = app.add_subcommand("preprocess", "filter interpretations and build splits");
  std::string dataset_path, test_ids_path, out_dir = "out";
  double valid_frac = 0.1;
  add_common(pre, common);
  pre->add_option("--dataset", dataset_path, "song dataset (jsonl)")->required();
  pre->add_option("--test-ids", test_ids_path, "file with one test song id per line");
  pre->add_option("--mode", common.mode, "full|nonneg|positive|random:<n>");
  pre->add_option("--valid-frac", valid_frac, "validation fraction in (0,1)");
  pre->add_option("--out", out_dir, "output directory");

  auto* fea = app.add_subcommand("featurize", "cache log-mel spectrograms for all songs");
  std::string audio_root, features_out = "features";
  std::size_t workers = 2;
  add_common(fea, common);
  fea->add_option("--dataset", dataset_path, "song dataset (jsonl)")->required();
  fea->add_option("--audio-root", audio_root, "directory that audio paths are relative to");
  fea->add_option("--out", features_out, "output container prefix");
  fea->add_option("--workers", workers, "worker pool size");

  auto* tr = app.add_subcommand("train", "fit the model with early stopping");
  std::string train_path, valid_path, features_path;
  bool no_audio = false;
  std::size_t vocab_cap = 8192;
  train::TrainConfig tcfg;
  add_common(tr, common);
  tr->add_option("--train", train_path, "training items (jsonl)")->required();
  tr->add_option("--valid", valid_path, "validation items (jsonl)")->required();
  tr->add_option("--features", features_path, "mel feature container prefix");
  tr->add_flag("--no-audio", no_audio, "ignore audio features (text-only baseline)");
  tr->add_option("--profile", common.profile, "model profile: toy|paper");
  tr->add_option("--vocab-cap", vocab_cap, "tokenizer vocabulary cap");
  tr->add_option("--batch-size", tcfg.batch_size, "examples per step");
  tr->add_option("--max-epochs", tcfg.max_epochs, "epoch budget");
  tr->add_option("--patience", tcfg.patience, "early-stopping patience (epochs)");
  tr->add_option("--lr", tcfg.lr_initial, "initial learning rate");
  tr->add_option("--lr-reduced", tcfg.lr_reduced, "reduced learning rate");
  tr->add_option("--reduce-at", tcfg.reduce_at_epoch, "epoch that switches to the reduced rate");
  tr->add_option("--val-max-new", tcfg.val_max_new, "validation decoding budget");
  tr->add_option("--out", out_dir, "output directory");

  auto* gen = app.add_subcommand("generate", "decode an interpretation");
  std::string lyrics, lyrics_file, audio_path, input_items, gen_out;
  add_common(gen, common);
  gen->add_option("--checkpoint", common.checkpoint, "model directory or prefix")->required();
  gen->add_option("--lyrics", lyrics, "lyric text");
  gen->add_option("--lyrics-file", lyrics_file, "file containing lyric text");
  gen->add_option("--audio", audio_path, "WAV file for the audio modality");
  gen->add_option("--input", input_items, "items jsonl for batch generation");
  gen->add_option("--features", features_path, "mel feature container prefix (batch mode)");
  gen->add_option("--beam", common.beam, "beam width (1 = greedy)");
  gen->add_option("--max-new", common.max_new, "maximum generated tokens");
  gen->add_option("--out", gen_out, "write batch outputs here instead of stdout");

  auto* ev = app.add_subcommand("evaluate", "score candidates against references");
  std::string candidates_path, references_path, report_out;
  add_common(ev, common);
  ev->add_option("--candidates", candidates_path, "one candidate per line")->required();
  ev->add_option("--references", references_path, "one reference per line")->required();
  ev->add_option("--out", report_out, "per-pair report (jsonl)");

  auto* re = app.add_subcommand("retrieve", "cross-modal retrieval evaluation");
  std::string retrieve_test, retrieve_out, index_out;
  add_common(re, common);
  re->add_option("--test", retrieve_test, "test items (jsonl)")->required();
  re->add_option("--checkpoint", common.checkpoint, "model directory or prefix")->required();
  re->add_option("--features", features_path, "mel feature container prefix");
  re->add_option("--embedder", common.embedder, "tfidf|encoder");
  re->add_option("--beam", common.beam, "beam width for database generation");
  re->add_option("--max-new", common.max_new, "generation budget per song");
  re->add_option("--out", retrieve_out, "report file");
  re->add_option("--index-out", index_out, "persist the embedding index at this prefix");

  auto* st = app.add_subcommand("stats", "corpus statistics");
  add_common(st, common);
  st->add_option("--dataset", dataset_path, "song dataset (jsonl)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // prints help, exits 0
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;  // usage error
  }

  try {
    if (pre->parsed()) {
      apply_config(pre, common);
      return cmd_preprocess(common, dataset_path, test_ids_path, valid_frac, out_dir);
    }
    if (fea->parsed()) {
      apply_config(fea, common);
      return cmd_featurize(dataset_path, audio_root, features_out, workers);
    }
    if (tr->parsed()) {
      apply_config(tr, common);
      return cmd_train(common, train_path, valid_path, features_path, no_audio, vocab_cap, tcfg,
                       out_dir);
    }
    if (gen->parsed()) {
      apply_config(gen, common);
      return cmd_generate(common, lyrics, lyrics_file, audio_path, input_items, features_path,
                          gen_out);
    }
    if (ev->parsed()) {
      apply_config(ev, common);
      return cmd_evaluate(candidates_path, references_path, report_out);
    }
    if (re->parsed()) {
      apply_config(re, common);
      return cmd_retrieve(common, retrieve_test, features_path, retrieve_out, index_out);
    }
    if (st->parsed()) {
      apply_config(st, common);
      return cmd_stats(dataset_path);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
