// Command-line front end: decode, rescore, ppl, wer, tune, fixture, bench.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "xutt/xutt.hpp"

namespace {

using namespace xutt;

// Writes to `path`, or stdout for "-".
void emit(const std::string& path, const std::string& text) {
  if (path == "-") {
    std::cout << text;
    return;
  }
  detail::write_file(path, text);
}

struct Loaded {
  LoadedModel model;
  Vocab vocab;
  Manifest manifest;
  Corpus corpus;
};

Loaded load_all(const std::string& manifest_path, const std::string& weights_path, std::size_t threads) {
  Loaded l;
  l.model = load_weights(weights_path);
  l.vocab = vocab_for(l.model);
  l.vocab.check_model(l.model.config);
  l.manifest = load_manifest(manifest_path);
  l.corpus = load_conversations(l.manifest, l.vocab, threads);
  return l;
}

bool has_references(const Corpus& c) {
  for (const auto& conv : c) {
    for (const auto& u : conv) {
      if (!u.reference) return false;
    }
  }
  return true;
}

struct DecodeArgs {
  std::string manifest, weights, out = "-", history = "decoded";
  std::size_t context_tokens = 0, beam_width = 25, threads = 1;
  double alpha = 0.5, beta = 0.0, cutoff = -8.0;
  std::optional<double> max_gap;
};

int run_decode(const DecodeArgs& a) {
  const auto l = load_all(a.manifest, a.weights, a.threads);
  const FusionParams p{a.alpha, a.beta, a.cutoff, a.beam_width};
  p.validate();
  const ContextOptions ctx{a.context_tokens, history_mode_from_string(a.history), a.max_gap};
  const auto out = decode_corpus(l.corpus, l.model.weights, l.model.config, p, ctx, a.threads);
  std::string text;
  for (std::size_t c = 0; c < out.size(); ++c) {
    for (const auto& t : out[c]) text += transcript_json(l.manifest.conversations[c].conversation_id, t, l.vocab).dump() + "\n";
  }
  emit(a.out, text);
  if (has_references(l.corpus)) {
    auto r = wer(transcript_words(out, l.vocab), reference_words(l.corpus, l.vocab));
    r.context_tokens = a.context_tokens;
    std::cerr << format_table(std::vector<EvalReport>{r});
  }
  return 0;
}

struct RescoreArgs {
  std::string manifest, weights, out = "-", history = "decoded";
  std::size_t width = 1000, nbest = 100, context_tokens = 0, threads = 1;
  double w_first = 1.0, w_tlm = 1.0, length_penalty = 0.0;
};

int run_rescore(const RescoreArgs& a) {
  const auto l = load_all(a.manifest, a.weights, a.threads);
  RescoreOptions opts;
  opts.params = {a.w_first, a.w_tlm, a.length_penalty, a.nbest};
  opts.width = a.width;
  opts.context = {a.context_tokens, history_mode_from_string(a.history), std::nullopt};
  const auto lists = rescore_corpus(l.corpus, l.model.weights, l.model.config, opts, a.threads);
  std::string text;
  for (const auto& conv : lists) {
    for (const auto& list : conv) text += nbest_json(list, l.vocab).dump() + "\n";
  }
  emit(a.out, text);
  if (has_references(l.corpus)) {
    auto r = wer(transcript_words(best_transcripts(lists), l.vocab), reference_words(l.corpus, l.vocab));
    r.context_tokens = a.context_tokens;
    std::cerr << format_table(std::vector<EvalReport>{r});
  }
  return 0;
}

struct PplArgs {
  std::string manifest, weights, out = "-";
  std::vector<std::size_t> context_tokens{0};
  std::size_t threads = 1;
};

int run_ppl(const PplArgs& a) {
  const auto model = load_weights(a.weights);
  const auto vocab = vocab_for(model);
  vocab.check_model(model.config);
  const auto manifest = load_manifest(a.manifest);
  const auto refs = reference_corpus(manifest, vocab);
  std::vector<EvalReport> reports;
  Json arr = Json::array();
  for (std::size_t c : a.context_tokens) {
    reports.push_back(perplexity(refs, model.weights, model.config, c, fs::path(a.manifest).stem().string(), a.threads));
    arr.push_back(report_json(reports.back()));
  }
  if (a.out != "-") emit(a.out, arr.dump(2) + "\n");
  std::cout << format_table(reports);
  return 0;
}

struct WerArgs {
  std::string hyp, ref, out = "-";
};

int run_wer(const WerArgs& a) {
  const auto hyps = load_texts(a.hyp);
  const auto refs = load_texts(a.ref);
  std::vector<WordSeq> h, r;
  for (const auto& [id, words] : refs) {
    const auto it = hyps.find(id);
    if (it == hyps.end()) throw InputError("no hypothesis for utterance '" + id + "'");
    h.push_back(it->second);
    r.push_back(words);
  }
  if (hyps.size() != refs.size()) throw InputError("hypothesis file has utterances missing from the reference");
  const auto rep = wer(h, r, fs::path(a.ref).stem().string());
  if (a.out != "-") emit(a.out, report_json(rep).dump(2) + "\n");
  std::cout << format_table(std::vector<EvalReport>{rep});
  return 0;
}

struct TuneArgs {
  std::string mode = "fusion", manifest, weights, out = "-", history = "decoded";
  std::size_t trials = 64, context_tokens = 0, beam_width = 25, width = 100, nbest = 20, threads = 1;
  std::uint64_t seed = 0;
};

int run_tune(const TuneArgs& a) {
  const auto l = load_all(a.manifest, a.weights, a.threads);
  if (!has_references(l.corpus)) throw InputError("tuning needs references for every utterance");
  const ContextOptions ctx{a.context_tokens, history_mode_from_string(a.history), std::nullopt};
  SearchOutcome res;
  if (a.mode == "fusion") {
    FusionParams base;
    base.beam_width = a.beam_width;
    res = tune_fusion(l.corpus, l.model.weights, l.model.config, l.vocab, fusion_space(a.trials, a.seed), base, ctx,
                      a.threads);
  } else if (a.mode == "rescore") {
    RescoreOptions base;
    base.params.n_best_size = a.nbest;
    base.width = a.width;
    base.context = ctx;
    res = tune_rescore(l.corpus, l.model.weights, l.model.config, l.vocab, rescore_space(a.trials, a.seed), base,
                       a.threads);
  } else {
    throw InputError("unknown tune mode '" + a.mode + "'");
  }
  std::string log;
  for (const auto& t : res.trials) log += trial_json(t).dump() + "\n";
  emit(a.out, log);
  Json best{{"best_trial", res.best_index}, {"best_wer", res.best_value}, {"params", res.best_params}};
  std::cerr << best.dump() << "\n";
  return 0;
}

struct FixtureArgs {
  std::uint64_t seed = 0;
  std::string spec = "{}", out_dir;
};

int run_fixture(const FixtureArgs& a) {
  std::string text = a.spec;
  if (!text.empty() && text.front() != '{') text = detail::read_file(text);
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::exception& e) {
    throw FormatError(std::string("fixture spec: ") + e.what());
  }
  const auto spec = fixture_spec_from_json(j);
  write_fixture(make_fixture(a.seed, spec), spec, a.out_dir);
  std::cerr << "wrote fixture to " << a.out_dir << "\n";
  return 0;
}

struct BenchArgs {
  std::string weights, attention = "both", out = "-";
  std::size_t batch = 25, cache = 500, iterations = 10;
};

int run_bench(const BenchArgs& a) {
  ModelConfig cfg = ModelConfig::base();
  WeightStore w;
  if (a.weights.empty()) {
    w = generate_weights(0, cfg);
  } else {
    auto m = load_weights(a.weights);
    cfg = m.config;
    w = std::move(m.weights);
  }
  std::vector<AttentionVariant> variants;
  if (a.attention == "both") {
    variants = {AttentionVariant::multi_query, AttentionVariant::multi_head};
  } else {
    variants = {attention_variant_from_string(a.attention)};
  }
  Json arr = Json::array();
  std::string csv = "label,variant,batch,cache_len,mean_ms,stddev_ms,cache_bytes_per_token_per_layer,iterations\n";
  for (auto v : variants) {
    const auto r = bench_incremental(w, cfg, v, a.batch, a.cache, a.iterations);
    arr.push_back({{"label", r.label}, {"variant", to_string(r.variant)}, {"batch", r.batch},
                   {"cache_len", r.cache_len}, {"mean_ms", r.mean_ms}, {"stddev_ms", r.stddev_ms},
                   {"cache_bytes_per_token_per_layer", r.cache_bytes_per_token_per_layer},
                   {"cache_bytes_total", r.cache_bytes_total}, {"iterations", r.iterations}});
    char line[256];
    std::snprintf(line, sizeof line, "%s,%s,%zu,%zu,%.3f,%.3f,%zu,%zu\n", r.label.c_str(), to_string(r.variant),
                  r.batch, r.cache_len, r.mean_ms, r.stddev_ms, r.cache_bytes_per_token_per_layer, r.iterations);
    csv += line;
  }
  if (a.out != "-") emit(a.out, arr.dump(2) + "\n");
  std::cout << csv;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-utterance transformer LM decoding for CTC speech recognition"};
  app.require_subcommand(1);
  std::size_t threads = 1;
  app.add_option("--threads", threads, "Worker threads for per-conversation work")->check(CLI::PositiveNumber);

  DecodeArgs da;
  auto* dec = app.add_subcommand("decode", "Beam search with shallow fusion of the transformer LM");
  dec->add_option("--manifest", da.manifest, "Conversation manifest (JSON lines)")->required()->check(CLI::ExistingFile);
  dec->add_option("--weights", da.weights, "LM weight file")->required()->check(CLI::ExistingFile);
  dec->add_option("--context-tokens", da.context_tokens, "Tokens of prior-utterance history kept")->capture_default_str();
  dec->add_option("--alpha", da.alpha, "LM weight")->capture_default_str();
  dec->add_option("--beta", da.beta, "Insertion bonus per token")->capture_default_str();
  dec->add_option("--cutoff", da.cutoff, "Candidate log-prob cutoff below the frame maximum")->capture_default_str();
  dec->add_option("--beam-width", da.beam_width, "Beam width")->capture_default_str();
  dec->add_option("--history", da.history, "History source")->check(CLI::IsMember({"decoded", "gth"}))->capture_default_str();
  dec->add_option("--max-gap-seconds", da.max_gap, "Reset the history across longer silences");
  dec->add_option("--out", da.out, "Transcript JSON lines ('-' for stdout)")->capture_default_str();

  RescoreArgs ra;
  auto* res = app.add_subcommand("rescore", "AM-only n-best generation and transformer LM rescoring");
  res->add_option("--manifest", ra.manifest, "Conversation manifest")->required()->check(CLI::ExistingFile);
  res->add_option("--weights", ra.weights, "LM weight file")->required()->check(CLI::ExistingFile);
  res->add_option("--width", ra.width, "First-pass beam width")->capture_default_str();
  res->add_option("--nbest", ra.nbest, "N-best list size")->capture_default_str();
  res->add_option("--w-first", ra.w_first, "First-pass score weight")->capture_default_str();
  res->add_option("--w-tlm", ra.w_tlm, "Standardized LM score weight")->capture_default_str();
  res->add_option("--length-penalty", ra.length_penalty, "Score added per token")->capture_default_str();
  res->add_option("--context-tokens", ra.context_tokens, "Tokens of prior-utterance history kept")->capture_default_str();
  res->add_option("--history", ra.history, "History source")->check(CLI::IsMember({"decoded", "gth"}))->capture_default_str();
  res->add_option("--out", ra.out, "N-best JSON lines ('-' for stdout)")->capture_default_str();

  PplArgs pa;
  auto* ppl = app.add_subcommand("ppl", "Reference perplexity under a context budget");
  ppl->add_option("--manifest", pa.manifest, "Conversation manifest with references")->required()->check(CLI::ExistingFile);
  ppl->add_option("--weights", pa.weights, "LM weight file")->required()->check(CLI::ExistingFile);
  ppl->add_option("--context-tokens", pa.context_tokens, "One or more context sizes")->capture_default_str();
  ppl->add_option("--out", pa.out, "JSON report path")->capture_default_str();

  WerArgs wa;
  auto* werc = app.add_subcommand("wer", "Word error rate of transcripts against references");
  werc->add_option("--hyp", wa.hyp, "JSON lines with utterance_id and text")->required()->check(CLI::ExistingFile);
  werc->add_option("--ref", wa.ref, "JSON lines with utterance_id and text or reference")->required()->check(CLI::ExistingFile);
  werc->add_option("--out", wa.out, "JSON report path")->capture_default_str();

  TuneArgs ta;
  auto* tune = app.add_subcommand("tune", "Random search of fusion or rescoring weights against WER");
  tune->add_option("--mode", ta.mode, "What to tune")->check(CLI::IsMember({"fusion", "rescore"}))->capture_default_str();
  tune->add_option("--manifest", ta.manifest, "Dev manifest with references")->required()->check(CLI::ExistingFile);
  tune->add_option("--weights", ta.weights, "LM weight file")->required()->check(CLI::ExistingFile);
  tune->add_option("--trials", ta.trials, "Number of trials")->capture_default_str();
  tune->add_option("--seed", ta.seed, "Sampling seed")->capture_default_str();
  tune->add_option("--context-tokens", ta.context_tokens, "Tokens of prior-utterance history kept")->capture_default_str();
  tune->add_option("--history", ta.history, "History source")->check(CLI::IsMember({"decoded", "gth"}))->capture_default_str();
  tune->add_option("--beam-width", ta.beam_width, "Beam width (fusion)")->capture_default_str();
  tune->add_option("--width", ta.width, "First-pass beam width (rescore)")->capture_default_str();
  tune->add_option("--nbest", ta.nbest, "N-best list size (rescore)")->capture_default_str();
  tune->add_option("--out", ta.out, "Trial log, JSON lines")->capture_default_str();

  FixtureArgs fa;
  auto* fix = app.add_subcommand("fixture", "Write a synthetic conversational corpus");
  fix->add_option("--seed", fa.seed, "Seed")->capture_default_str();
  fix->add_option("--spec", fa.spec, "JSON object or path to a JSON file")->capture_default_str();
  fix->add_option("--out-dir", fa.out_dir, "Output directory")->required();

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "Incremental decoding time and cache size per attention layout");
  bench->add_option("--weights", ba.weights, "LM weight file (default: generated 12-layer model)");
  bench->add_option("--batch", ba.batch, "States advanced per iteration")->capture_default_str();
  bench->add_option("--cache", ba.cache, "Cached positions per state")->capture_default_str();
  bench->add_option("--attention", ba.attention, "Layout to time")
      ->check(CLI::IsMember({"multiquery", "multihead", "both"}))
      ->capture_default_str();
  bench->add_option("--iterations", ba.iterations, "Timed iterations (at least 10)")->capture_default_str();
  bench->add_option("--out", ba.out, "JSON result path")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    da.threads = ra.threads = pa.threads = ta.threads = threads;
    if (*dec) return run_decode(da);
    if (*res) return run_rescore(ra);
    if (*ppl) return run_ppl(pa);
    if (*werc) return run_wer(wa);
    if (*tune) return run_tune(ta);
    if (*fix) return run_fixture(fa);
    if (*bench) return run_bench(ba);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
