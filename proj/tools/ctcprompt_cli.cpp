#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ctcprompt/checkpoint.hpp"
#include "ctcprompt/data.hpp"
#include "ctcprompt/decoding.hpp"
#include "ctcprompt/model.hpp"
#include "ctcprompt/training.hpp"

namespace cp = ctcprompt;

namespace {

struct CommonArgs {
  std::uint64_t seed = 1;
  std::string config_path;
  std::string out_dir;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--seed", a.seed, "random seed");
  cmd->add_option("--config", a.config_path, "key = value config file");
  cmd->add_option("--out", a.out_dir, "output directory")->required();
}

cp::Config load_config(const CommonArgs& a) {
  cp::Config c = a.config_path.empty() ? cp::Config() : cp::Config::load(a.config_path);
  c.set("seed", std::to_string(a.seed));
  return c;
}

std::string real17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// Reads only the header of a checkpoint so a model can be rebuilt before the
// parameter payload is loaded.
cp::Config peek_checkpoint_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  cp::detail::ck_read(in, magic, 8, path);
  if (std::memcmp(magic, cp::kCheckpointMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  std::uint32_t version = 0;
  cp::detail::ck_read(in, &version, 4, path);
  return cp::Config::parse(cp::detail::ck_read_str(in, path));
}

cp::AsrModel load_asr_model(const std::string& ckpt_path) {
  cp::Config stored = peek_checkpoint_config(ckpt_path);
  cp::ModelConfig mc = cp::ModelConfig::from(stored);
  cp::AsrModel model(mc, std::uint64_t(stored.get_int("seed", 1)));
  cp::NamedParams params = model.params();
  cp::load_checkpoint(ckpt_path, params);
  return model;
}

cp::DecoderModel load_lm_model(const std::string& ckpt_path) {
  cp::Config stored = peek_checkpoint_config(ckpt_path);
  cp::DecoderConfig dc;
  dc.vocab = cp::Vocab{std::size_t(stored.get_int("n_chars", 0))};
  dc.layer = {std::size_t(stored.get_int("lm_model_dim", 16)),
              std::size_t(stored.get_int("lm_heads", 2)),
              std::size_t(stored.get_int("lm_ff_dim", 32)),
              std::size_t(stored.get_int("lm_blocks", 1)), 0.0};
  std::mt19937_64 rng(std::uint64_t(stored.get_int("seed", 1)));
  cp::DecoderModel lm(dc, rng);
  cp::NamedParams params;
  lm.collect("lm", params);
  cp::load_checkpoint(ckpt_path, params);
  return lm;
}

// keep the first ceil(fraction * n) paired items, deterministically
void subsample_paired(cp::DataSet& ds, double fraction) {
  if (fraction >= 1.0) return;
  if (fraction <= 0.0) throw std::runtime_error("paired_fraction must be in (0, 1]");
  const std::size_t keep = std::max<std::size_t>(
      1, std::size_t(std::ceil(fraction * double(ds.paired.size()))));
  ds.paired.resize(keep);
}

int cmd_gen_data(const CommonArgs& a) {
  cp::Config cfg = load_config(a);
  cp::SynthConfig sc = cp::SynthConfig::from(cfg);
  sc.seed = a.seed;
  cp::DataSet ds = cp::gen_synthetic(sc);
  cp::write_dataset(ds, a.out_dir);
  cp::write_run_info(a.out_dir, cfg, a.seed);
  std::cout << "wrote " << ds.paired.size() << " paired and " << ds.texts.size()
            << " text-only records to " << a.out_dir << "\n";
  return 0;
}

int cmd_train(const CommonArgs& a, const std::string& data_dir) {
  cp::Config cfg = load_config(a);
  cp::DataSet ds = cp::DataSet::load(data_dir);
  subsample_paired(ds, cfg.get_real("paired_fraction", 1.0));

  cp::ModelConfig mc = cp::ModelConfig::from(cfg);
  mc.n_chars = ds.tokenizer.charset.size();
  cp::TrainConfig tc = cp::TrainConfig::from(cfg);
  tc.seed = a.seed;

  cp::AsrModel model(mc, a.seed);
  cp::write_run_info(a.out_dir, cfg, a.seed);
  cp::TrainResult r = cp::train(model, ds, tc, a.out_dir, &cfg);
  std::cout << "trained " << r.metrics.size() << " steps; artifacts in " << a.out_dir
            << "\n";
  return 0;
}

int cmd_train_lm(const CommonArgs& a, const std::string& data_dir) {
  cp::Config cfg = load_config(a);
  cp::DataSet ds = cp::DataSet::load(data_dir);
  cp::TrainConfig tc = cp::TrainConfig::from(cfg);
  tc.seed = a.seed;
  tc.steps = std::size_t(cfg.get_int("lm_steps", cfg.get_int("steps", 500)));

  const std::size_t model_dim = std::size_t(cfg.get_int("lm_model_dim", 16));
  const std::size_t heads = std::size_t(cfg.get_int("lm_heads", 2));
  const std::size_t ff_dim = std::size_t(cfg.get_int("lm_ff_dim", 32));
  const std::size_t blocks = std::size_t(cfg.get_int("lm_blocks", 1));
  cp::ExternalLmResult r =
      cp::train_external_lm(ds.texts, ds.tokenizer, model_dim, heads, ff_dim, blocks, tc);

  cp::Config stored = cfg;
  stored.set("n_chars", std::to_string(ds.tokenizer.charset.size()));
  stored.set("lm_model_dim", std::to_string(model_dim));
  stored.set("lm_heads", std::to_string(heads));
  stored.set("lm_ff_dim", std::to_string(ff_dim));
  stored.set("lm_blocks", std::to_string(blocks));

  std::filesystem::create_directories(a.out_dir);
  cp::NamedParams params;
  r.lm.collect("lm", params);
  cp::save_checkpoint(a.out_dir + "/lm.ckpt", params, stored, a.seed, tc.steps);
  cp::write_run_info(a.out_dir, cfg, a.seed);
  std::ofstream info(a.out_dir + "/lm_info.txt");
  info << "heldout_perplexity = " << real17(r.heldout_perplexity) << "\n";
  std::cout << "lm held-out perplexity " << r.heldout_perplexity << "; checkpoint in "
            << a.out_dir << "\n";
  return 0;
}

struct DecodeStats {
  double tau_sum = 0.0, tprime_sum = 0.0, seconds = 0.0, frames = 0.0;
  std::size_t n = 0;
};

int run_decode(const cp::AsrModel& model, const cp::DecoderModel* lm,
               const cp::DataSet& ds, const cp::FusionWeights& w,
               const std::string& out_dir, const cp::Config& cfg, std::uint64_t seed) {
  std::filesystem::create_directories(out_dir);
  std::ofstream hyps(out_dir + "/hyps.tsv");
  std::ofstream refs(out_dir + "/refs.tsv");
  DecodeStats stats;
  cp::NoGradGuard ng;
  for (const auto& ex : ds.paired) {
    const auto t0 = std::chrono::steady_clock::now();
    cp::EncoderOutput h = model.encoder.encode({ex.utt_id, ex.frames});
    cp::CtcPosterior post = model.ctc.posteriors(h);
    cp::GreedyPath path = cp::greedy_path(post);
    cp::PromptSequence prompt = model.make_prompt(h, path);
    cp::DecodeResult r = cp::beam_search(model.decoder, prompt, post, lm, w);

    cp::BeamHypothesis best;
    if (!r.nbest.empty()) {
      best = r.best();
    } else {
      // no finished hypothesis inside the cap: fall back to the greedy decode
      auto [toks, reads] = cp::greedy_decode(model.decoder, prompt,
                                             2 * (prompt.length() + 5));
      (void)reads;
      best.tokens = toks;
      cp::TokenSequence y = toks;
      y.push_back(model.vocab.eos());
      best.decoder_score = model.decoder.sequence_logprob(prompt, y).value();
      best.ctc_prefix_score = cp::ctc_complete_score(toks, post);
      best.combined = best.decoder_score;
    }
    const auto t1 = std::chrono::steady_clock::now();

    const std::string text = ds.tokenizer.detokenize(best.tokens);
    hyps << ex.utt_id << '\t' << text << '\t' << real17(best.combined) << '\t'
         << real17(best.decoder_score) << '\t' << real17(best.ctc_prefix_score) << '\t'
         << real17(best.lm_score) << '\n';
    refs << ex.utt_id << '\t' << ex.text << '\n';

    stats.tau_sum += double(prompt.length());
    stats.tprime_sum += double(h.features.dim(0));
    stats.seconds += std::chrono::duration<double>(t1 - t0).count();
    stats.frames += double(ex.frames.dim(0));
    ++stats.n;
  }
  std::ofstream st(out_dir + "/decode_stats.txt");
  st << "utterances = " << stats.n << "\n";
  if (stats.n) {
    st << "mean_tau = " << real17(stats.tau_sum / double(stats.n)) << "\n";
    st << "mean_tprime = " << real17(stats.tprime_sum / double(stats.n)) << "\n";
    // desk RTF: decode seconds per input frame as the audio-duration proxy
    st << "rtf = " << real17(stats.frames > 0 ? stats.seconds / stats.frames : 0.0)
       << "\n";
  }
  cp::write_run_info(out_dir, cfg, seed);
  std::cout << "decoded " << stats.n << " utterances into " << out_dir << "/hyps.tsv\n";
  return 0;
}

std::map<std::string, std::string> read_tsv_map(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::map<std::string, std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw std::runtime_error(path + ": expected utt_id<TAB>text");
    const auto second = line.find('\t', tab + 1);
    const std::string text = second == std::string::npos
                                 ? line.substr(tab + 1)
                                 : line.substr(tab + 1, second - tab - 1);
    out[line.substr(0, tab)] = text;
  }
  return out;
}

int cmd_eval(const CommonArgs& a, const std::string& refs_path,
             const std::string& hyps_path, const std::string& stats_path) {
  cp::Config cfg = load_config(a);
  auto refs = read_tsv_map(refs_path);
  auto hyps = read_tsv_map(hyps_path);
  std::vector<std::string> ref_texts, hyp_texts;
  for (const auto& [id, text] : refs) {
    auto it = hyps.find(id);
    if (it == hyps.end()) throw std::runtime_error("eval: no hypothesis for " + id);
    ref_texts.push_back(text);
    hyp_texts.push_back(it->second);
  }
  cp::EditCounts c = cp::wer_counts(ref_texts, hyp_texts);

  std::ostringstream table;
  table << "metric          value\n";
  table << "wer_percent     " << real17(c.wer_percent()) << "\n";
  table << "substitutions   " << c.subs << "\n";
  table << "deletions       " << c.dels << "\n";
  table << "insertions      " << c.ins << "\n";
  table << "ref_words       " << c.ref_len << "\n";
  if (!stats_path.empty()) {
    cp::Config st = cp::Config::load(stats_path);
    table << "mean_tau        " << st.get_str("mean_tau", "-") << "\n";
    table << "mean_tprime     " << st.get_str("mean_tprime", "-") << "\n";
    table << "rtf             " << st.get_str("rtf", "-") << "\n";
  }
  std::cout << table.str();
  std::filesystem::create_directories(a.out_dir);
  std::ofstream out(a.out_dir + "/eval.txt");
  out << table.str();
  cp::write_run_info(a.out_dir, cfg, a.seed);
  return 0;
}

int cmd_profile(const CommonArgs& a, const std::string& data_dir,
                const std::string& model_path) {
  cp::Config cfg = load_config(a);
  cp::AsrModel model = load_asr_model(model_path);
  cp::DataSet ds = cp::DataSet::load(data_dir);
  cp::ProfileReport rep = cp::profile_decode_cost(model, ds.paired);

  std::ostringstream table;
  table << "metric                      compressed      uncompressed\n";
  table << "attention_key_reads         " << rep.compressed_key_reads << "      "
        << rep.uncompressed_key_reads << "\n";
  table << "decode_seconds              " << real17(rep.compressed_seconds) << "      "
        << real17(rep.uncompressed_seconds) << "\n";
  table << "mean_prompt_length          " << real17(rep.mean_tau) << "      "
        << real17(rep.mean_tprime) << "\n";
  if (rep.uncompressed_key_reads)
    table << "key_read_ratio              "
          << real17(double(rep.compressed_key_reads) /
                    double(rep.uncompressed_key_reads))
          << "\n";
  std::cout << table.str();
  std::filesystem::create_directories(a.out_dir);
  std::ofstream out(a.out_dir + "/profile.txt");
  out << table.str();
  cp::write_run_info(a.out_dir, cfg, a.seed);
  return 0;
}

int cmd_compare_compression(const CommonArgs& a, const std::string& data_dir) {
  cp::Config cfg = load_config(a);
  cp::DataSet ds = cp::DataSet::load(data_dir);
  subsample_paired(ds, cfg.get_real("paired_fraction", 1.0));
  cp::TrainConfig tc = cp::TrainConfig::from(cfg);
  tc.seed = a.seed;

  std::filesystem::create_directories(a.out_dir);
  std::ostringstream table;
  table << "variant      wer_percent      mean_tau      key_reads\n";
  for (cp::CompressionKind kind :
       {cp::CompressionKind::Downsample, cp::CompressionKind::Average,
        cp::CompressionKind::Remove}) {
    cp::ModelConfig mc = cp::ModelConfig::from(cfg);
    mc.n_chars = ds.tokenizer.charset.size();
    mc.compression = kind;
    cp::AsrModel model(mc, a.seed);
    const std::string sub_dir = a.out_dir + "/" + cp::to_string(kind);
    cp::train(model, ds, tc, sub_dir, &cfg);

    cp::NoGradGuard ng;
    std::vector<std::string> refs, hyps;
    double tau_sum = 0.0;
    std::size_t key_reads = 0;
    for (const auto& ex : ds.paired) {
      cp::EncoderOutput h = model.encoder.encode({ex.utt_id, ex.frames});
      cp::CtcPosterior post = model.ctc.posteriors(h);
      cp::GreedyPath path = cp::greedy_path(post);
      cp::PromptSequence prompt = model.make_prompt(h, path);
      auto [toks, reads] =
          cp::greedy_decode(model.decoder, prompt, 2 * (prompt.length() + 5));
      refs.push_back(ex.text);
      hyps.push_back(ds.tokenizer.detokenize(toks));
      tau_sum += double(prompt.length());
      key_reads += reads;
    }
    const double w = cp::wer(refs, hyps);
    table << cp::to_string(kind) << "      " << real17(w) << "      "
          << real17(ds.paired.empty() ? 0.0 : tau_sum / double(ds.paired.size()))
          << "      " << key_reads << "\n";
  }
  std::cout << table.str();
  std::ofstream out(a.out_dir + "/compare.txt");
  out << table.str();
  cp::write_run_info(a.out_dir, cfg, a.seed);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"decoder-only ASR with CTC-compressed audio prompts"};
  app.require_subcommand(1);

  CommonArgs gen_args;
  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  add_common(gen, gen_args);

  CommonArgs train_args;
  std::string train_data;
  CLI::App* train = app.add_subcommand("train", "train the joint model");
  add_common(train, train_args);
  train->add_option("--data", train_data, "dataset directory")->required();

  CommonArgs lm_args;
  std::string lm_data;
  CLI::App* train_lm = app.add_subcommand("train-lm", "train the external fusion LM");
  add_common(train_lm, lm_args);
  train_lm->add_option("--data", lm_data, "dataset directory")->required();

  CommonArgs dec_args;
  std::string dec_data, dec_model, dec_lm;
  cp::FusionWeights weights;
  CLI::App* decode = app.add_subcommand("decode", "beam-search decode a dataset");
  add_common(decode, dec_args);
  decode->add_option("--data", dec_data, "dataset directory")->required();
  decode->add_option("--model", dec_model, "model checkpoint")->required();
  decode->add_option("--lm", dec_lm, "external LM checkpoint for shallow fusion");
  decode->add_option("--ctc-weight", weights.ctc_weight, "CTC prefix fusion weight");
  decode->add_option("--lm-weight", weights.lm_weight, "LM shallow-fusion weight");
  decode->add_option("--length-penalty", weights.length_penalty, "per-token bonus");
  decode->add_option("--beam", weights.beam, "beam width");
  decode->add_option("--nbest", weights.nbest, "hypotheses to keep");
  decode->add_option("--max-len", weights.max_len, "hard length cap (0 = 2*(tau+5))");

  CommonArgs eval_args;
  std::string eval_refs, eval_hyps, eval_stats;
  CLI::App* eval = app.add_subcommand("eval", "score hypotheses against references");
  add_common(eval, eval_args);
  eval->add_option("--refs", eval_refs, "reference tsv (utt_id<TAB>text)")->required();
  eval->add_option("--hyps", eval_hyps, "hypothesis tsv")->required();
  eval->add_option("--stats", eval_stats, "decode_stats.txt to fold into the table");

  CommonArgs prof_args;
  std::string prof_data, prof_model;
  CLI::App* profile = app.add_subcommand("profile", "compare decode cost with and "
                                                    "without prompt compression");
  add_common(profile, prof_args);
  profile->add_option("--data", prof_data, "dataset directory")->required();
  profile->add_option("--model", prof_model, "model checkpoint")->required();

  CommonArgs cmp_args;
  std::string cmp_data;
  CLI::App* compare =
      app.add_subcommand("compare-compression", "train and score the three "
                                                "prompt-compression variants");
  add_common(compare, cmp_args);
  compare->add_option("--data", cmp_data, "dataset directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(gen_args);
    if (train->parsed()) return cmd_train(train_args, train_data);
    if (train_lm->parsed()) return cmd_train_lm(lm_args, lm_data);
    if (decode->parsed()) {
      cp::AsrModel model = load_asr_model(dec_model);
      cp::DataSet ds = cp::DataSet::load(dec_data);
      if (!dec_lm.empty()) {
        cp::DecoderModel lm = load_lm_model(dec_lm);
        return run_decode(model, &lm, ds, weights, dec_args.out_dir,
                          load_config(dec_args), dec_args.seed);
      }
      return run_decode(model, nullptr, ds, weights, dec_args.out_dir,
                        load_config(dec_args), dec_args.seed);
    }
    if (eval->parsed()) return cmd_eval(eval_args, eval_refs, eval_hyps, eval_stats);
    if (profile->parsed()) return cmd_profile(prof_args, prof_data, prof_model);
    if (compare->parsed()) return cmd_compare_compression(cmp_args, cmp_data);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
