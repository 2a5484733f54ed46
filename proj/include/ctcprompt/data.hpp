#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ctcprompt/config.hpp"
#include "ctcprompt/tensor.hpp"
#include "ctcprompt/vocab.hpp"

namespace ctcprompt {

// Character tokenizer over an explicit charset; id = 1 + index in charset.
struct Tokenizer {
  std::string charset;
  std::map<char, std::size_t> ids;

  Tokenizer() = default;
  explicit Tokenizer(std::string chars) : charset(std::move(chars)) {
    for (std::size_t i = 0; i < charset.size(); ++i) ids[charset[i]] = i + 1;
    if (ids.size() != charset.size())
      throw std::invalid_argument("Tokenizer: duplicate characters in charset");
  }

  Vocab vocab() const { return Vocab{charset.size()}; }

  TokenSequence tokenize(const std::string& text) const {
    TokenSequence out;
    out.reserve(text.size());
    for (char c : text) {
      auto it = ids.find(c);
      if (it == ids.end())
        throw std::invalid_argument(std::string("tokenize: character '") + c +
                                    "' not in vocabulary");
      out.push_back(it->second);
    }
    return out;
  }

  std::string detokenize(const TokenSequence& tokens) const {
    std::string out;
    out.reserve(tokens.size());
    for (std::size_t t : tokens) {
      if (t < 1 || t > charset.size())
        throw std::invalid_argument("detokenize: id " + std::to_string(t) +
                                    " outside character range");
      out.push_back(charset[t - 1]);
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Feature files: 16-byte header {8-byte magic, u32 frames, u32 dim}, then
// row-major little-endian 64-bit reals.
// ---------------------------------------------------------------------------

constexpr char kFeatureMagic[8] = {'C', 'T', 'C', 'P', 'F', 'E', 'A', 'T'};

inline void write_features(const std::string& path, const Tensor& frames) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_features: cannot open " + path);
  out.write(kFeatureMagic, 8);
  const std::uint32_t t = std::uint32_t(frames.dim(0)), d = std::uint32_t(frames.dim(1));
  out.write(reinterpret_cast<const char*>(&t), 4);
  out.write(reinterpret_cast<const char*>(&d), 4);
  out.write(reinterpret_cast<const char*>(frames.values().data()),
            std::streamsize(frames.size() * sizeof(double)));
  if (!out) throw std::runtime_error("write_features: write failed for " + path);
}

inline Tensor read_features(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_features: cannot open " + path);
  char magic[8];
  std::uint32_t t = 0, d = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&t), 4);
  in.read(reinterpret_cast<char*>(&d), 4);
  if (!in || std::memcmp(magic, kFeatureMagic, 8) != 0)
    throw std::runtime_error("read_features: bad header in " + path);
  Tensor frames = Tensor::zeros({t, d});
  in.read(reinterpret_cast<char*>(frames.values().data()),
          std::streamsize(frames.size() * sizeof(double)));
  if (!in) throw std::runtime_error("read_features: truncated file " + path);
  return frames;
}

// ---------------------------------------------------------------------------
// Manifests: tab-separated `utt_id <TAB> feature_path <TAB> frames <TAB>
// transcript`. Text-only records use "-" and 0 for the feature fields.
// ---------------------------------------------------------------------------

struct ManifestRecord {
  std::string utt_id;
  std::string feature_path;  // empty for text-only
  std::size_t frames = 0;
  std::string transcript;

  bool text_only() const { return feature_path.empty(); }
};

struct Manifest {
  std::vector<ManifestRecord> records;

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("manifest: cannot open " + path);
    for (const auto& r : records)
      out << r.utt_id << '\t' << (r.feature_path.empty() ? "-" : r.feature_path) << '\t'
          << r.frames << '\t' << r.transcript << '\n';
  }

  // Loads and enforces referential integrity: unique utt ids, existing
  // feature files for paired records. Paths are resolved relative to the
  // manifest's directory.
  static Manifest load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("manifest: cannot open " + path);
    const auto dir = std::filesystem::path(path).parent_path();
    Manifest m;
    std::set<std::string> seen;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::vector<std::string> fields;
      std::size_t start = 0;
      for (std::size_t i = 0; i <= line.size(); ++i)
        if (i == line.size() || line[i] == '\t') {
          fields.push_back(line.substr(start, i - start));
          start = i + 1;
        }
      if (fields.size() != 4)
        throw std::runtime_error("manifest " + path + ": line " +
                                 std::to_string(lineno) + " has " +
                                 std::to_string(fields.size()) + " fields, expected 4");
      ManifestRecord r;
      r.utt_id = fields[0];
      r.feature_path = fields[1] == "-" ? "" : fields[1];
      r.frames = std::size_t(std::stoull(fields[2]));
      r.transcript = fields[3];
      if (!seen.insert(r.utt_id).second)
        throw std::runtime_error("manifest " + path + ": duplicate utt_id " + r.utt_id);
      if (!r.text_only()) {
        const auto full = dir / r.feature_path;
        if (!std::filesystem::exists(full))
          throw std::runtime_error("manifest " + path + ": missing feature file " +
                                   full.string() + " for " + r.utt_id);
        r.feature_path = full.string();
      }
      m.records.push_back(std::move(r));
    }
    return m;
  }
};

struct PairedExample {
  std::string utt_id;
  Tensor frames;
  std::string text;
  TokenSequence transcript;
};

struct DataSet {
  Tokenizer tokenizer;
  std::vector<PairedExample> paired;
  std::vector<std::string> texts;

  static DataSet load(const std::string& dir) {
    DataSet ds;
    std::ifstream vf(dir + "/vocab.txt");
    if (!vf) throw std::runtime_error("dataset: missing " + dir + "/vocab.txt");
    std::string charset;
    std::getline(vf, charset);
    ds.tokenizer = Tokenizer(charset);
    Manifest paired = Manifest::load(dir + "/paired.tsv");
    for (const auto& r : paired.records) {
      PairedExample ex;
      ex.utt_id = r.utt_id;
      ex.frames = read_features(r.feature_path);
      ex.text = r.transcript;
      ex.transcript = ds.tokenizer.tokenize(r.transcript);
      ds.paired.push_back(std::move(ex));
    }
    if (std::filesystem::exists(dir + "/text.tsv")) {
      Manifest text = Manifest::load(dir + "/text.tsv");
      for (const auto& r : text.records) ds.texts.push_back(r.transcript);
    }
    return ds;
  }
};

// ---------------------------------------------------------------------------
// Synthetic data: sentences over a small word lexicon; each character is
// rendered as a run of noisy copies of a character-specific feature template.
// ---------------------------------------------------------------------------

struct SynthConfig {
  std::size_t vocab_size = 5;  // letter characters; ' ' is added on top
  std::size_t feat_dim = 8;
  double frames_per_token_mean = 4.0;
  double frames_per_token_sigma = 0.8;
  // silence (near-zero features) inserted after each character's run; CTC
  // learns to predict blank there, which is what prompt compression removes
  double silence_frames_mean = 0.0;
  double silence_frames_sigma = 0.5;
  double noise_sigma = 0.35;
  // with this probability each word is followed by its fixed successor in the
  // lexicon (cyclic); gives sentences learnable bigram structure
  double word_chain_bias = 0.0;
  // when > 0, letters share acoustic templates modulo this count (homophones);
  // such letters are only separable through language knowledge
  std::size_t homophone_groups = 0;
  std::size_t n_utts = 100;
  std::size_t text_only_multiplier = 9;
  std::size_t n_words = 8;
  std::size_t word_len_min = 2, word_len_max = 4;
  std::size_t words_per_sentence_min = 2, words_per_sentence_max = 4;
  std::uint64_t seed = 1;

  void validate() const {
    if (vocab_size < 2) throw std::invalid_argument("gen_synthetic: vocab_size >= 2");
    if (frames_per_token_mean < 2.0)
      throw std::invalid_argument("gen_synthetic: frames_per_token mean >= 2");
    if (word_len_min < 1 || word_len_min > word_len_max ||
        words_per_sentence_min < 1 ||
        words_per_sentence_min > words_per_sentence_max || n_words < 1)
      throw std::invalid_argument("gen_synthetic: invalid lexicon/sentence bounds");
  }

  static SynthConfig from(const Config& c) {
    SynthConfig s;
    s.vocab_size = std::size_t(c.get_int("vocab_size", 5));
    s.feat_dim = std::size_t(c.get_int("feat_dim", 8));
    s.frames_per_token_mean = c.get_real("frames_per_token_mean", 4.0);
    s.frames_per_token_sigma = c.get_real("frames_per_token_sigma", 0.8);
    s.silence_frames_mean = c.get_real("silence_frames_mean", 0.0);
    s.silence_frames_sigma = c.get_real("silence_frames_sigma", 0.5);
    s.noise_sigma = c.get_real("noise_sigma", 0.35);
    s.word_chain_bias = c.get_real("word_chain_bias", 0.0);
    s.homophone_groups = std::size_t(c.get_int("homophone_groups", 0));
    s.n_utts = std::size_t(c.get_int("n_utts", 100));
    s.text_only_multiplier = std::size_t(c.get_int("text_only_multiplier", 9));
    s.n_words = std::size_t(c.get_int("n_words", 8));
    s.word_len_min = std::size_t(c.get_int("word_len_min", 2));
    s.word_len_max = std::size_t(c.get_int("word_len_max", 4));
    s.words_per_sentence_min = std::size_t(c.get_int("words_per_sentence_min", 2));
    s.words_per_sentence_max = std::size_t(c.get_int("words_per_sentence_max", 4));
    s.seed = std::uint64_t(c.get_int("seed", 1));
    return s;
  }
};

namespace detail {

inline std::vector<std::string> make_lexicon(const SynthConfig& cfg,
                                             const std::string& letters,
                                             std::mt19937_64& rng) {
  std::set<std::string> words;
  std::uniform_int_distribution<std::size_t> len_d(cfg.word_len_min, cfg.word_len_max);
  std::uniform_int_distribution<std::size_t> ch_d(0, letters.size() - 1);
  while (words.size() < cfg.n_words) {
    std::string w;
    const std::size_t len = len_d(rng);
    for (std::size_t i = 0; i < len; ++i) w.push_back(letters[ch_d(rng)]);
    words.insert(w);
  }
  return {words.begin(), words.end()};
}

inline std::string make_sentence(const SynthConfig& cfg,
                                 const std::vector<std::string>& lexicon,
                                 std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> n_d(cfg.words_per_sentence_min,
                                                 cfg.words_per_sentence_max);
  std::uniform_int_distribution<std::size_t> w_d(0, lexicon.size() - 1);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  const std::size_t n = n_d(rng);
  std::string s;
  std::size_t prev = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t w;
    if (i && cfg.word_chain_bias > 0.0 && coin(rng) < cfg.word_chain_bias)
      w = (prev + 1) % lexicon.size();
    else
      w = w_d(rng);
    if (i) s.push_back(' ');
    s += lexicon[w];
    prev = w;
  }
  return s;
}

}  // namespace detail

// In-memory synthetic dataset (the generator behind the gen-data command).
inline DataSet gen_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  if (cfg.vocab_size > 26)
    throw std::invalid_argument("gen_synthetic: vocab_size beyond 26 letters");
  std::mt19937_64 rng(cfg.seed);
  const std::string letters = std::string("abcdefghijklmnopqrstuvwxyz").substr(0, cfg.vocab_size);
  DataSet ds;
  ds.tokenizer = Tokenizer(letters + " ");

  // one feature template per charset entry (space included)
  const std::size_t n_chars = ds.tokenizer.charset.size();
  std::vector<std::vector<double>> templates(n_chars, std::vector<double>(cfg.feat_dim));
  std::normal_distribution<double> unit(0.0, 1.0);
  for (auto& t : templates)
    for (double& v : t) v = unit(rng);
  if (cfg.homophone_groups > 0)
    for (std::size_t li = cfg.homophone_groups; li < cfg.vocab_size; ++li)
      templates[li] = templates[li % cfg.homophone_groups];

  const auto lexicon = detail::make_lexicon(cfg, letters, rng);
  std::normal_distribution<double> dur(cfg.frames_per_token_mean, cfg.frames_per_token_sigma);
  std::normal_distribution<double> sil(cfg.silence_frames_mean, cfg.silence_frames_sigma);
  std::normal_distribution<double> noise(0.0, cfg.noise_sigma);

  for (std::size_t u = 0; u < cfg.n_utts; ++u) {
    PairedExample ex;
    ex.utt_id = "utt" + std::to_string(u);
    ex.text = detail::make_sentence(cfg, lexicon, rng);
    ex.transcript = ds.tokenizer.tokenize(ex.text);
    std::vector<double> rows;
    std::size_t total = 0;
    for (std::size_t tok : ex.transcript) {
      const double draw = dur(rng);
      const std::size_t k = std::size_t(std::max(2.0, std::round(draw)));
      for (std::size_t f = 0; f < k; ++f) {
        for (std::size_t j = 0; j < cfg.feat_dim; ++j)
          rows.push_back(templates[tok - 1][j] +
                         (cfg.noise_sigma > 0.0 ? noise(rng) : 0.0));
        ++total;
      }
      if (cfg.silence_frames_mean > 0.0) {
        const std::size_t pause =
            std::size_t(std::max(0.0, std::round(sil(rng))));
        for (std::size_t f = 0; f < pause; ++f) {
          for (std::size_t j = 0; j < cfg.feat_dim; ++j)
            rows.push_back(cfg.noise_sigma > 0.0 ? noise(rng) : 0.0);
          ++total;
        }
      }
    }
    ex.frames = Tensor::from({total, cfg.feat_dim}, std::move(rows));
    ds.paired.push_back(std::move(ex));
  }
  const std::size_t n_text = cfg.n_utts * cfg.text_only_multiplier;
  for (std::size_t u = 0; u < n_text; ++u)
    ds.texts.push_back(detail::make_sentence(cfg, lexicon, rng));
  return ds;
}

// Materialize a dataset as manifests + feature files under dir.
inline void write_dataset(const DataSet& ds, const std::string& dir) {
  std::filesystem::create_directories(dir + "/feats");
  {
    std::ofstream vf(dir + "/vocab.txt");
    vf << ds.tokenizer.charset << "\n";
  }
  Manifest paired;
  for (const auto& ex : ds.paired) {
    const std::string rel = "feats/" + ex.utt_id + ".bin";
    write_features(dir + "/" + rel, ex.frames);
    paired.records.push_back({ex.utt_id, rel, ex.frames.dim(0), ex.text});
  }
  paired.save(dir + "/paired.tsv");
  Manifest text;
  for (std::size_t i = 0; i < ds.texts.size(); ++i)
    text.records.push_back({"txt" + std::to_string(i), "", 0, ds.texts[i]});
  text.save(dir + "/text.tsv");
}

// Reproducibility header every CLI workflow writes into its output dir.
inline void write_run_info(const std::string& dir, const Config& cfg,
                           std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir + "/run_info.txt");
  out << "artifact_version = 1\n";
  out << "seed = " << seed << "\n";
  out << "config_hash = " << cfg.hash() << "\n";
}

}  // namespace ctcprompt
