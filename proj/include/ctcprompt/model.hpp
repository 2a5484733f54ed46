#pragma once

#include <random>
#include <string>

#include "ctcprompt/config.hpp"
#include "ctcprompt/decoder.hpp"
#include "ctcprompt/encoder.hpp"
#include "ctcprompt/vocab.hpp"

namespace ctcprompt {

struct ModelConfig {
  std::size_t n_chars = 0;  // vocabulary characters (tokenizer charset size)
  std::size_t feat_dim = 80;
  std::size_t model_dim = 256;
  std::size_t heads = 4;
  std::size_t ff_dim = 2048;
  std::size_t enc_blocks = 12;
  std::size_t dec_blocks = 6;
  std::size_t subsample = 4;
  bool enc_conv_module = false;
  CompressionKind compression = CompressionKind::Remove;
  std::size_t downsample_factor = 2;

  static ModelConfig from(const Config& c) {
    ModelConfig m;
    m.n_chars = std::size_t(c.get_int("n_chars", 0));
    m.feat_dim = std::size_t(c.get_int("feat_dim", 80));
    m.model_dim = std::size_t(c.get_int("model_dim", 256));
    m.heads = std::size_t(c.get_int("heads", 4));
    m.ff_dim = std::size_t(c.get_int("ff_dim", 2048));
    m.enc_blocks = std::size_t(c.get_int("enc_blocks", 12));
    m.dec_blocks = std::size_t(c.get_int("dec_blocks", 6));
    m.subsample = std::size_t(c.get_int("subsample", 4));
    m.enc_conv_module = c.get_bool("enc_conv_module", false);
    m.compression = compression_from_string(c.get_str("compression", "remove"));
    m.downsample_factor = std::size_t(c.get_int("downsample_factor", 2));
    return m;
  }

  void store(Config& c) const {
    c.set("n_chars", std::to_string(n_chars));
    c.set("feat_dim", std::to_string(feat_dim));
    c.set("model_dim", std::to_string(model_dim));
    c.set("heads", std::to_string(heads));
    c.set("ff_dim", std::to_string(ff_dim));
    c.set("enc_blocks", std::to_string(enc_blocks));
    c.set("dec_blocks", std::to_string(dec_blocks));
    c.set("subsample", std::to_string(subsample));
    c.set("enc_conv_module", enc_conv_module ? "true" : "false");
    c.set("compression", to_string(compression));
    c.set("downsample_factor", std::to_string(downsample_factor));
    // blank index convention recorded so decoders agree
    c.set("ctc_blank_index", "0");
  }
};

// Encoder + CTC head + prompt compressor + decoder, sharing one vocabulary.
struct AsrModel {
  ModelConfig cfg;
  Vocab vocab;
  Encoder encoder;
  CtcHead ctc;
  PromptCompressor compressor;
  DecoderModel decoder;

  AsrModel() = default;
  AsrModel(const ModelConfig& c, std::uint64_t seed) : cfg(c), vocab{c.n_chars} {
    if (c.n_chars < 1) throw std::invalid_argument("AsrModel: n_chars must be set");
    std::mt19937_64 rng(seed);
    EncoderConfig ec;
    ec.feat_dim = c.feat_dim;
    ec.subsample = c.subsample;
    ec.layer = {c.model_dim, c.heads, c.ff_dim, c.enc_blocks, 0.0};
    ec.conv_module = c.enc_conv_module;
    encoder = Encoder(ec, rng);
    ctc = CtcHead(c.model_dim, vocab.n_ctc_classes(), rng);
    compressor = PromptCompressor(c.compression, c.model_dim, c.downsample_factor, rng);
    DecoderConfig dc;
    dc.vocab = vocab;
    dc.layer = {c.model_dim, c.heads, c.ff_dim, c.dec_blocks, 0.0};
    decoder = DecoderModel(dc, rng);
  }

  NamedParams params() const {
    NamedParams out;
    encoder.collect("enc", out);
    ctc.collect("ctc", out);
    compressor.collect("comp", out);
    decoder.collect("dec", out);
    return out;
  }

  // prompt for an utterance under the current parameters
  PromptSequence make_prompt(const EncoderOutput& h, const GreedyPath& path) const {
    return decoder.map_prompt(compressor.compress(h, path));
  }
};

inline void zero_all_grads(const NamedParams& params) {
  for (const auto& [name, t] : params) const_cast<Tensor&>(t).zero_grad();
}

}  // namespace ctcprompt
