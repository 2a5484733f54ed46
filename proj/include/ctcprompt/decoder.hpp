#pragma once

#include <random>
#include <string>
#include <vector>

#include "ctcprompt/layers.hpp"
#include "ctcprompt/tensor.hpp"
#include "ctcprompt/vocab.hpp"

namespace ctcprompt {

struct PromptSequence {
  Tensor embeddings;  // [tau x model_dim]
  std::size_t length() const { return embeddings.dim(0); }
};

struct DecoderConfig {
  Vocab vocab;
  LayerConfig layer{.model_dim = 256, .heads = 4, .ff_dim = 2048, .blocks = 6};
};

// Decoder-only transformer. ASR input is [<aud>, prompt rows, <sos>, tokens]
// under one continuous positional encoding; with no <aud>/prompt it is a
// plain autoregressive LM over [<sos>, tokens].
struct DecoderModel {
  DecoderConfig cfg;
  Tensor embedding;   // [(V+4) x d]
  Linear prompt_map;  // linear map from encoder space to embedding space
  std::vector<TransformerBlock> blocks;
  LayerNorm final_ln;
  Linear out_head;  // d -> V+1 (V chars + <eos>)

  DecoderModel() = default;
  DecoderModel(const DecoderConfig& c, std::mt19937_64& rng) : cfg(c) {
    cfg.layer.validate();
    const std::size_t d = cfg.layer.model_dim;
    embedding = init_gaussian({cfg.vocab.n_embeddings(), d}, d, rng);
    prompt_map = Linear(d, d, rng);
    for (std::size_t i = 0; i < cfg.layer.blocks; ++i)
      blocks.emplace_back(cfg.layer, false, rng);
    final_ln = LayerNorm(d);
    out_head = Linear(d, cfg.vocab.n_out_classes(), rng);
  }

  void collect(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".embedding", embedding);
    prompt_map.collect(prefix + ".prompt_map", out);
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(prefix + ".block" + std::to_string(i), out);
    final_ln.collect(prefix + ".final_ln", out);
    out_head.collect(prefix + ".out_head", out);
  }

  PromptSequence map_prompt(const Tensor& frames) const {
    if (frames.dim(0) == 0) return {Tensor::zeros({0, cfg.layer.model_dim})};
    return {prompt_map(frames)};
  }

  // Ground-truth token embeddings standing in for audio prompts (the
  // pseudo-prompt LM task); bypasses prompt_map.
  PromptSequence pseudo_prompt(const TokenSequence& sentence) const {
    if (sentence.empty()) return {Tensor::zeros({0, cfg.layer.model_dim})};
    return {embedding_lookup(embedding, sentence)};
  }

  // Log-probabilities [L x (V+1)] for every position of the assembled input.
  // Row i scores the token following input position i.
  Tensor forward_rows(const Tensor& input_rows) const {
    Tensor x = add(input_rows, positional_encoding(input_rows.dim(0), cfg.layer.model_dim));
    AttentionMask mask = AttentionMask::causal(x.dim(0));
    for (const TransformerBlock& b : blocks) x = b(x, mask);
    return log_softmax(out_head(final_ln(x)));
  }

  Tensor assemble_asr_input(const PromptSequence& prompt,
                            const TokenSequence& prefix) const {
    if (prefix.empty() || prefix[0] != cfg.vocab.sos())
      throw std::invalid_argument("decoder: prefix must begin with <sos>");
    Tensor aud = embedding_lookup(embedding, {cfg.vocab.aud()});
    Tensor toks = embedding_lookup(embedding, prefix);
    return concat({aud, prompt.embeddings, toks});
  }

  // Next-token log-distribution given [<aud>, prompt, prefix].
  Tensor next_token_logprobs(const PromptSequence& prompt,
                             const TokenSequence& prefix) const {
    Tensor lp = forward_rows(assemble_asr_input(prompt, prefix));
    return slice_rows(lp, lp.dim(0) - 1, lp.dim(0));
  }

  // log p(y | prompt) with y ending in <eos>; sums per-step scores for the
  // body tokens and the final <eos> step.
  Tensor sequence_logprob(const PromptSequence& prompt, const TokenSequence& y) const {
    if (y.empty() || y.back() != cfg.vocab.eos())
      throw std::invalid_argument("sequence_logprob: sequence must end with <eos>");
    TokenSequence prefix{cfg.vocab.sos()};
    prefix.insert(prefix.end(), y.begin(), y.end() - 1);
    Tensor lp = forward_rows(assemble_asr_input(prompt, prefix));
    const std::size_t base = 1 + prompt.length();  // rows predicting y[0..]
    Tensor region = slice_rows(lp, base, base + y.size());
    std::vector<std::size_t> cls;
    for (std::size_t tok : y) cls.push_back(cfg.vocab.out_class_of(tok));
    return reduce_sum(pick(region, cls));
  }

  // LM mode: same weights, input is [<sos>, tokens] only.
  Tensor lm_logprobs(const TokenSequence& prefix) const {
    if (prefix.empty() || prefix[0] != cfg.vocab.sos())
      throw std::invalid_argument("lm_logprobs: prefix must begin with <sos>");
    Tensor lp = forward_rows(embedding_lookup(embedding, prefix));
    return slice_rows(lp, lp.dim(0) - 1, lp.dim(0));
  }

  // Teacher-forced NLL of a sentence (plus <eos>) in LM mode, one scalar per
  // token position, shape [I+1].
  Tensor lm_token_nll(const TokenSequence& sentence) const {
    TokenSequence prefix{cfg.vocab.sos()};
    prefix.insert(prefix.end(), sentence.begin(), sentence.end());
    Tensor lp = forward_rows(embedding_lookup(embedding, prefix));
    TokenSequence targets = sentence;
    targets.push_back(cfg.vocab.eos());
    std::vector<std::size_t> cls;
    for (std::size_t tok : targets) cls.push_back(cfg.vocab.out_class_of(tok));
    return scale(pick(lp, cls), -1.0);
  }

  // Teacher-forced NLL over the transcription part only, given a prompt;
  // shape [I+1] (body tokens plus <eos>).
  Tensor asr_token_nll(const PromptSequence& prompt, const TokenSequence& sentence) const {
    TokenSequence y = sentence;
    y.push_back(cfg.vocab.eos());
    TokenSequence prefix{cfg.vocab.sos()};
    prefix.insert(prefix.end(), y.begin(), y.end() - 1);
    Tensor lp = forward_rows(assemble_asr_input(prompt, prefix));
    const std::size_t base = 1 + prompt.length();
    Tensor region = slice_rows(lp, base, base + y.size());
    std::vector<std::size_t> cls;
    for (std::size_t tok : y) cls.push_back(cfg.vocab.out_class_of(tok));
    return scale(pick(region, cls), -1.0);
  }

  // Pseudo-prompt variant: prompt positions carry the ground-truth token
  // embeddings of the same sentence, preceded by <aud>.
  Tensor pseudo_prompt_token_nll(const TokenSequence& sentence) const {
    return asr_token_nll(pseudo_prompt(sentence), sentence);
  }
};

// Incremental decoding cache: per-block projected K/V of all consumed
// positions. Step output is contractually identical (within 1e-9) to a
// full-sequence recompute.
struct DecoderState {
  const DecoderModel* model = nullptr;
  std::vector<Tensor> k_cache, v_cache;  // per block, [len x d]
  std::size_t len = 0;
  std::size_t key_reads = 0;  // attention key-value reads, all blocks

  explicit DecoderState(const DecoderModel& m) : model(&m) {
    k_cache.assign(m.blocks.size(), Tensor::zeros({0, m.cfg.layer.model_dim}));
    v_cache.assign(m.blocks.size(), Tensor::zeros({0, m.cfg.layer.model_dim}));
  }

  // Feed one embedded input row; returns the [1 x (V+1)] log-distribution
  // for the next token.
  Tensor step_embedded(const Tensor& row) {
    Tensor x = add(row, positional_encoding_row(len, model->cfg.layer.model_dim));
    for (std::size_t b = 0; b < model->blocks.size(); ++b) {
      const TransformerBlock& blk = model->blocks[b];
      Tensor h = blk.ln1(x);
      k_cache[b] = concat(k_cache[b], blk.attn.wk(h));
      v_cache[b] = concat(v_cache[b], blk.attn.wv(h));
      x = add(x, blk.attn.attend_cached(h, k_cache[b], v_cache[b]));
      x = add(x, blk.ff(blk.ln2(x)));
      key_reads += k_cache[b].dim(0);
    }
    ++len;
    return log_softmax(model->out_head(model->final_ln(x)));
  }

  Tensor step_token(std::size_t token_id) {
    return step_embedded(embedding_lookup(model->embedding, {token_id}));
  }

  // Consume [<aud>, prompt, <sos>]; returns the distribution for the first
  // transcription token.
  Tensor prime_asr(const PromptSequence& prompt) {
    Tensor out = step_token(model->cfg.vocab.aud());
    for (std::size_t t = 0; t < prompt.length(); ++t)
      out = step_embedded(slice_rows(prompt.embeddings, t, t + 1));
    return step_token(model->cfg.vocab.sos());
  }

  DecoderState fork() const { return *this; }
};

}  // namespace ctcprompt
