#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "ctcprompt/checkpoint.hpp"
#include "ctcprompt/data.hpp"
#include "ctcprompt/model.hpp"

namespace ctcprompt {

struct TrainConfig {
  double lambda = 0.3;                // CTC weight in the joint ASR loss
  double theta = 2.0;                 // immature-prompt threshold (inf disables)
  double lm_batch_fraction = 0.10;    // probability a step is an LM step
  double pseudo_split = 0.5;          // share of LM items given pseudo prompts (1:1)
  std::size_t warmup_steps = 400;
  double peak_scale = 1.0;            // Noam scale
  double adam_beta1 = 0.9, adam_beta2 = 0.98, adam_eps = 1e-9;
  std::size_t steps = 2000;
  std::size_t batch_asr = 8;
  std::size_t batch_lm = 8;
  std::size_t steps_per_epoch = 200;  // checkpoint cadence
  bool pretrain_finetune = false;     // two-phase schedule instead of from-scratch
  std::size_t pretrain_steps = 0;     // phase-1 length when pretrain_finetune
  std::uint64_t seed = 1;

  void validate() const {
    if (lambda < 0.0 || lambda > 1.0)
      throw std::invalid_argument("TrainConfig: lambda must be in [0,1]");
    if (!(theta > 0.0)) throw std::invalid_argument("TrainConfig: theta must be > 0");
    if (lm_batch_fraction < 0.0 || lm_batch_fraction > 1.0 || pseudo_split < 0.0 ||
        pseudo_split > 1.0)
      throw std::invalid_argument("TrainConfig: fractions must be in [0,1]");
    if (warmup_steps == 0) throw std::invalid_argument("TrainConfig: warmup_steps >= 1");
  }

  static TrainConfig from(const Config& c) {
    TrainConfig t;
    t.lambda = c.get_real("lambda", 0.3);
    t.theta = c.get_real("theta", 2.0);
    t.lm_batch_fraction = c.get_real("lm_batch_fraction", 0.10);
    t.pseudo_split = c.get_real("pseudo_split", 0.5);
    t.warmup_steps = std::size_t(c.get_int("warmup_steps", 400));
    t.peak_scale = c.get_real("peak_scale", 1.0);
    t.adam_beta1 = c.get_real("adam_beta1", 0.9);
    t.adam_beta2 = c.get_real("adam_beta2", 0.98);
    t.adam_eps = c.get_real("adam_eps", 1e-9);
    t.steps = std::size_t(c.get_int("steps", 2000));
    t.batch_asr = std::size_t(c.get_int("batch_asr", 8));
    t.batch_lm = std::size_t(c.get_int("batch_lm", 8));
    t.steps_per_epoch = std::size_t(c.get_int("steps_per_epoch", 200));
    t.pretrain_finetune = c.get_bool("pretrain_finetune", false);
    t.pretrain_steps = std::size_t(c.get_int("pretrain_steps", 0));
    t.seed = std::uint64_t(c.get_int("seed", 1));
    return t;
  }
};

// lr = scale * d^{-1/2} * min(step^{-1/2}, step * warmup^{-3/2})
inline double noam_lr(std::size_t step, std::size_t model_dim, std::size_t warmup,
                      double scale = 1.0) {
  if (step < 1) throw std::invalid_argument("noam_lr: step must be >= 1");
  const double s = double(step);
  return scale / std::sqrt(double(model_dim)) *
         std::min(1.0 / std::sqrt(s), s * std::pow(double(warmup), -1.5));
}

// true = the CTC prediction is immature for this sentence (tau > theta * I)
inline bool immature_check(std::size_t tau, std::size_t target_len, double theta) {
  if (target_len < 1) throw std::invalid_argument("immature_check: target_len >= 1");
  return double(tau) > theta * double(target_len);
}

class AdamOptimizer {
 public:
  AdamOptimizer(NamedParams params, double beta1, double beta2, double eps)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& [name, t] : params_) {
      m_.emplace_back(t.size(), 0.0);
      v_.emplace_back(t.size(), 0.0);
    }
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, double(t_));
    const double bc2 = 1.0 - std::pow(beta2_, double(t_));
    for (std::size_t p = 0; p < params_.size(); ++p) {
      Tensor& param = params_[p].second;
      const auto& g = param.grad();
      auto& m = m_[p];
      auto& v = v_[p];
      for (std::size_t i = 0; i < g.size(); ++i) {
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
        param.at(i) -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
      }
    }
  }

  void zero_grads() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  std::uint64_t steps_taken() const { return t_; }

  OptimizerBlob blob() const { return {t_, m_, v_}; }
  void restore(const OptimizerBlob& b) {
    t_ = b.step;
    m_ = b.m;
    v_ = b.v;
  }

 private:
  NamedParams params_;
  double beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Batch scheduling: each step is either an ASR step or an LM step (Bernoulli
// with p = lm_batch_fraction); LM items alternate round-robin between plain
// LM and pseudo-prompt LM to hold the 1:1 split.
// ---------------------------------------------------------------------------

struct BatchPlan {
  std::vector<std::size_t> asr_items;
  std::vector<std::size_t> lm_items;
  std::vector<std::size_t> pseudo_lm_items;
  bool is_lm_step() const { return asr_items.empty(); }
};

class BatchPlanner {
 public:
  BatchPlanner(std::size_t n_paired, std::size_t n_text, const TrainConfig& cfg)
      : n_paired_(n_paired), n_text_(n_text), cfg_(cfg), rng_(cfg.seed) {
    if (n_paired_ == 0) throw std::invalid_argument("BatchPlanner: no paired data");
    if (cfg_.lm_batch_fraction > 0.0 && n_text_ == 0)
      throw std::invalid_argument(
          "BatchPlanner: lm_batch_fraction > 0 but text data is empty");
  }

  BatchPlan next() {
    BatchPlan plan;
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    const bool lm_step = cfg_.lm_batch_fraction > 0.0 && coin(rng_) < cfg_.lm_batch_fraction;
    if (lm_step) {
      std::uniform_int_distribution<std::size_t> pickt(0, n_text_ - 1);
      for (std::size_t i = 0; i < cfg_.batch_lm; ++i) {
        const std::size_t item = pickt(rng_);
        const bool pseudo = (rr_++ % 2) == 1;  // strict alternation = 1:1
        if (cfg_.pseudo_split <= 0.0 || (cfg_.pseudo_split < 1.0 && !pseudo))
          plan.lm_items.push_back(item);
        else
          plan.pseudo_lm_items.push_back(item);
      }
    } else {
      std::uniform_int_distribution<std::size_t> pickp(0, n_paired_ - 1);
      for (std::size_t i = 0; i < cfg_.batch_asr; ++i)
        plan.asr_items.push_back(pickp(rng_));
    }
    return plan;
  }

 private:
  std::size_t n_paired_, n_text_;
  TrainConfig cfg_;
  std::mt19937_64 rng_;
  std::size_t rr_ = 0;
};

inline BatchPlan make_batch_plan(std::size_t n_paired, std::size_t n_text,
                                 const TrainConfig& cfg, BatchPlanner& planner) {
  (void)n_paired;
  (void)n_text;
  return planner.next();
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct AsrBatchLoss {
  Tensor total;               // lambda * mean ctc + (1-lambda) * mean att
  double ctc_value = 0.0;     // per-token means, for logging
  double att_value = 0.0;
  double tau_mean = 0.0;
  std::size_t immature_count = 0;
  std::size_t skipped = 0;    // CTC-infeasible items
};

// Joint loss over a paired batch. Each sentence whose prompt is immature
// (tau > theta * I) has its attention term replaced by the plain LM loss on
// its transcript. Per-token means are taken within each term before mixing.
inline AsrBatchLoss asr_loss(const AsrModel& model,
                             const std::vector<const PairedExample*>& batch,
                             double lambda, double theta) {
  AsrBatchLoss out;
  std::vector<Tensor> ctc_terms, att_terms;
  std::size_t ctc_tokens = 0, att_tokens = 0, tau_sum = 0, prompted = 0;
  for (const PairedExample* ex : batch) {
    EncoderOutput h = model.encoder.encode({ex->utt_id, ex->frames});
    CtcPosterior post = model.ctc.posteriors(h);
    Tensor ctc_l;
    try {
      ctc_l = ctc_loss(post, ex->transcript);
    } catch (const CtcInfeasibleError&) {
      ++out.skipped;
      continue;
    }
    ctc_terms.push_back(ctc_l);
    ctc_tokens += ex->transcript.size();

    GreedyPath path = greedy_path(post);
    PromptSequence prompt = model.make_prompt(h, path);
    tau_sum += prompt.length();
    ++prompted;
    Tensor nll;
    if (immature_check(prompt.length(), ex->transcript.size(), theta)) {
      ++out.immature_count;
      nll = model.decoder.lm_token_nll(ex->transcript);
    } else {
      nll = model.decoder.asr_token_nll(prompt, ex->transcript);
    }
    att_terms.push_back(reduce_sum(nll));
    att_tokens += ex->transcript.size() + 1;  // body + <eos>
  }
  if (ctc_terms.empty())
    throw std::runtime_error("asr_loss: every item in the batch was CTC-infeasible");

  Tensor ctc_sum = ctc_terms[0];
  for (std::size_t i = 1; i < ctc_terms.size(); ++i) ctc_sum = add(ctc_sum, ctc_terms[i]);
  Tensor att_sum = att_terms[0];
  for (std::size_t i = 1; i < att_terms.size(); ++i) att_sum = add(att_sum, att_terms[i]);

  Tensor ctc_mean = scale(ctc_sum, 1.0 / double(ctc_tokens));
  Tensor att_mean = scale(att_sum, 1.0 / double(att_tokens));
  out.total = add(scale(ctc_mean, lambda), scale(att_mean, 1.0 - lambda));
  out.ctc_value = ctc_mean.value();
  out.att_value = att_mean.value();
  out.tau_mean = prompted ? double(tau_sum) / double(prompted) : 0.0;
  return out;
}

// Per-token LM NLL over text-only sentences (empty sentences are skipped).
inline Tensor lm_loss(const DecoderModel& dec, const std::vector<TokenSequence>& batch) {
  std::vector<Tensor> terms;
  std::size_t tokens = 0;
  for (const TokenSequence& s : batch) {
    if (s.empty()) continue;
    terms.push_back(reduce_sum(dec.lm_token_nll(s)));
    tokens += s.size() + 1;
  }
  if (terms.empty()) throw std::invalid_argument("lm_loss: batch has no usable sentences");
  Tensor sum = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) sum = add(sum, terms[i]);
  return scale(sum, 1.0 / double(tokens));
}

// LM loss with pseudo audio prompts: the ground-truth token embeddings stand
// in for the prompt, and the loss covers the transcription positions.
inline Tensor pseudo_prompt_lm_loss(const DecoderModel& dec,
                                    const std::vector<TokenSequence>& batch) {
  std::vector<Tensor> terms;
  std::size_t tokens = 0;
  for (const TokenSequence& s : batch) {
    if (s.empty()) continue;
    terms.push_back(reduce_sum(dec.pseudo_prompt_token_nll(s)));
    tokens += s.size() + 1;
  }
  if (terms.empty())
    throw std::invalid_argument("pseudo_prompt_lm_loss: batch has no usable sentences");
  Tensor sum = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) sum = add(sum, terms[i]);
  return scale(sum, 1.0 / double(tokens));
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

struct StepMetrics {
  std::size_t step = 0;
  double loss_ctc = 0.0, loss_att = 0.0, loss_lm = 0.0, loss_lm_pseudo = 0.0;
  double lr = 0.0, tau_mean = 0.0;
  std::size_t immature_count = 0;
};

inline std::string format_metrics_line(const StepMetrics& m) {
  char buf[320];
  std::snprintf(buf, sizeof(buf), "%zu, %.17g, %.17g, %.17g, %.17g, %.17g, %.17g, %zu",
                m.step, m.loss_ctc, m.loss_att, m.loss_lm, m.loss_lm_pseudo, m.lr,
                m.tau_mean, m.immature_count);
  return buf;
}

struct TrainResult {
  std::vector<StepMetrics> metrics;
};

// Joint ASR + LM training from scratch. Writes metrics.log and per-epoch
// checkpoints when out_dir is non-empty. Deterministic under fixed seed.
inline TrainResult train(AsrModel& model, const DataSet& data, const TrainConfig& cfg,
                         const std::string& out_dir = "",
                         const Config* ckpt_config = nullptr) {
  cfg.validate();
  NamedParams params = model.params();
  AdamOptimizer opt(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  BatchPlanner planner(data.paired.size(), data.texts.size(), cfg);
  std::vector<TokenSequence> text_tokens;
  text_tokens.reserve(data.texts.size());
  for (const auto& t : data.texts) text_tokens.push_back(data.tokenizer.tokenize(t));

  std::ofstream log;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    log.open(out_dir + "/metrics.log");
    log << "step, loss_ctc, loss_att, loss_lm, loss_lm_pseudo, lr, tau_mean, immature_count\n";
  }
  Config stored = ckpt_config ? *ckpt_config : Config();
  model.cfg.store(stored);

  TrainResult result;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    // Two-phase variant: phase 1 pretrains CTC (lambda = 1) and runs the
    // decoder on LM batches only; phase 2 fine-tunes with the joint loss.
    const bool pretrain_phase = cfg.pretrain_finetune && step <= cfg.pretrain_steps;
    double lambda = cfg.lambda;
    if (pretrain_phase) lambda = 1.0;

    BatchPlan plan = planner.next();
    const double lr = noam_lr(step, model.cfg.model_dim, cfg.warmup_steps, cfg.peak_scale);
    opt.zero_grads();
    StepMetrics m;
    m.step = step;
    m.lr = lr;

    if (plan.is_lm_step()) {
      std::vector<TokenSequence> plain, pseudo;
      for (std::size_t i : plan.lm_items) plain.push_back(text_tokens[i]);
      for (std::size_t i : plan.pseudo_lm_items) pseudo.push_back(text_tokens[i]);
      std::vector<Tensor> terms;
      if (!plain.empty()) {
        Tensor l = lm_loss(model.decoder, plain);
        m.loss_lm = l.value();
        terms.push_back(l);
      }
      if (!pseudo.empty()) {
        Tensor l = pseudo_prompt_lm_loss(model.decoder, pseudo);
        m.loss_lm_pseudo = l.value();
        terms.push_back(l);
      }
      Tensor total = terms.size() == 1 ? terms[0] : scale(add(terms[0], terms[1]), 0.5);
      total.backward();
    } else {
      std::vector<const PairedExample*> batch;
      for (std::size_t i : plan.asr_items) batch.push_back(&data.paired[i]);
      AsrBatchLoss l = asr_loss(model, batch, lambda, cfg.theta);
      m.loss_ctc = l.ctc_value;
      m.loss_att = l.att_value;
      m.tau_mean = l.tau_mean;
      m.immature_count = l.immature_count;
      if (!std::isfinite(l.total.value())) {
        if (!out_dir.empty()) {
          std::ofstream dump(out_dir + "/diverged.txt");
          dump << "non-finite loss at step " << step << "\n"
               << format_metrics_line(m) << "\n";
          save_checkpoint(out_dir + "/diverged.ckpt", params, stored, cfg.seed, step);
        }
        throw std::runtime_error("train: non-finite loss at step " +
                                 std::to_string(step));
      }
      l.total.backward();
    }
    opt.step(lr);
    if (log) log << format_metrics_line(m) << "\n";
    result.metrics.push_back(m);
    if (!out_dir.empty() && cfg.steps_per_epoch > 0 && step % cfg.steps_per_epoch == 0) {
      OptimizerBlob blob = opt.blob();
      save_checkpoint(out_dir + "/epoch" + std::to_string(step / cfg.steps_per_epoch) +
                          ".ckpt",
                      params, stored, cfg.seed, step, &blob);
    }
  }
  if (!out_dir.empty()) {
    OptimizerBlob blob = opt.blob();
    save_checkpoint(out_dir + "/final.ckpt", params, stored, cfg.seed, cfg.steps, &blob);
  }
  return result;
}

struct ExternalLmResult {
  DecoderModel lm;
  double heldout_perplexity = 0.0;
};

// Shallow decoder-architecture LM for shallow fusion; reports held-out
// perplexity on a 10% split.
inline ExternalLmResult train_external_lm(const std::vector<std::string>& texts,
                                          const Tokenizer& tokenizer,
                                          std::size_t model_dim, std::size_t heads,
                                          std::size_t ff_dim, std::size_t blocks,
                                          const TrainConfig& cfg) {
  if (texts.empty()) throw std::invalid_argument("train_external_lm: empty corpus");
  std::vector<TokenSequence> tokens;
  for (const auto& t : texts) tokens.push_back(tokenizer.tokenize(t));
  const std::size_t held = std::max<std::size_t>(1, tokens.size() / 10);
  std::vector<TokenSequence> train_set(tokens.begin(), tokens.end() - std::ptrdiff_t(held));
  std::vector<TokenSequence> held_set(tokens.end() - std::ptrdiff_t(held), tokens.end());
  if (train_set.empty()) train_set = held_set;

  DecoderConfig dc;
  dc.vocab = tokenizer.vocab();
  dc.layer = {model_dim, heads, ff_dim, blocks, 0.0};
  std::mt19937_64 rng(cfg.seed);
  ExternalLmResult out{DecoderModel(dc, rng), 0.0};

  NamedParams params;
  out.lm.collect("lm", params);
  AdamOptimizer opt(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  std::mt19937_64 batch_rng(cfg.seed + 1);
  std::uniform_int_distribution<std::size_t> pick(0, train_set.size() - 1);
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    std::vector<TokenSequence> batch;
    for (std::size_t i = 0; i < cfg.batch_lm; ++i) batch.push_back(train_set[pick(batch_rng)]);
    opt.zero_grads();
    Tensor l = lm_loss(out.lm, batch);
    l.backward();
    opt.step(noam_lr(step, model_dim, cfg.warmup_steps, cfg.peak_scale));
  }
  // held-out perplexity: exp of per-token NLL
  NoGradGuard ng;
  double nll = 0.0;
  std::size_t count = 0;
  for (const TokenSequence& s : held_set) {
    if (s.empty()) continue;
    Tensor t = out.lm.lm_token_nll(s);
    for (std::size_t i = 0; i < t.size(); ++i) nll += t.at(i);
    count += s.size() + 1;
  }
  out.heldout_perplexity = count ? std::exp(nll / double(count)) : 0.0;
  return out;
}

}  // namespace ctcprompt
