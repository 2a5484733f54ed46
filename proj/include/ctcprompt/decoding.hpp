#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "ctcprompt/decoder.hpp"
#include "ctcprompt/encoder.hpp"
#include "ctcprompt/model.hpp"

namespace ctcprompt {

struct FusionWeights {
  double ctc_weight = 0.0;
  double lm_weight = 0.0;
  double length_penalty = 0.0;  // additive per token; positive rewards length
  std::size_t beam = 10;
  std::size_t nbest = 10;
  std::size_t max_len = 0;  // 0 = default cap 2*(tau+5)

  void validate() const {
    if (beam < 1) throw std::invalid_argument("FusionWeights: beam >= 1");
    if (ctc_weight < 0.0 || lm_weight < 0.0)
      throw std::invalid_argument("FusionWeights: weights must be >= 0");
  }
};

// ---------------------------------------------------------------------------
// CTC prefix scoring: the blank/non-blank forward recursion over frames,
// in log space. psi(prefix) = log P(CTC output begins with prefix);
// complete(prefix) = log P(output is exactly prefix).
// ---------------------------------------------------------------------------

struct CtcPrefixState {
  std::vector<double> r_n, r_b;  // per frame: prefix ends here, last emission nonblank/blank
  std::size_t last = 0;          // last token of the prefix (0 = empty prefix)
  double psi = 0.0;              // log prefix probability
};

class CtcPrefixScorer {
 public:
  explicit CtcPrefixScorer(const CtcPosterior& p)
      : frames_(p.frames()), classes_(p.classes()), lp_(p.log_probs.values()) {}

  CtcPrefixState initial() const {
    using detail::kLogZero;
    CtcPrefixState s;
    s.r_n.assign(frames_, kLogZero);
    s.r_b.resize(frames_);
    double acc = 0.0;
    for (std::size_t t = 0; t < frames_; ++t) {
      acc += lp(t, Vocab::blank);
      s.r_b[t] = acc;
    }
    s.last = 0;
    s.psi = 0.0;
    return s;
  }

  // Extend the prefix by non-blank token c; the returned state's psi is the
  // new log prefix probability (log 0 when infeasible).
  CtcPrefixState extend(const CtcPrefixState& s, std::size_t c) const {
    using detail::kLogZero;
    using detail::log_add;
    if (c == Vocab::blank || c >= classes_)
      throw std::invalid_argument("ctc_prefix_score: invalid extension token " +
                                  std::to_string(c));
    CtcPrefixState out;
    out.last = c;
    out.r_n.assign(frames_, kLogZero);
    out.r_b.assign(frames_, kLogZero);
    if (frames_ == 0) {
      out.psi = kLogZero;
      return out;
    }
    out.r_n[0] = s.last == 0 ? lp(0, c) : kLogZero;
    double psi = out.r_n[0];
    for (std::size_t t = 1; t < frames_; ++t) {
      const double phi =
          log_add(s.r_b[t - 1], c != s.last ? s.r_n[t - 1] : kLogZero);
      out.r_n[t] = lp(t, c) + log_add(out.r_n[t - 1], phi);
      out.r_b[t] = lp(t, Vocab::blank) + log_add(out.r_b[t - 1], out.r_n[t - 1]);
      psi = log_add(psi, phi + lp(t, c));
    }
    out.psi = psi;
    return out;
  }

  // log P(output is exactly this prefix)
  double complete(const CtcPrefixState& s) const {
    using detail::log_add;
    if (frames_ == 0) return s.last == 0 ? 0.0 : detail::kLogZero;
    return log_add(s.r_n[frames_ - 1], s.r_b[frames_ - 1]);
  }

  std::size_t frames() const { return frames_; }

 private:
  double lp(std::size_t t, std::size_t c) const { return lp_[t * classes_ + c]; }

  std::size_t frames_, classes_;
  std::vector<double> lp_;
};

// log P(CTC output begins with `prefix`); -inf for impossible prefixes.
inline double ctc_prefix_score(const TokenSequence& prefix, const CtcPosterior& p) {
  CtcPrefixScorer scorer(p);
  CtcPrefixState s = scorer.initial();
  for (std::size_t c : prefix) s = scorer.extend(s, c);
  return s.psi;
}

// log P(CTC output equals `prefix`)
inline double ctc_complete_score(const TokenSequence& prefix, const CtcPosterior& p) {
  CtcPrefixScorer scorer(p);
  CtcPrefixState s = scorer.initial();
  for (std::size_t c : prefix) s = scorer.extend(s, c);
  return scorer.complete(s);
}

// ---------------------------------------------------------------------------
// Label-synchronous beam search with CTC prefix fusion and external-LM
// shallow fusion.
// ---------------------------------------------------------------------------

struct BeamHypothesis {
  TokenSequence tokens;  // body tokens (no <sos>/<eos>)
  double decoder_score = 0.0;
  double ctc_prefix_score = 0.0;
  double lm_score = 0.0;
  double combined = 0.0;
  bool finished = false;
};

struct DecodeResult {
  std::vector<BeamHypothesis> nbest;  // best first
  std::size_t attention_key_reads = 0;
  const BeamHypothesis& best() const {
    if (nbest.empty()) throw std::runtime_error("beam_search: no finished hypothesis");
    return nbest.front();
  }
};

namespace detail {

inline bool hyp_better(const BeamHypothesis& a, const BeamHypothesis& b) {
  if (a.combined != b.combined) return a.combined > b.combined;
  return a.tokens < b.tokens;  // deterministic lexicographic tie-break
}

struct LiveHyp {
  BeamHypothesis hyp;
  DecoderState dec;
  Tensor dec_row;  // next-token log-distribution
  DecoderState lm;
  Tensor lm_row;
  CtcPrefixState ctc;
};

}  // namespace detail

// Expands hypotheses token-synchronously; a hypothesis finishes on <eos>.
// Returns the n-best finished hypotheses by combined score.
inline DecodeResult beam_search(const DecoderModel& dec, const PromptSequence& prompt,
                                const CtcPosterior& posterior, const DecoderModel* lm,
                                const FusionWeights& w) {
  w.validate();
  NoGradGuard ng;
  const Vocab& vocab = dec.cfg.vocab;
  const std::size_t n_cls = vocab.n_out_classes();
  const std::size_t eos_cls = vocab.out_class_of(vocab.eos());
  const std::size_t cap =
      w.max_len > 0 ? w.max_len : 2 * (prompt.length() + 5);
  CtcPrefixScorer ctc_scorer(posterior);

  DecodeResult result;
  std::vector<detail::LiveHyp> active;
  {
    detail::LiveHyp init{BeamHypothesis{}, DecoderState(dec), Tensor(),
                         DecoderState(lm ? *lm : dec), Tensor(), ctc_scorer.initial()};
    init.dec_row = init.dec.prime_asr(prompt);
    if (lm) init.lm_row = init.lm.step_token(lm->cfg.vocab.sos());
    result.attention_key_reads += init.dec.key_reads;
    active.push_back(std::move(init));
  }
  std::vector<BeamHypothesis> finished;

  // Zero-weight terms are dropped outright so a -inf CTC score cannot
  // poison an unfused decode.
  auto combine = [&](const BeamHypothesis& h) {
    double s = h.decoder_score + w.length_penalty * double(h.tokens.size());
    if (w.ctc_weight > 0.0) s += w.ctc_weight * h.ctc_prefix_score;
    if (w.lm_weight > 0.0) s += w.lm_weight * h.lm_score;
    return s;
  };

  for (std::size_t step = 0; step <= cap && !active.empty(); ++step) {
    struct Candidate {
      BeamHypothesis hyp;
      std::size_t parent;
      std::size_t token;  // 0 when finished via <eos>
      CtcPrefixState ctc;
    };
    std::vector<Candidate> cands;
    for (std::size_t p = 0; p < active.size(); ++p) {
      const detail::LiveHyp& live = active[p];
      for (std::size_t cls = 0; cls < n_cls; ++cls) {
        BeamHypothesis h = live.hyp;
        h.decoder_score += live.dec_row.at(0, cls);
        if (lm) h.lm_score += live.lm_row.at(0, cls);
        if (cls == eos_cls) {
          h.ctc_prefix_score = ctc_scorer.complete(live.ctc);
          h.finished = true;
          h.combined = combine(h);
          if (std::isfinite(h.combined)) finished.push_back(h);
          continue;
        }
        if (h.tokens.size() + 1 > cap) continue;
        const std::size_t tok = vocab.token_of_class(cls);
        CtcPrefixState cs = ctc_scorer.extend(live.ctc, tok);
        h.tokens.push_back(tok);
        h.ctc_prefix_score = cs.psi;
        h.combined = combine(h);
        if (w.ctc_weight > 0.0 && !std::isfinite(h.combined)) continue;
        cands.push_back({std::move(h), p, tok, std::move(cs)});
      }
    }
    const std::size_t keep = std::min<std::size_t>(w.beam, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + std::ptrdiff_t(keep), cands.end(),
                      [](const Candidate& a, const Candidate& b) {
                        return detail::hyp_better(a.hyp, b.hyp);
                      });
    cands.resize(keep);
    std::vector<detail::LiveHyp> next;
    next.reserve(keep);
    for (Candidate& c : cands) {
      detail::LiveHyp live{std::move(c.hyp), active[c.parent].dec.fork(), Tensor(),
                           active[c.parent].lm.fork(), Tensor(), std::move(c.ctc)};
      live.dec.key_reads = 0;
      live.dec_row = live.dec.step_token(c.token);
      result.attention_key_reads += live.dec.key_reads;
      if (lm) live.lm_row = live.lm.step_token(c.token);
      next.push_back(std::move(live));
    }
    active = std::move(next);
  }
  std::sort(finished.begin(), finished.end(), detail::hyp_better);
  if (finished.size() > w.nbest) finished.resize(w.nbest);
  result.nbest = std::move(finished);
  return result;
}

// Greedy (beam 1, unfused) decode that also reports attention key reads.
inline std::pair<TokenSequence, std::size_t> greedy_decode(const DecoderModel& dec,
                                                           const PromptSequence& prompt,
                                                           std::size_t max_len) {
  NoGradGuard ng;
  const Vocab& vocab = dec.cfg.vocab;
  DecoderState state(dec);
  Tensor row = state.prime_asr(prompt);
  TokenSequence out;
  for (std::size_t i = 0; i < max_len; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < vocab.n_out_classes(); ++c)
      if (row.at(0, c) > row.at(0, best)) best = c;
    const std::size_t tok = vocab.token_of_class(best);
    if (tok == vocab.eos()) break;
    out.push_back(tok);
    row = state.step_token(tok);
  }
  return {out, state.key_reads};
}

// ---------------------------------------------------------------------------
// WER
// ---------------------------------------------------------------------------

struct EditCounts {
  std::size_t subs = 0, dels = 0, ins = 0, ref_len = 0;
  double wer_percent() const {
    if (ref_len == 0) throw std::invalid_argument("wer: empty reference set");
    return 100.0 * double(subs + dels + ins) / double(ref_len);
  }
};

inline std::vector<std::string> split_words(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

inline EditCounts edit_counts(const std::vector<std::string>& ref,
                              const std::vector<std::string>& hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  // DP over (cost, subs, dels, ins); unit costs
  struct Cell {
    std::size_t cost, s, d, i;
  };
  std::vector<Cell> prev(m + 1), cur(m + 1);
  for (std::size_t j = 0; j <= m; ++j) prev[j] = {j, 0, 0, j};
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = {i, 0, i, 0};
    for (std::size_t j = 1; j <= m; ++j) {
      if (ref[i - 1] == hyp[j - 1]) {
        cur[j] = prev[j - 1];
      } else {
        Cell sub{prev[j - 1].cost + 1, prev[j - 1].s + 1, prev[j - 1].d, prev[j - 1].i};
        Cell del{prev[j].cost + 1, prev[j].s, prev[j].d + 1, prev[j].i};
        Cell ins{cur[j - 1].cost + 1, cur[j - 1].s, cur[j - 1].d, cur[j - 1].i + 1};
        cur[j] = sub;
        if (del.cost < cur[j].cost) cur[j] = del;
        if (ins.cost < cur[j].cost) cur[j] = ins;
      }
    }
    std::swap(prev, cur);
  }
  return {prev[m].s, prev[m].d, prev[m].i, n};
}

// Corpus WER in percent: (S + D + I) / N over whitespace words.
inline EditCounts wer_counts(const std::vector<std::string>& refs,
                             const std::vector<std::string>& hyps) {
  if (refs.size() != hyps.size())
    throw std::invalid_argument("wer: refs and hyps must align");
  EditCounts total;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    EditCounts c = edit_counts(split_words(refs[i]), split_words(hyps[i]));
    total.subs += c.subs;
    total.dels += c.dels;
    total.ins += c.ins;
    total.ref_len += c.ref_len;
  }
  return total;
}

inline double wer(const std::vector<std::string>& refs,
                  const std::vector<std::string>& hyps) {
  return wer_counts(refs, hyps).wer_percent();
}

// ---------------------------------------------------------------------------
// Decode cost profiling: compressed vs full-length prompts
// ---------------------------------------------------------------------------

struct ProfileReport {
  std::size_t compressed_key_reads = 0, uncompressed_key_reads = 0;
  double compressed_seconds = 0.0, uncompressed_seconds = 0.0;
  double mean_tau = 0.0, mean_tprime = 0.0;
  std::size_t utterances = 0;
};

// Greedy decode each utterance twice: with the CTC-compressed prompt and
// with the full encoder output as prompt; reports attention key-read counts
// and wall-clock.
inline ProfileReport profile_decode_cost(const AsrModel& model,
                                         const std::vector<PairedExample>& utts,
                                         std::size_t max_len = 64) {
  NoGradGuard ng;
  ProfileReport rep;
  double tau_sum = 0.0, tp_sum = 0.0;
  for (const auto& ex : utts) {
    EncoderOutput h = model.encoder.encode({ex.utt_id, ex.frames});
    CtcPosterior post = model.ctc.posteriors(h);
    GreedyPath path = greedy_path(post);
    PromptSequence comp = model.make_prompt(h, path);
    PromptSequence full = model.decoder.map_prompt(h.features);
    tau_sum += double(comp.length());
    tp_sum += double(h.features.dim(0));

    auto t0 = std::chrono::steady_clock::now();
    auto [hyp_c, reads_c] = greedy_decode(model.decoder, comp, max_len);
    auto t1 = std::chrono::steady_clock::now();
    auto [hyp_f, reads_f] = greedy_decode(model.decoder, full, max_len);
    auto t2 = std::chrono::steady_clock::now();
    (void)hyp_c;
    (void)hyp_f;
    rep.compressed_key_reads += reads_c;
    rep.uncompressed_key_reads += reads_f;
    rep.compressed_seconds += std::chrono::duration<double>(t1 - t0).count();
    rep.uncompressed_seconds += std::chrono::duration<double>(t2 - t1).count();
    ++rep.utterances;
  }
  if (rep.utterances) {
    rep.mean_tau = tau_sum / double(rep.utterances);
    rep.mean_tprime = tp_sum / double(rep.utterances);
  }
  return rep;
}

}  // namespace ctcprompt
