#pragma once

#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "ctcprompt/layers.hpp"
#include "ctcprompt/tensor.hpp"
#include "ctcprompt/vocab.hpp"

namespace ctcprompt {

struct AudioFeatures {
  std::string utt_id;
  Tensor frames;  // [T x feat_dim]
};

struct EncoderOutput {
  Tensor features;  // [T' x model_dim]
};

struct CtcPosterior {
  Tensor log_probs;  // [T' x (V+1)], blank = column 0
  std::size_t frames() const { return log_probs.dim(0); }
  std::size_t classes() const { return log_probs.dim(1); }
};

struct GreedyPath {
  std::vector<std::size_t> labels;  // per-frame argmax, in [0, V]
};

struct EncoderConfig {
  std::size_t feat_dim = 80;
  std::size_t subsample = 4;  // N in {2, 4}
  LayerConfig layer{.model_dim = 256, .heads = 4, .ff_dim = 2048, .blocks = 12};
  bool conv_module = false;  // depthwise conv block per layer
};

struct Encoder {
  EncoderConfig cfg;
  ConvSubsampler subsampler;
  std::vector<TransformerBlock> blocks;
  LayerNorm final_ln;

  Encoder() = default;
  Encoder(const EncoderConfig& c, std::mt19937_64& rng)
      : cfg(c), subsampler(c.feat_dim, c.layer.model_dim, c.subsample, rng) {
    cfg.layer.validate();
    for (std::size_t i = 0; i < cfg.layer.blocks; ++i)
      blocks.emplace_back(cfg.layer, cfg.conv_module, rng);
    final_ln = LayerNorm(cfg.layer.model_dim);
  }

  EncoderOutput encode(const AudioFeatures& x) const {
    if (x.frames.dim(0) == 0)
      throw std::invalid_argument("encode: empty utterance " + x.utt_id);
    Tensor h = subsampler(x.frames);
    h = add(h, positional_encoding(h.dim(0), cfg.layer.model_dim));
    AttentionMask mask = AttentionMask::all(h.dim(0), h.dim(0));
    for (const TransformerBlock& b : blocks) h = b(h, mask);
    return {final_ln(h)};
  }

  void collect(const std::string& prefix, NamedParams& out) const {
    subsampler.collect(prefix + ".sub", out);
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(prefix + ".block" + std::to_string(i), out);
    final_ln.collect(prefix + ".final_ln", out);
  }
};

struct CtcHead {
  Linear proj;  // model_dim -> V+1

  CtcHead() = default;
  CtcHead(std::size_t model_dim, std::size_t n_ctc_classes, std::mt19937_64& rng)
      : proj(model_dim, n_ctc_classes, rng) {}

  CtcPosterior posteriors(const EncoderOutput& h) const {
    return {log_softmax(proj(h.features))};
  }

  void collect(const std::string& prefix, NamedParams& out) const {
    proj.collect(prefix + ".proj", out);
  }
};

struct CtcInfeasibleError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {
constexpr double kLogZero = -std::numeric_limits<double>::infinity();

inline double log_add(double a, double b) {
  if (a == kLogZero) return b;
  if (b == kLogZero) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}
inline double log_add(double a, double b, double c) { return log_add(log_add(a, b), c); }
}  // namespace detail

// -log P(target | log_probs), summed over all valid blank-augmented
// alignments (forward algorithm in log space). Differentiable w.r.t. the
// posterior via the forward-backward gradient.
inline Tensor ctc_loss(const CtcPosterior& p, const TokenSequence& target) {
  const Tensor& lp = p.log_probs;
  const std::size_t T = lp.dim(0), C = lp.dim(1);
  const std::size_t I = target.size();
  std::size_t repeats = 0;
  for (std::size_t i = 0; i < I; ++i) {
    if (target[i] == 0 || target[i] >= C)
      throw std::invalid_argument("ctc_loss: label " + std::to_string(target[i]) +
                                  " outside [1, " + std::to_string(C - 1) + "]");
    if (i > 0 && target[i] == target[i - 1]) ++repeats;
  }
  if (T < I + repeats)
    throw CtcInfeasibleError("ctc_loss: no alignment for target of length " +
                             std::to_string(I) + " (+" + std::to_string(repeats) +
                             " repeats) in " + std::to_string(T) + " frames");

  // extended label sequence: blank, y1, blank, y2, ..., yI, blank
  const std::size_t S = 2 * I + 1;
  std::vector<std::size_t> ext(S, Vocab::blank);
  for (std::size_t i = 0; i < I; ++i) ext[2 * i + 1] = target[i];

  using detail::kLogZero;
  using detail::log_add;
  const auto& v = lp.values();
  auto lpat = [&](std::size_t t, std::size_t s) { return v[t * C + ext[s]]; };

  std::vector<double> alpha(T * S, kLogZero);
  alpha[0] = lpat(0, 0);
  if (S > 1) alpha[1] = lpat(0, 1);
  for (std::size_t t = 1; t < T; ++t)
    for (std::size_t s = 0; s < S; ++s) {
      double acc = alpha[(t - 1) * S + s];
      if (s >= 1) acc = log_add(acc, alpha[(t - 1) * S + s - 1]);
      if (s >= 2 && ext[s] != Vocab::blank && ext[s] != ext[s - 2])
        acc = log_add(acc, alpha[(t - 1) * S + s - 2]);
      alpha[t * S + s] = acc == kLogZero ? kLogZero : acc + lpat(t, s);
    }
  double log_p = alpha[(T - 1) * S + S - 1];
  if (S > 1) log_p = log_add(log_p, alpha[(T - 1) * S + S - 2]);
  if (log_p == kLogZero)
    throw CtcInfeasibleError("ctc_loss: target has zero alignment probability");

  auto lpi = lp.impl();
  return ctcprompt::detail::make_node(
      "ctc_loss", {}, {-log_p}, {p.log_probs},
      [lpi, ext, alpha, log_p, T, S, C](ctcprompt::detail::TensorImpl& self) {
        if (!lpi->requires_grad) return;
        lpi->ensure_grad();
        const auto& v = lpi->values;
        auto lpat = [&](std::size_t t, std::size_t s) { return v[t * C + ext[s]]; };
        std::vector<double> beta(T * S, kLogZero);
        beta[(T - 1) * S + S - 1] = lpat(T - 1, S - 1);
        if (S > 1) beta[(T - 1) * S + S - 2] = lpat(T - 1, S - 2);
        for (std::size_t t = T - 1; t-- > 0;)
          for (std::size_t s = 0; s < S; ++s) {
            double acc = beta[(t + 1) * S + s];
            if (s + 1 < S) acc = log_add(acc, beta[(t + 1) * S + s + 1]);
            if (s + 2 < S && ext[s + 2] != Vocab::blank && ext[s + 2] != ext[s])
              acc = log_add(acc, beta[(t + 1) * S + s + 2]);
            beta[t * S + s] = acc == kLogZero ? kLogZero : acc + lpat(t, s);
          }
        const double g_out = self.grad[0];
        for (std::size_t t = 0; t < T; ++t) {
          std::vector<double> occ(C, kLogZero);
          for (std::size_t s = 0; s < S; ++s) {
            const double ab = alpha[t * S + s] + beta[t * S + s] - lpat(t, s);
            occ[ext[s]] = log_add(occ[ext[s]], ab);
          }
          for (std::size_t c = 0; c < C; ++c)
            if (occ[c] != kLogZero)
              lpi->grad[t * C + c] += g_out * (-std::exp(occ[c] - log_p));
        }
      });
}

// Per-frame argmax; exact ties resolve to the lowest class index, so blank
// wins any tie it is part of.
inline GreedyPath greedy_path(const CtcPosterior& p) {
  GreedyPath out;
  const std::size_t T = p.frames(), C = p.classes();
  out.labels.resize(T);
  for (std::size_t t = 0; t < T; ++t) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (p.log_probs.at(t, c) > p.log_probs.at(t, best)) best = c;
    out.labels[t] = best;
  }
  return out;
}

// Collapse repeats, then drop blanks (the greedy CTC baseline output).
inline TokenSequence ctc_greedy_decode(const GreedyPath& path) {
  TokenSequence out;
  std::size_t prev = Vocab::blank;
  for (std::size_t lab : path.labels) {
    if (lab != Vocab::blank && lab != prev) out.push_back(lab);
    prev = lab;
  }
  return out;
}

// Keep the frames whose greedy label is non-blank (tau may be zero).
// Selection indices are constants; gradients flow to the kept rows.
inline Tensor compress_remove(const EncoderOutput& h, const GreedyPath& path) {
  if (path.labels.size() != h.features.dim(0))
    throw std::invalid_argument("compress_remove: path length " +
                                std::to_string(path.labels.size()) +
                                " vs encoder frames " +
                                std::to_string(h.features.dim(0)));
  std::vector<std::size_t> keep;
  for (std::size_t t = 0; t < path.labels.size(); ++t)
    if (path.labels[t] != Vocab::blank) keep.push_back(t);
  if (keep.empty()) return Tensor::zeros({0, h.features.dim(1)});
  return gather_rows(h.features, keep);
}

// Mean-pool consecutive frames sharing the same non-blank label; blank runs
// are dropped and a blank separates otherwise-equal runs.
inline Tensor compress_average(const EncoderOutput& h, const GreedyPath& path) {
  if (path.labels.size() != h.features.dim(0))
    throw std::invalid_argument("compress_average: path/frames length mismatch");
  std::vector<std::vector<std::size_t>> groups;
  std::size_t prev = Vocab::blank;
  for (std::size_t t = 0; t < path.labels.size(); ++t) {
    const std::size_t lab = path.labels[t];
    if (lab != Vocab::blank) {
      if (lab == prev)
        groups.back().push_back(t);
      else
        groups.push_back({t});
    }
    prev = lab;
  }
  if (groups.empty()) return Tensor::zeros({0, h.features.dim(1)});
  return pool_rows(h.features, groups);
}

enum class CompressionKind { Remove, Average, Downsample };

inline CompressionKind compression_from_string(const std::string& s) {
  if (s == "remove") return CompressionKind::Remove;
  if (s == "average") return CompressionKind::Average;
  if (s == "downsample") return CompressionKind::Downsample;
  throw std::invalid_argument("unknown compression kind: " + s);
}

inline std::string to_string(CompressionKind k) {
  switch (k) {
    case CompressionKind::Remove: return "remove";
    case CompressionKind::Average: return "average";
    default: return "downsample";
  }
}

// Prompt compression front-end. Downsample carries a learned strided conv
// (kernel = stride = factor); remove/average are parameter-free.
struct PromptCompressor {
  CompressionKind kind = CompressionKind::Remove;
  std::size_t factor = 2;
  Linear conv;  // only for Downsample with factor > 1

  PromptCompressor() = default;
  PromptCompressor(CompressionKind k, std::size_t model_dim, std::size_t f,
                   std::mt19937_64& rng)
      : kind(k), factor(f) {
    if (kind == CompressionKind::Downsample) {
      if (factor < 1) throw std::invalid_argument("compress_downsample: factor >= 1");
      if (factor > 1) conv = Linear(factor * model_dim, model_dim, rng);
    }
  }

  Tensor compress(const EncoderOutput& h, const GreedyPath& path) const {
    switch (kind) {
      case CompressionKind::Remove: return compress_remove(h, path);
      case CompressionKind::Average: return compress_average(h, path);
      default: return downsample(h.features);
    }
  }

  Tensor downsample(const Tensor& frames) const {
    if (factor == 1) return frames;
    return conv1d_strided(frames, conv.w, conv.b, factor, factor);
  }

  void collect(const std::string& prefix, NamedParams& out) const {
    if (kind == CompressionKind::Downsample && factor > 1)
      conv.collect(prefix + ".conv", out);
  }
};

}  // namespace ctcprompt
