#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ctcprompt/tensor.hpp"

namespace ctcprompt {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

struct LayerConfig {
  std::size_t model_dim = 256;
  std::size_t heads = 4;
  std::size_t ff_dim = 2048;
  std::size_t blocks = 6;
  double dropout_rate = 0.0;  // kept at 0 for deterministic runs

  void validate() const {
    if (model_dim == 0 || heads == 0 || ff_dim == 0 || blocks == 0)
      throw std::invalid_argument("LayerConfig: dimensions must be positive");
    if (model_dim % heads != 0)
      throw std::invalid_argument("LayerConfig: model_dim " + std::to_string(model_dim) +
                                  " not divisible by heads " + std::to_string(heads));
  }
};

inline Tensor init_gaussian(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  Tensor t = Tensor::zeros(shape);
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(double(std::max<std::size_t>(fan_in, 1))));
  for (std::size_t i = 0; i < t.size(); ++i) t.at(i) = dist(rng);
  t.set_requires_grad(true);
  return t;
}

inline Tensor init_const(Shape shape, double v) {
  Tensor t = Tensor::full(shape, v);
  t.set_requires_grad(true);
  return t;
}

// true = attend allowed
struct AttentionMask {
  std::size_t q_len = 0, k_len = 0;
  std::vector<std::uint8_t> allow;

  static AttentionMask all(std::size_t q, std::size_t k) {
    return {q, k, std::vector<std::uint8_t>(q * k, 1)};
  }
  static AttentionMask causal(std::size_t n) {
    AttentionMask m{n, n, std::vector<std::uint8_t>(n * n, 0)};
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j) m.allow[i * n + j] = 1;
    return m;
  }
  bool at(std::size_t i, std::size_t j) const { return allow[i * k_len + j] != 0; }
};

struct Linear {
  Tensor w;  // [in x out]
  Tensor b;  // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, std::mt19937_64& rng)
      : w(init_gaussian({in, out}, in, rng)), b(init_const({out}, 0.0)) {}

  Tensor operator()(const Tensor& x) const { return add(matmul(x, w), b); }

  void collect(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".w", w);
    out.emplace_back(prefix + ".b", b);
  }
};

struct LayerNorm {
  Tensor gamma, beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t d)
      : gamma(init_const({d}, 1.0)), beta(init_const({d}, 0.0)) {}

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }

  void collect(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }
};

// Masked positions get a -1e30 score, which underflows to exactly zero
// attention weight after softmax.
struct MultiHeadAttention {
  std::size_t heads = 1;
  std::size_t head_dim = 0;
  Linear wq, wk, wv, wo;

  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t model_dim, std::size_t n_heads, std::mt19937_64& rng)
      : heads(n_heads),
        head_dim(model_dim / n_heads),
        wq(model_dim, model_dim, rng),
        wk(model_dim, model_dim, rng),
        wv(model_dim, model_dim, rng),
        wo(model_dim, model_dim, rng) {
    if (model_dim % n_heads != 0)
      throw std::invalid_argument("MultiHeadAttention: model_dim not divisible by heads");
  }

  Tensor operator()(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in,
                    const AttentionMask& mask) const {
    if (q_in.dim(1) != k_in.dim(1) || k_in.dim(1) != v_in.dim(1))
      throw std::invalid_argument("multi_head_attention: model_dim mismatch");
    if (mask.q_len != q_in.dim(0) || mask.k_len != k_in.dim(0))
      throw std::invalid_argument("multi_head_attention: mask dims " +
                                  std::to_string(mask.q_len) + "x" +
                                  std::to_string(mask.k_len) + " do not match inputs");
    Tensor q = wq(q_in), k = wk(k_in), v = wv(v_in);
    std::vector<std::uint8_t> keep(mask.q_len * mask.k_len);
    for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = mask.allow[i];
    std::vector<Tensor> head_outs;
    for (std::size_t h = 0; h < heads; ++h) {
      Tensor qh = slice(q, 0, q.dim(0), h * head_dim, (h + 1) * head_dim);
      Tensor kh = slice(k, 0, k.dim(0), h * head_dim, (h + 1) * head_dim);
      Tensor vh = slice(v, 0, v.dim(0), h * head_dim, (h + 1) * head_dim);
      Tensor scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(double(head_dim)));
      Tensor weights = softmax(masked_fill(scores, keep, -1e30));
      head_outs.push_back(matmul(weights, vh));
    }
    Tensor merged = head_outs.size() == 1 ? head_outs[0] : concat_cols(head_outs);
    return wo(merged);
  }

  // Single-row query against externally cached projected K/V ([L x model_dim]).
  Tensor attend_cached(const Tensor& q_row, const Tensor& k_cache,
                       const Tensor& v_cache) const {
    Tensor q = wq(q_row);
    std::vector<Tensor> head_outs;
    for (std::size_t h = 0; h < heads; ++h) {
      Tensor qh = slice(q, 0, 1, h * head_dim, (h + 1) * head_dim);
      Tensor kh = slice(k_cache, 0, k_cache.dim(0), h * head_dim, (h + 1) * head_dim);
      Tensor vh = slice(v_cache, 0, v_cache.dim(0), h * head_dim, (h + 1) * head_dim);
      Tensor scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(double(head_dim)));
      head_outs.push_back(matmul(softmax(scores), vh));
    }
    Tensor merged = head_outs.size() == 1 ? head_outs[0] : concat_cols(head_outs);
    return wo(merged);
  }

  void collect(const std::string& prefix, NamedParams& out) const {
    wq.collect(prefix + ".wq", out);
    wk.collect(prefix + ".wk", out);
    wv.collect(prefix + ".wv", out);
    wo.collect(prefix + ".wo", out);
  }

 private:
  static Tensor concat_cols(const std::vector<Tensor>& parts) {
    // column concat via transpose of row concat
    std::vector<Tensor> tr;
    tr.reserve(parts.size());
    for (const Tensor& p : parts) tr.push_back(transpose(p));
    return transpose(concat(tr));
  }
};

struct FeedForward {
  Linear in, out;

  FeedForward() = default;
  FeedForward(std::size_t model_dim, std::size_t ff_dim, std::mt19937_64& rng)
      : in(model_dim, ff_dim, rng), out(ff_dim, model_dim, rng) {}

  Tensor operator()(const Tensor& x) const { return out(relu(in(x))); }

  void collect(const std::string& prefix, NamedParams& out_params) const {
    in.collect(prefix + ".in", out_params);
    out.collect(prefix + ".out", out_params);
  }
};

// Pre-layer-norm transformer block, optionally with a depthwise conv module
// between attention and feed-forward.
struct TransformerBlock {
  LayerNorm ln1, ln2;
  MultiHeadAttention attn;
  FeedForward ff;
  bool use_conv = false;
  LayerNorm ln_conv;
  Tensor conv_w, conv_b;  // depthwise kernel 3

  TransformerBlock() = default;
  TransformerBlock(const LayerConfig& cfg, bool conv_module, std::mt19937_64& rng)
      : ln1(cfg.model_dim),
        ln2(cfg.model_dim),
        attn(cfg.model_dim, cfg.heads, rng),
        ff(cfg.model_dim, cfg.ff_dim, rng),
        use_conv(conv_module) {
    if (use_conv) {
      ln_conv = LayerNorm(cfg.model_dim);
      conv_w = init_gaussian({3, cfg.model_dim}, 3, rng);
      conv_b = init_const({cfg.model_dim}, 0.0);
    }
  }

  Tensor operator()(const Tensor& x, const AttentionMask& mask) const {
    Tensor h = ln1(x);
    Tensor y = add(x, attn(h, h, h, mask));
    if (use_conv)
      y = add(y, depthwise_conv_same(ln_conv(y), conv_w, conv_b));
    return add(y, ff(ln2(y)));
  }

  void collect(const std::string& prefix, NamedParams& out) const {
    ln1.collect(prefix + ".ln1", out);
    ln2.collect(prefix + ".ln2", out);
    attn.collect(prefix + ".attn", out);
    ff.collect(prefix + ".ff", out);
    if (use_conv) {
      ln_conv.collect(prefix + ".ln_conv", out);
      out.emplace_back(prefix + ".conv_w", conv_w);
      out.emplace_back(prefix + ".conv_b", conv_b);
    }
  }
};

// Sinusoidal encoding: row t, col 2i = sin(t/10000^{2i/d}), col 2i+1 = cos(...).
inline Tensor positional_encoding(std::size_t length, std::size_t model_dim) {
  Tensor pe = Tensor::zeros({length, model_dim});
  for (std::size_t t = 0; t < length; ++t)
    for (std::size_t i = 0; i < model_dim; ++i) {
      const double angle =
          double(t) / std::pow(10000.0, double(2 * (i / 2)) / double(model_dim));
      pe.at(t, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  return pe;
}

inline Tensor positional_encoding_row(std::size_t t, std::size_t model_dim) {
  Tensor pe = Tensor::zeros({1, model_dim});
  for (std::size_t i = 0; i < model_dim; ++i) {
    const double angle =
        double(t) / std::pow(10000.0, double(2 * (i / 2)) / double(model_dim));
    pe.at(0, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
  }
  return pe;
}

// Strided convolutional subsampler: rate 2 = one kernel-2 stride-2 conv,
// rate 4 = two stacked, each followed by relu. Output length is floor(T/N).
struct ConvSubsampler {
  std::size_t rate = 4;
  std::vector<Linear> convs;  // weight [(2*cin) x cout] per stage

  ConvSubsampler() = default;
  ConvSubsampler(std::size_t feat_dim, std::size_t model_dim, std::size_t n,
                 std::mt19937_64& rng)
      : rate(n) {
    if (n != 2 && n != 4)
      throw std::invalid_argument("conv_subsample: rate must be 2 or 4, got " +
                                  std::to_string(n));
    const std::size_t stages = (n == 2) ? 1 : 2;
    std::size_t cin = feat_dim;
    for (std::size_t s = 0; s < stages; ++s) {
      convs.emplace_back(2 * cin, model_dim, rng);
      cin = model_dim;
    }
  }

  Tensor operator()(const Tensor& x) const {
    Tensor h = x;
    for (const Linear& c : convs)
      h = relu(conv1d_strided(h, c.w, c.b, 2, 2));
    return h;
  }

  void collect(const std::string& prefix, NamedParams& out) const {
    for (std::size_t i = 0; i < convs.size(); ++i)
      convs[i].collect(prefix + ".conv" + std::to_string(i), out);
  }
};

}  // namespace ctcprompt
