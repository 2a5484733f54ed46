#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "ctcprompt/encoder.hpp"

using namespace ctcprompt;

namespace {

Tensor random_log_probs(std::size_t T, std::size_t C, std::mt19937_64& rng) {
  Tensor logits = Tensor::zeros({T, C});
  std::normal_distribution<double> d(0.0, 1.5);
  for (std::size_t i = 0; i < logits.size(); ++i) logits.at(i) = d(rng);
  NoGradGuard ng;
  return log_softmax(logits);
}

// Reference: enumerate every length-T label path, collapse repeats then drop
// blanks, and sum the probability of paths matching the target exactly.
double brute_force_neglog(const Tensor& lp, const TokenSequence& target) {
  const std::size_t T = lp.dim(0), C = lp.dim(1);
  double total = detail::kLogZero;
  std::vector<std::size_t> path(T, 0);
  while (true) {
    TokenSequence collapsed;
    std::size_t prev = Vocab::blank;
    for (std::size_t lab : path) {
      if (lab != Vocab::blank && lab != prev) collapsed.push_back(lab);
      prev = lab;
    }
    if (collapsed == target) {
      double logp = 0.0;
      for (std::size_t t = 0; t < T; ++t) logp += lp.at(t, path[t]);
      total = detail::log_add(total, logp);
    }
    std::size_t i = 0;
    while (i < T && ++path[i] == C) path[i++] = 0;
    if (i == T) break;
  }
  return -total;
}

}  // namespace

TEST_CASE("ctc loss matches the uniform two-frame hand computation") {
  // T=2, two labels plus blank, all mass uniform: P("a") = 3/9
  Tensor lp = Tensor::full({2, 3}, std::log(1.0 / 3.0));
  Tensor loss = ctc_loss({lp}, {1});
  CHECK(loss.value() == Catch::Approx(std::log(3.0)).margin(1e-9));
}

TEST_CASE("ctc loss agrees with exhaustive alignment enumeration") {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<std::size_t> len_dist(0, 3);
  std::uniform_int_distribution<std::size_t> lab_dist(1, 2);
  double worst = 0.0;
  int checked = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t T = 1 + trial % 5;
    Tensor lp = random_log_probs(T, 3, rng);
    TokenSequence target(len_dist(rng));
    for (auto& t : target) t = lab_dist(rng);
    std::size_t repeats = 0;
    for (std::size_t i = 1; i < target.size(); ++i)
      if (target[i] == target[i - 1]) ++repeats;
    if (T < target.size() + repeats) {
      CHECK_THROWS_AS(ctc_loss({lp}, target), CtcInfeasibleError);
      continue;
    }
    const double got = ctc_loss({lp}, target).value();
    const double want = brute_force_neglog(lp, target);
    worst = std::max(worst, std::abs(got - want) / std::max(1.0, std::abs(want)));
    ++checked;
  }
  CHECK(checked > 100);
  CHECK(worst < 1e-9);
}

TEST_CASE("ctc alignment probabilities sum to one over all targets") {
  std::mt19937_64 rng(91);
  for (std::size_t T = 1; T <= 3; ++T) {
    Tensor lp = random_log_probs(T, 3, rng);
    // every collapsed output of length <= T over labels {1,2}
    std::vector<TokenSequence> targets{{}};
    for (std::size_t len = 1; len <= T; ++len) {
      std::vector<std::size_t> idx(len, 1);
      while (true) {
        TokenSequence t(idx.begin(), idx.end());
        std::size_t repeats = 0;
        for (std::size_t i = 1; i < len; ++i)
          if (t[i] == t[i - 1]) ++repeats;
        if (T >= len + repeats) targets.push_back(t);
        std::size_t i = 0;
        while (i < len && ++idx[i] == 3) idx[i++] = 1;
        if (i == len) break;
      }
    }
    double total = 0.0;
    for (const TokenSequence& t : targets) total += std::exp(-ctc_loss({lp}, t).value());
    CHECK(total == Catch::Approx(1.0).margin(1e-9));
  }
}

TEST_CASE("ctc loss input validation") {
  Tensor lp = Tensor::full({3, 3}, std::log(1.0 / 3.0));
  CHECK_THROWS_AS(ctc_loss({lp}, {0}), std::invalid_argument);
  CHECK_THROWS_AS(ctc_loss({lp}, {3}), std::invalid_argument);
  CHECK_THROWS_AS(ctc_loss({lp}, {1, 1, 2}), CtcInfeasibleError);  // needs 4 frames
  CHECK_NOTHROW(ctc_loss({lp}, {1, 2, 1}));
  CHECK_NOTHROW(ctc_loss({lp}, {}));  // empty target is the all-blank path
}

TEST_CASE("ctc loss gradient matches finite differences through log_softmax") {
  std::mt19937_64 rng(101);
  std::normal_distribution<double> d(0.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    Tensor logits = Tensor::zeros({4, 3});
    for (std::size_t i = 0; i < logits.size(); ++i) logits.at(i) = d(rng);
    logits.set_requires_grad(true);
    TokenSequence target = trial % 2 == 0 ? TokenSequence{1, 2} : TokenSequence{2, 2};
    ctc_loss({log_softmax(logits)}, target).backward();
    const double step = 1e-6;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      NoGradGuard ng;
      const double keep = logits.at(i);
      logits.at(i) = keep + step;
      const double lp = ctc_loss({log_softmax(logits)}, target).value();
      logits.at(i) = keep - step;
      const double lm = ctc_loss({log_softmax(logits)}, target).value();
      logits.at(i) = keep;
      const double numeric = (lp - lm) / (2.0 * step);
      worst = std::max(worst,
                       std::abs(logits.grad()[i] - numeric) / std::max(1.0, std::abs(numeric)));
    }
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("greedy path takes the per-frame argmax, ties to the lowest index") {
  Tensor lp = Tensor::zeros({3, 3});
  // frame 0: clear winner 2; frame 1: exact tie blank/1 -> blank; frame 2: tie 1/2 -> 1
  lp.at(0, 0) = -3.0; lp.at(0, 1) = -2.0; lp.at(0, 2) = -0.5;
  lp.at(1, 0) = -1.0; lp.at(1, 1) = -1.0; lp.at(1, 2) = -2.0;
  lp.at(2, 0) = -4.0; lp.at(2, 1) = -0.7; lp.at(2, 2) = -0.7;
  GreedyPath p = greedy_path({lp});
  CHECK(p.labels == std::vector<std::size_t>{2, 0, 1});
}

TEST_CASE("greedy decode collapses repeats then removes blanks") {
  CHECK(ctc_greedy_decode({{1, 1, 0, 1, 2, 2, 0, 0, 2}}) == TokenSequence{1, 1, 2, 2});
  CHECK(ctc_greedy_decode({{0, 0, 0}}) == TokenSequence{});
  CHECK(ctc_greedy_decode({{}}) == TokenSequence{});
  CHECK(ctc_greedy_decode({{2, 2, 2}}) == TokenSequence{2});
}

TEST_CASE("compress_remove keeps exactly the non-blank frames") {
  std::mt19937_64 rng(5);
  Tensor h = Tensor::zeros({5, 4});
  std::normal_distribution<double> d(0.0, 1.0);
  for (std::size_t i = 0; i < h.size(); ++i) h.at(i) = d(rng);
  h.set_requires_grad(true);

  GreedyPath path{{0, 1, 1, 0, 2}};
  Tensor c = compress_remove({h}, path);
  REQUIRE(c.shape() == Shape{3, 4});
  for (std::size_t j = 0; j < 4; ++j) {
    CHECK(c.at(0, j) == h.at(1, j));
    CHECK(c.at(1, j) == h.at(2, j));
    CHECK(c.at(2, j) == h.at(4, j));
  }

  SECTION("gradient reaches kept frames only") {
    reduce_sum(c).backward();
    CHECK(h.grad()[1 * 4] == 1.0);
    CHECK(h.grad()[0] == 0.0);
    CHECK(h.grad()[3 * 4] == 0.0);
  }
  SECTION("all-blank path gives an empty prompt") {
    Tensor e = compress_remove({h}, {{0, 0, 0, 0, 0}});
    CHECK(e.dim(0) == 0);
  }
  SECTION("length mismatch rejected") {
    CHECK_THROWS_AS(compress_remove({h}, {{0, 1}}), std::invalid_argument);
  }
}

TEST_CASE("compress_average pools runs of equal labels") {
  Tensor h = Tensor::zeros({6, 2});
  for (std::size_t i = 0; i < 6; ++i) {
    h.at(i, 0) = double(i);
    h.at(i, 1) = double(10 * i);
  }
  // labels: run of 1s, blank, another 1 (new run), run of 2s
  GreedyPath path{{1, 1, 0, 1, 2, 2}};
  Tensor c = compress_average({h}, path);
  REQUIRE(c.shape() == Shape{3, 2});
  CHECK(c.at(0, 0) == Catch::Approx(0.5));   // mean of frames 0,1
  CHECK(c.at(1, 0) == Catch::Approx(3.0));   // frame 3 alone
  CHECK(c.at(2, 0) == Catch::Approx(4.5));   // mean of frames 4,5
  CHECK(c.at(0, 1) == Catch::Approx(5.0));

  CHECK(compress_average({h}, {{0, 0, 0, 0, 0, 0}}).dim(0) == 0);
  CHECK_THROWS_AS(compress_average({h}, {{1}}), std::invalid_argument);
}

TEST_CASE("compression invariants over random posteriors") {
  std::mt19937_64 rng(303);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t T = 1 + trial % 12;
    Tensor lp = random_log_probs(T, 4, rng);
    GreedyPath path = greedy_path({lp});
    Tensor h = Tensor::zeros({T, 3});
    std::size_t non_blank = 0, runs = 0, prev = Vocab::blank;
    for (std::size_t lab : path.labels) {
      if (lab != Vocab::blank) {
        ++non_blank;
        if (lab != prev) ++runs;
      }
      prev = lab;
    }
    Tensor r = compress_remove({h}, path);
    Tensor a = compress_average({h}, path);
    CHECK(r.dim(0) == non_blank);
    CHECK(a.dim(0) == runs);
    CHECK(a.dim(0) <= r.dim(0));
    CHECK(r.dim(0) <= T);
    CHECK(ctc_greedy_decode(path).size() == runs);
  }
}

TEST_CASE("downsample compressor") {
  std::mt19937_64 rng(7);
  SECTION("factor 1 is the identity") {
    PromptCompressor pc(CompressionKind::Downsample, 4, 1, rng);
    Tensor h = Tensor::full({5, 4}, 2.0);
    Tensor c = pc.downsample(h);
    CHECK(c.shape() == Shape{5, 4});
    CHECK(c.at(3, 2) == 2.0);
  }
  SECTION("factor 2 halves the frame count") {
    PromptCompressor pc(CompressionKind::Downsample, 4, 2, rng);
    Tensor h = Tensor::full({7, 4}, 1.0);
    CHECK(pc.downsample(h).shape() == Shape{3, 4});
  }
  SECTION("string round trip") {
    for (auto k : {CompressionKind::Remove, CompressionKind::Average,
                   CompressionKind::Downsample})
      CHECK(compression_from_string(to_string(k)) == k);
    CHECK_THROWS_AS(compression_from_string("mystery"), std::invalid_argument);
  }
}

TEST_CASE("encoder produces subsampled frames and ctc posteriors normalize") {
  std::mt19937_64 rng(11);
  EncoderConfig cfg{.feat_dim = 6,
                    .subsample = 2,
                    .layer = {.model_dim = 8, .heads = 2, .ff_dim = 12, .blocks = 2}};
  Encoder enc(cfg, rng);
  CtcHead head(8, 3, rng);

  Tensor frames = Tensor::zeros({9, 6});
  std::normal_distribution<double> d(0.0, 1.0);
  for (std::size_t i = 0; i < frames.size(); ++i) frames.at(i) = d(rng);

  NoGradGuard ng;
  EncoderOutput h = enc.encode({"u1", frames});
  REQUIRE(h.features.shape() == Shape{4, 8});
  CtcPosterior p = head.posteriors(h);
  REQUIRE(p.frames() == 4);
  REQUIRE(p.classes() == 3);
  for (std::size_t t = 0; t < 4; ++t) {
    double s = 0.0;
    for (std::size_t c = 0; c < 3; ++c) s += std::exp(p.log_probs.at(t, c));
    CHECK(s == Catch::Approx(1.0).margin(1e-12));
  }

  CHECK_THROWS_AS(enc.encode({"empty", Tensor::zeros({0, 6})}), std::invalid_argument);
}
