#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "ctcprompt/decoder.hpp"

using namespace ctcprompt;

namespace {

DecoderModel tiny_model(std::size_t n_chars, std::uint64_t seed) {
  DecoderConfig cfg;
  cfg.vocab = Vocab{n_chars};
  cfg.layer = {.model_dim = 8, .heads = 2, .ff_dim = 12, .blocks = 2};
  std::mt19937_64 rng(seed);
  return DecoderModel(cfg, rng);
}

Tensor random_frames(std::size_t t, std::size_t d, std::mt19937_64& rng) {
  Tensor x = Tensor::zeros({t, d});
  std::normal_distribution<double> dist(0.0, 1.0);
  for (std::size_t i = 0; i < x.size(); ++i) x.at(i) = dist(rng);
  return x;
}

}  // namespace

TEST_CASE("vocab token id layout") {
  Vocab v{4};
  CHECK(Vocab::blank == 0);
  CHECK(v.eos() == 5);
  CHECK(v.sos() == 6);
  CHECK(v.aud() == 7);
  CHECK(v.n_embeddings() == 8);
  CHECK(v.n_out_classes() == 5);
  for (std::size_t tok = 1; tok <= 4; ++tok)
    CHECK(v.token_of_class(v.out_class_of(tok)) == tok);
  CHECK(v.out_class_of(v.eos()) == 4);
  CHECK_THROWS_AS(v.out_class_of(0), std::invalid_argument);
  CHECK_THROWS_AS(v.out_class_of(v.sos()), std::invalid_argument);
  CHECK_THROWS_AS(v.token_of_class(5), std::invalid_argument);
}

TEST_CASE("next-token distributions normalize") {
  DecoderModel m = tiny_model(3, 1);
  std::mt19937_64 rng(2);
  PromptSequence prompt = m.map_prompt(random_frames(2, 8, rng));
  NoGradGuard ng;
  Tensor lp = m.next_token_logprobs(prompt, {m.cfg.vocab.sos(), 1, 2});
  REQUIRE(lp.shape() == Shape{1, 4});
  double s = 0.0;
  for (std::size_t c = 0; c < 4; ++c) s += std::exp(lp.at(0, c));
  CHECK(s == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("causality: later prefix tokens do not affect earlier rows") {
  DecoderModel m = tiny_model(3, 3);
  NoGradGuard ng;
  const std::size_t sos = m.cfg.vocab.sos();
  PromptSequence empty = m.map_prompt(Tensor::zeros({0, 8}));
  Tensor a = m.forward_rows(m.assemble_asr_input(empty, {sos, 1, 2, 3}));
  Tensor b = m.forward_rows(m.assemble_asr_input(empty, {sos, 1, 2, 1}));
  // rows before the changed position agree exactly
  for (std::size_t i = 0; i + 1 < a.dim(0); ++i)
    for (std::size_t c = 0; c < a.dim(1); ++c)
      CHECK(a.at(i, c) == Catch::Approx(b.at(i, c)).margin(1e-12));
  // the final row differs
  double diff = 0.0;
  const std::size_t last = a.dim(0) - 1;
  for (std::size_t c = 0; c < a.dim(1); ++c)
    diff = std::max(diff, std::abs(a.at(last, c) - b.at(last, c)));
  CHECK(diff > 1e-8);
}

TEST_CASE("the prompt changes the predicted distribution") {
  DecoderModel m = tiny_model(3, 5);
  std::mt19937_64 rng(6);
  NoGradGuard ng;
  PromptSequence p1 = m.map_prompt(random_frames(3, 8, rng));
  PromptSequence p2 = m.map_prompt(random_frames(3, 8, rng));
  Tensor a = m.next_token_logprobs(p1, {m.cfg.vocab.sos()});
  Tensor b = m.next_token_logprobs(p2, {m.cfg.vocab.sos()});
  double diff = 0.0;
  for (std::size_t c = 0; c < a.dim(1); ++c)
    diff = std::max(diff, std::abs(a.at(0, c) - b.at(0, c)));
  CHECK(diff > 1e-8);
}

TEST_CASE("map_prompt and pseudo_prompt shapes") {
  DecoderModel m = tiny_model(3, 7);
  std::mt19937_64 rng(8);
  CHECK(m.map_prompt(Tensor::zeros({0, 8})).length() == 0);
  CHECK(m.map_prompt(random_frames(4, 8, rng)).length() == 4);
  CHECK(m.pseudo_prompt({}).length() == 0);
  CHECK(m.pseudo_prompt({1, 3, 2}).length() == 3);
}

TEST_CASE("input assembly validation") {
  DecoderModel m = tiny_model(3, 9);
  PromptSequence empty = m.map_prompt(Tensor::zeros({0, 8}));
  CHECK_THROWS_AS(m.assemble_asr_input(empty, {1, 2}), std::invalid_argument);
  CHECK_THROWS_AS(m.assemble_asr_input(empty, {}), std::invalid_argument);
  CHECK_THROWS_AS(m.sequence_logprob(empty, {1, 2}), std::invalid_argument);
  CHECK_THROWS_AS(m.lm_logprobs({1}), std::invalid_argument);
}

TEST_CASE("sequence log-prob equals the sum of stepwise scores") {
  DecoderModel m = tiny_model(3, 11);
  std::mt19937_64 rng(12);
  NoGradGuard ng;
  PromptSequence prompt = m.map_prompt(random_frames(2, 8, rng));
  const Vocab& v = m.cfg.vocab;
  TokenSequence y{2, 1, 3, v.eos()};

  double stepwise = 0.0;
  TokenSequence prefix{v.sos()};
  for (std::size_t tok : y) {
    Tensor lp = m.next_token_logprobs(prompt, prefix);
    stepwise += lp.at(0, v.out_class_of(tok));
    prefix.push_back(tok);
  }
  CHECK(m.sequence_logprob(prompt, y).value() ==
        Catch::Approx(stepwise).margin(1e-9));

  // the teacher-forced NLL vector is the negated per-step scores
  Tensor nll = m.asr_token_nll(prompt, {2, 1, 3});
  REQUIRE(nll.shape() == Shape{4});
  double nll_sum = 0.0;
  for (std::size_t i = 0; i < 4; ++i) nll_sum += nll.at(i);
  CHECK(nll_sum == Catch::Approx(-stepwise).margin(1e-9));
}

TEST_CASE("lm token nll matches stepwise lm scoring") {
  DecoderModel m = tiny_model(3, 13);
  NoGradGuard ng;
  const Vocab& v = m.cfg.vocab;
  TokenSequence sentence{3, 3, 1};
  Tensor nll = m.lm_token_nll(sentence);
  REQUIRE(nll.shape() == Shape{4});

  TokenSequence prefix{v.sos()};
  TokenSequence targets = sentence;
  targets.push_back(v.eos());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    Tensor lp = m.lm_logprobs(prefix);
    CHECK(nll.at(i) == Catch::Approx(-lp.at(0, v.out_class_of(targets[i]))).margin(1e-9));
    prefix.push_back(targets[i]);
  }

  // pseudo-prompt variant has the same shape and is a proper distribution sum
  Tensor pn = m.pseudo_prompt_token_nll(sentence);
  REQUIRE(pn.shape() == Shape{4});
  for (std::size_t i = 0; i < 4; ++i) CHECK(pn.at(i) > 0.0);
}

TEST_CASE("incremental decoding equals full recompute") {
  DecoderModel m = tiny_model(4, 17);
  std::mt19937_64 rng(18);
  NoGradGuard ng;
  const Vocab& v = m.cfg.vocab;

  SECTION("asr mode with a prompt") {
    PromptSequence prompt = m.map_prompt(random_frames(3, 8, rng));
    DecoderState st(m);
    Tensor inc = st.prime_asr(prompt);
    TokenSequence prefix{v.sos()};
    TokenSequence body{2, 4, 1, 3};
    for (std::size_t tok : body) {
      Tensor full = m.next_token_logprobs(prompt, prefix);
      for (std::size_t c = 0; c < full.dim(1); ++c)
        CHECK(std::abs(inc.at(0, c) - full.at(0, c)) < 1e-9);
      inc = st.step_token(tok);
      prefix.push_back(tok);
    }
    Tensor full = m.next_token_logprobs(prompt, prefix);
    for (std::size_t c = 0; c < full.dim(1); ++c)
      CHECK(std::abs(inc.at(0, c) - full.at(0, c)) < 1e-9);
  }

  SECTION("lm mode") {
    DecoderState st(m);
    Tensor inc = st.step_token(v.sos());
    TokenSequence prefix{v.sos()};
    for (std::size_t tok : {std::size_t(1), std::size_t(1), std::size_t(4)}) {
      Tensor full = m.lm_logprobs(prefix);
      for (std::size_t c = 0; c < full.dim(1); ++c)
        CHECK(std::abs(inc.at(0, c) - full.at(0, c)) < 1e-9);
      inc = st.step_token(tok);
      prefix.push_back(tok);
    }
  }
}

TEST_CASE("forked states evolve independently") {
  DecoderModel m = tiny_model(3, 19);
  std::mt19937_64 rng(20);
  NoGradGuard ng;
  const Vocab& v = m.cfg.vocab;
  PromptSequence prompt = m.map_prompt(random_frames(2, 8, rng));

  DecoderState a(m);
  a.prime_asr(prompt);
  DecoderState b = a.fork();
  Tensor out_a = a.step_token(1);
  Tensor out_b = b.step_token(2);

  Tensor full_a = m.next_token_logprobs(prompt, {v.sos(), 1});
  Tensor full_b = m.next_token_logprobs(prompt, {v.sos(), 2});
  for (std::size_t c = 0; c < full_a.dim(1); ++c) {
    CHECK(std::abs(out_a.at(0, c) - full_a.at(0, c)) < 1e-9);
    CHECK(std::abs(out_b.at(0, c) - full_b.at(0, c)) < 1e-9);
  }
}

TEST_CASE("key read accounting is quadratic in consumed length") {
  DecoderModel m = tiny_model(3, 21);
  std::mt19937_64 rng(22);
  NoGradGuard ng;
  const std::size_t tau = 3;
  PromptSequence prompt = m.map_prompt(random_frames(tau, 8, rng));
  DecoderState st(m);
  st.prime_asr(prompt);
  const std::size_t primed = 2 + tau;  // <aud>, prompt, <sos>
  CHECK(st.len == primed);
  CHECK(st.key_reads == m.blocks.size() * primed * (primed + 1) / 2);
  st.step_token(1);
  CHECK(st.key_reads == m.blocks.size() * (primed + 1) * (primed + 2) / 2);
}

TEST_CASE("a tiny lm overfits one sentence") {
  DecoderModel m = tiny_model(2, 23);
  NamedParams params;
  m.collect("dec", params);
  TokenSequence sentence{1, 2, 1};

  auto mean_nll = [&] {
    Tensor nll = m.lm_token_nll(sentence);
    return scale(reduce_sum(reshape(nll, {nll.size(), 1})), 1.0 / double(nll.size()));
  };

  double initial;
  {
    NoGradGuard ng;
    initial = mean_nll().value();
  }
  // untrained head is near-uniform over V+1 = 3 classes
  CHECK(std::abs(initial - std::log(3.0)) < 0.5);

  for (int step = 0; step < 400; ++step) {
    for (auto& [n, p] : params) p.zero_grad();
    mean_nll().backward();
    for (auto& [n, p] : params)
      for (std::size_t i = 0; i < p.size(); ++i) p.at(i) -= 0.05 * p.grad()[i];
  }
  NoGradGuard ng;
  const double trained = mean_nll().value();
  CHECK(trained < 0.1);
  CHECK(trained < initial);
}
