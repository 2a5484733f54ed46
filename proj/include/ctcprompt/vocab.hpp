#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace ctcprompt {

// Token id layout shared by the CTC head, decoder, and tokenizer.
//   0           : <blank> (CTC only; never a decoder target)
//   1 .. V      : vocabulary characters
//   V+1         : <eos>
//   V+2         : <sos>
//   V+3         : <aud>
// Decoder output classes cover V + <eos>: class c in [0, V) maps to token
// id c+1, class V maps to <eos>.
struct Vocab {
  std::size_t n_chars = 0;

  static constexpr std::size_t blank = 0;
  std::size_t eos() const { return n_chars + 1; }
  std::size_t sos() const { return n_chars + 2; }
  std::size_t aud() const { return n_chars + 3; }
  std::size_t n_embeddings() const { return n_chars + 4; }
  std::size_t n_ctc_classes() const { return n_chars + 1; }
  std::size_t n_out_classes() const { return n_chars + 1; }  // V + <eos>

  std::size_t out_class_of(std::size_t token_id) const {
    if (token_id == eos()) return n_chars;
    if (token_id >= 1 && token_id <= n_chars) return token_id - 1;
    throw std::invalid_argument("Vocab: token id " + std::to_string(token_id) +
                                " has no output class");
  }
  std::size_t token_of_class(std::size_t cls) const {
    if (cls == n_chars) return eos();
    if (cls < n_chars) return cls + 1;
    throw std::invalid_argument("Vocab: output class " + std::to_string(cls) +
                                " out of range");
  }
  bool is_char(std::size_t token_id) const {
    return token_id >= 1 && token_id <= n_chars;
  }
};

using TokenSequence = std::vector<std::size_t>;

}  // namespace ctcprompt
