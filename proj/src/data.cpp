#include "chunkgrad/data.hpp"

#include <fstream>
#include <iterator>
#include <random>
#include <stdexcept>

namespace chunkgrad {

std::vector<Token> ingest_text(const std::filesystem::path& path, std::size_t max_tokens) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.empty()) throw std::invalid_argument(path.string() + " is empty");
  if (max_tokens != 0 && bytes.size() > max_tokens) bytes.resize(max_tokens);
  std::vector<Token> tokens(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) tokens[i] = static_cast<unsigned char>(bytes[i]);
  return tokens;
}

std::vector<Token> synth_markov(std::uint64_t seed, std::size_t order, std::size_t length, const MarkovSpec& spec) {
  if (spec.alphabet < 2 || spec.alphabet > 26) throw std::invalid_argument("markov alphabet must be in [2, 26]");
  if (order == 0 || order > 4) throw std::invalid_argument("markov order must be in [1, 4]");
  if (!(spec.concentration > 0.0)) throw std::invalid_argument("markov concentration must be positive");

  std::mt19937_64 rng(seed);
  std::size_t contexts = 1;
  for (std::size_t i = 0; i < order; ++i) contexts *= spec.alphabet;

  std::gamma_distribution<double> gamma(spec.concentration, 1.0);
  std::vector<std::discrete_distribution<std::size_t>> next;
  next.reserve(contexts);
  std::vector<double> w(spec.alphabet);
  for (std::size_t c = 0; c < contexts; ++c) {
    for (auto& x : w) x = gamma(rng) + 1e-12;
    next.emplace_back(w.begin(), w.end());
  }

  std::uniform_int_distribution<std::size_t> uniform(0, spec.alphabet - 1);
  std::vector<std::size_t> symbols;
  symbols.reserve(length);
  for (std::size_t i = 0; i < length; ++i) {
    if (i < order) {
      symbols.push_back(uniform(rng));
      continue;
    }
    std::size_t ctx = 0;
    for (std::size_t back = order; back > 0; --back) ctx = ctx * spec.alphabet + symbols[i - back];
    symbols.push_back(next[ctx](rng));
  }
  std::vector<Token> tokens(length);
  for (std::size_t i = 0; i < length; ++i) tokens[i] = static_cast<Token>('a' + symbols[i]);
  return tokens;
}

std::vector<Token> random_tokens(std::uint64_t seed, std::size_t length, std::size_t vocab) {
  if (vocab == 0) throw std::invalid_argument("vocab must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Token> dist(0, static_cast<Token>(vocab - 1));
  std::vector<Token> out(length);
  for (auto& t : out) t = dist(rng);
  return out;
}

}  // namespace chunkgrad
