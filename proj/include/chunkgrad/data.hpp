#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "chunkgrad/kernels.hpp"

namespace chunkgrad {

// Byte-level tokens (vocab 256). max_tokens = 0 keeps the whole file.
std::vector<Token> ingest_text(const std::filesystem::path& path, std::size_t max_tokens = 0);

struct MarkovSpec {
  std::size_t alphabet = 16;  // symbols 'a', 'b', ...
  std::size_t order = 2;
  double concentration = 0.1;  // Dirichlet parameter; smaller is more predictable
};

// Order-n Markov chain over a small byte alphabet with a seeded random
// transition table. Deterministic for a fixed seed.
std::vector<Token> synth_markov(std::uint64_t seed, std::size_t order, std::size_t length,
                                const MarkovSpec& spec = {});

// Uniform tokens in [0, vocab).
std::vector<Token> random_tokens(std::uint64_t seed, std::size_t length, std::size_t vocab);

}  // namespace chunkgrad
