#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "chunkgrad/checkpoint_io.hpp"
#include "chunkgrad/chunkwise.hpp"
#include "chunkgrad/data.hpp"
#include "chunkgrad/model.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace chunkgrad;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.layers = 1;
  c.d_model = 8;
  c.n_heads = 2;
  c.vocab_size = 16;
  c.ffn_dim = 16;
  return c;
}

std::vector<double> chunk_losses(const Params<double>& p, std::span<const Token> tokens, std::size_t c) {
  Tape<double> tape(Mode::inference);
  CacheStore<double> store;
  std::vector<double> out;
  for (std::size_t b = 0; b < tokens.size(); b += c) {
    const std::size_t len = std::min(c, tokens.size() - b);
    std::optional<Token> next;
    if (b + len < tokens.size()) next = tokens[b + len];
    auto r = forward_chunk(tape, p, tokens.subspan(b, len), next, store, static_cast<double>(tokens.size() - 1));
    out.push_back(r.loss.item());
    store.append(std::move(r.cache));
  }
  return out;
}

std::filesystem::path scratch_dir() {
  auto dir = std::filesystem::temp_directory_path() / "chunkgrad_test_model";
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("init is deterministic per seed") {
  const auto cfg = testing::small_config();
  const auto a = init_params<double>(cfg, 5);
  const auto b = init_params<double>(cfg, 5);
  const auto c = init_params<double>(cfg, 6);
  CHECK(testing::flatten_params(a) == testing::flatten_params(b));
  CHECK(testing::flatten_params(a) != testing::flatten_params(c));
  CHECK(a.numel() == testing::flatten_params(a).size());
}

TEST_CASE("config validation") {
  auto cfg = testing::small_config();
  CHECK_NOTHROW(cfg.validate());
  cfg.n_heads = 3;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = testing::small_config();
  cfg.d_model = 6;
  cfg.n_heads = 2;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = testing::small_config();
  cfg.layers = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("loss at init is near ln(vocab)") {
  ModelConfig cfg;
  const auto p = init_params<double>(cfg, 1);
  const auto tokens = random_tokens(2, 128, cfg.vocab_size);
  const double loss = sequence_loss(p, std::span<const Token>(tokens));
  CHECK(std::abs(loss - std::log(256.0)) <= 0.15 * std::log(256.0));
}

TEST_CASE("forward matches an independent loop implementation") {
  const auto cfg = testing::small_config();
  const auto p = init_params<double>(cfg, 3);
  const auto tokens = random_tokens(4, 40, cfg.vocab_size);
  const double ref = testing::reference_loss(p, tokens);
  CHECK(std::abs(sequence_loss(p, std::span<const Token>(tokens)) - ref) <= 1e-12);
  for (std::size_t c : {1, 7, 16, 40}) {
    double sum = 0.0;
    for (double x : chunk_losses(p, tokens, c)) sum += x;
    CHECK(std::abs(sum - ref) <= 1e-12);
  }
}

TEST_CASE("a single chunk equals the full-sequence forward") {
  const auto cfg = testing::small_config();
  const auto p = init_params<double>(cfg, 3);
  const auto tokens = random_tokens(5, 24, cfg.vocab_size);
  const auto one = chunk_losses(p, tokens, tokens.size());
  REQUIRE(one.size() == 1);
  CHECK(one[0] == sequence_loss(p, std::span<const Token>(tokens)));
}

TEST_CASE("inference forward returns detached checkpoint caches") {
  const auto cfg = testing::small_config();
  const auto p = init_params<double>(cfg, 3);
  const auto tokens = random_tokens(6, 8, cfg.vocab_size);
  Tape<double> tape(Mode::inference);
  auto r = forward_chunk(tape, p, std::span<const Token>(tokens), std::nullopt, CacheStore<double>{}, 7.0);
  CHECK(r.cache.origin == CacheOrigin::checkpoint);
  CHECK(r.cache.length == 8);
  CHECK(r.cache.keys.size() == cfg.layers);
  for (const auto& v : r.cache.tensors()) {
    CHECK(v.is_leaf());
    CHECK(v.requires_grad());
    CHECK(v.shape() == Shape{8, cfg.d_model});
  }
  CHECK(r.cache.bytes() == 8 * kv_bytes_per_token(cfg, sizeof(double)));
  CHECK(tape.size() == 0);

  Tape<double> rec;
  auto r2 = forward_chunk(rec, p, std::span<const Token>(tokens), std::nullopt, CacheStore<double>{}, 7.0);
  CHECK(r2.cache.origin == CacheOrigin::reconstructed);
  for (const auto& v : r2.cache.tensors()) CHECK_FALSE(v.is_leaf());
}

TEST_CASE("rebuilt caches match their checkpoints bit for bit") {
  const auto cfg = testing::small_config();
  const auto p = init_params<double>(cfg, 8);
  const auto tokens = random_tokens(9, 48, cfg.vocab_size);
  const std::span<const Token> all(tokens);
  Tape<double> inf(Mode::inference);
  std::vector<KVChunk<double>> cps;
  for (std::size_t j = 0; j < 4; ++j) {
    cps.push_back(forward_chunk(inf, p, all.subspan(j * 12, 12), std::nullopt,
                                std::span<const KVChunk<double>>(cps), 47.0)
                      .cache);
  }
  for (std::size_t j = 0; j < 4; ++j) {
    Tape<double> rec;
    auto r = forward_chunk(rec, p, all.subspan(j * 12, 12), std::nullopt,
                           std::span<const KVChunk<double>>(cps.data(), j), 47.0);
    CHECK(r.cache.position_offset == j * 12);
    const auto a = r.cache.tensors();
    const auto b = cps[j].tensors();
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(std::equal(a[i].data().begin(), a[i].data().end(), b[i].data().begin()));
    }
  }
}

TEST_CASE("token and cache errors") {
  const auto cfg = testing::small_config();
  const auto p = init_params<double>(cfg, 1);
  Tape<double> tape(Mode::inference);
  const std::vector<Token> bad{1, static_cast<Token>(cfg.vocab_size)};
  CHECK_THROWS_AS(forward_chunk(tape, p, std::span<const Token>(bad), std::nullopt, CacheStore<double>{}, 1.0),
                  std::out_of_range);
  const std::vector<Token> ok{1, 2};
  CHECK_THROWS_AS(forward_chunk(tape, p, std::span<const Token>(ok), Token{-1}, CacheStore<double>{}, 1.0),
                  std::out_of_range);
  CHECK_THROWS_AS(sequence_loss(p, std::span<const Token>(ok).first(1)), std::invalid_argument);

  auto first = forward_chunk(tape, p, std::span<const Token>(ok), std::nullopt, CacheStore<double>{}, 1.0).cache;
  auto second = first;
  second.position_offset = 3;
  CacheStore<double> store;
  store.append(first);
  CHECK_THROWS_AS(store.append(second), std::invalid_argument);
  second.position_offset = 2;
  CHECK_NOTHROW(store.append(second));
  CHECK(store.end_position() == 4);
  CHECK(store.bytes() == 4 * kv_bytes_per_token(cfg, sizeof(double)));
}

TEST_CASE("tape gradient matches central differences through the model") {
  const auto cfg = tiny_config();
  const auto p = init_params<double>(cfg, 11);
  const auto tokens = random_tokens(12, 12, cfg.vocab_size);
  const auto res = naive_step(p, std::span<const Token>(tokens));
  const auto g = testing::flatten_grads(res.grads);
  const auto theta = testing::flatten_params(p);
  REQUIRE(g.size() == theta.size());

  std::mt19937_64 rng(13);
  std::uniform_int_distribution<std::size_t> pick(0, theta.size() - 1);
  const double eps = 1e-5;
  double worst = 0.0;
  for (int n = 0; n < 60; ++n) {
    const std::size_t i = pick(rng);
    auto plus = theta;
    auto minus = theta;
    plus[i] += eps;
    minus[i] -= eps;
    const double fd = (sequence_loss(testing::params_from(p, plus), std::span<const Token>(tokens)) -
                       sequence_loss(testing::params_from(p, minus), std::span<const Token>(tokens))) /
                      (2 * eps);
    worst = std::max(worst, std::abs(fd - g[i]) / std::max(std::abs(fd), 1e-3));
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("measured activation bytes equal the analytic per-chunk bound") {
  const auto cfg = testing::small_config();
  const auto p = init_params<double>(cfg, 2);
  const auto tokens = random_tokens(3, 64, cfg.vocab_size);
  const std::span<const Token> all(tokens);
  Tape<double> inf(Mode::inference);
  std::vector<KVChunk<double>> cps;
  for (std::size_t j = 0; j < 4; ++j) {
    cps.push_back(forward_chunk(inf, p, all.subspan(j * 16, 16), std::nullopt,
                                std::span<const KVChunk<double>>(cps), 63.0)
                      .cache);
  }
  for (std::size_t j = 0; j < 4; ++j) {
    Tape<double> rec;
    forward_chunk(rec, p, all.subspan(j * 16, 16), std::nullopt, std::span<const KVChunk<double>>(cps.data(), j),
                  63.0);
    CHECK(rec.live_bytes() == activation_bytes(cfg, 16, sizeof(double)));
  }
}

TEST_CASE("checkpoint round trip") {
  const auto cfg = testing::small_config();
  const auto p = init_params<double>(cfg, 21);
  const auto path = scratch_dir() / "roundtrip.bin";
  save_checkpoint(path, p);
  const auto q = load_checkpoint<double>(path);
  CHECK(q.config == cfg);
  CHECK(testing::flatten_params(q) == testing::flatten_params(p));

  const auto f = load_checkpoint<float>(path);
  const auto pf = f.tensors();
  const auto pd = p.tensors();
  for (std::size_t i = 0; i < pd.size(); ++i) {
    for (std::size_t e = 0; e < pd[i].numel(); ++e) CHECK(pf[i].data()[e] == static_cast<float>(pd[i].data()[e]));
  }

  const auto bogus = scratch_dir() / "bogus.bin";
  std::ofstream(bogus) << "not a checkpoint";
  CHECK_THROWS_AS(load_checkpoint<double>(bogus), std::runtime_error);
  CHECK_THROWS_AS(load_checkpoint<double>(scratch_dir() / "missing.bin"), std::runtime_error);
}
