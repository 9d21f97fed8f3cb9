// Acceptance run: one PASS/FAIL line per criterion, with the measured numbers.
// Exits nonzero when any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "chunkgrad/chain_trace.hpp"
#include "chunkgrad/chunkwise.hpp"
#include "chunkgrad/combinatorics.hpp"
#include "chunkgrad/data.hpp"
#include "chunkgrad/linear_oracle.hpp"
#include "chunkgrad/optim.hpp"
#include "chunkgrad/profile.hpp"

using namespace chunkgrad;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    pass = pass && ok;
    if (!detail.empty()) detail += "; ";
    detail += what;
    if (!ok) detail += " [miss]";
  }
};

std::string num(double x) { return format_number(x); }

std::string sci(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", x);
  return buf;
}

double max_grad_diff(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t e = 0; e < a[i].size(); ++e) m = std::max(m, std::abs(a[i][e] - b[i][e]));
  }
  return m;
}

ChunkPlan plan_for(std::size_t c, std::size_t t = 0, double cap = 2.0) {
  ChunkPlan p;
  p.chunk_size = c;
  p.budget = t;
  p.compensation_cap = cap;
  return p;
}

const ModelConfig kToy{};  // L=4, d=64, H=4, vocab 256

// Criteria 1 and 4 share the same instrumented runs.
struct ExactnessRun {
  std::size_t c = 0;
  double max_diff = 0.0;
  double seconds = 0.0;
  std::uint64_t naive_flops = 0;
  std::uint64_t seco_flops = 0;
};

std::vector<ExactnessRun> exactness_runs() {
  const auto params = init_params<double>(kToy, 1);
  const auto tokens = random_tokens(2, 512, kToy.vocab_size);
  const std::span<const Token> seq(tokens);
  std::vector<ExactnessRun> out;
  for (std::size_t c : {32, 64, 128}) {
    const auto t0 = Clock::now();
    const auto naive = instrument([&](const StepOptions& o) { return naive_step(params, seq, o); });
    const auto seco = instrument([&](const StepOptions& o) { return seco_step(params, seq, plan_for(c), o); });
    ExactnessRun r;
    r.c = c;
    r.seconds = seconds_since(t0);
    r.max_diff = max_grad_diff(naive.result.grads, seco.result.grads);
    r.naive_flops = naive.flops.total();
    r.seco_flops = seco.flops.total();
    out.push_back(r);
  }
  return out;
}

Verdict criterion1(const std::vector<ExactnessRun>& runs) {
  Verdict v;
  for (const auto& r : runs) {
    v.require(r.max_diff <= 1e-10 && r.seconds < 60.0,
              "c=" + std::to_string(r.c) + " max|dg|=" + sci(r.max_diff) + " in " + sci(r.seconds) + "s");
  }
  return v;
}

Verdict criterion2() {
  const auto params = init_params<double>(kToy, 3);
  const auto tokens = random_tokens(4, 512, kToy.vocab_size);
  const std::span<const Token> seq(tokens);
  const double whole = sequence_loss(params, seq);
  std::mt19937_64 rng(5);
  double worst = 0.0;
  std::size_t min_k = tokens.size(), max_k = 0;
  for (int trial = 0; trial < 20; ++trial) {
    // random cut points, so chunk lengths vary within one chunking
    std::uniform_int_distribution<std::size_t> count(1, 40);
    std::vector<std::size_t> cuts;
    std::vector<std::size_t> positions(tokens.size() - 1);
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i + 1;
    std::sample(positions.begin(), positions.end(), std::back_inserter(cuts), count(rng), rng);
    cuts.push_back(tokens.size());

    Tape<double> tape(Mode::inference);
    CacheStore<double> store;
    double sum = 0.0;
    std::size_t begin = 0;
    for (std::size_t end : cuts) {
      std::optional<Token> next;
      if (end < tokens.size()) next = tokens[end];
      auto r = forward_chunk(tape, params, seq.subspan(begin, end - begin), next, store,
                             static_cast<double>(tokens.size() - 1));
      sum += r.loss.item();
      store.append(std::move(r.cache));
      begin = end;
    }
    worst = std::max(worst, std::abs(sum - whole));
    min_k = std::min(min_k, cuts.size());
    max_k = std::max(max_k, cuts.size());
  }
  Verdict v;
  v.require(worst <= 1e-12, "20 chunkings with " + std::to_string(min_k) + ".." + std::to_string(max_k) +
                                " chunks, max|sum J_j - J|=" + sci(worst));
  return v;
}

Verdict criterion3() {
  const auto params = init_params<float>(kToy, 1);
  std::size_t peak[2] = {0, 0};
  std::size_t kv[2] = {0, 0};
  const std::size_t lens[2] = {512, 4096};
  for (int i = 0; i < 2; ++i) {
    const auto tokens = random_tokens(6 + i, lens[i], kToy.vocab_size);
    const auto r = instrument(
        [&](const StepOptions& o) { return seco_step(params, std::span<const Token>(tokens), plan_for(128), o); });
    peak[i] = r.memory.peak_activation_bytes();
    kv[i] = r.memory.kv_cache_bytes();
  }
  const double rel = std::abs(static_cast<double>(peak[1]) - static_cast<double>(peak[0])) / static_cast<double>(peak[0]);
  const std::size_t slope = 2 * kToy.layers * kToy.d_model * sizeof(float);
  Verdict v;
  v.require(rel <= 0.01, "float32 c=128 peak act " + std::to_string(peak[0]) + " B @512 vs " + std::to_string(peak[1]) +
                             " B @4096 (rel " + sci(rel) + ")");
  v.require(kv[0] == 512 * slope && kv[1] == 4096 * slope && (kv[1] - kv[0]) == (4096 - 512) * slope,
            "kv " + std::to_string(kv[0]) + " -> " + std::to_string(kv[1]) + " B, slope " +
                std::to_string((kv[1] - kv[0]) / (4096 - 512)) + " B/token (expected " + std::to_string(slope) + ")");
  return v;
}

Verdict criterion4(const std::vector<ExactnessRun>& runs) {
  Verdict v;
  for (const auto& r : runs) {
    if (r.c < 64) continue;
    const double ratio = static_cast<double>(r.seco_flops) / static_cast<double>(r.naive_flops);
    v.require(ratio >= 1.30 && ratio <= 1.37, "c=" + std::to_string(r.c) + " seq 512 ratio " + num(ratio));
  }
  return v;
}

Verdict criterion5() {
  Verdict v;
  const auto params = init_params<double>(kToy, 1);
  {
    const auto tokens = random_tokens(8, 512, kToy.vocab_size);
    const std::span<const Token> seq(tokens);
    const auto seco = seco_step(params, seq, plan_for(64));
    std::mt19937_64 rng(1);
    const auto spaco = spaco_step(params, seq, plan_for(64, 8), rng);
    v.require(seco.grads == spaco.grads, "t=k=8 float64 grads bit-identical to SeCO");
  }
  std::vector<std::uint64_t> bwd;
  std::vector<std::uint64_t> other;
  for (std::size_t k : {8, 16, 32}) {
    const auto tokens = random_tokens(9, 64 * k, kToy.vocab_size);
    std::mt19937_64 rng(11);
    const auto r = instrument([&](const StepOptions& o) {
      return spaco_step(params, std::span<const Token>(tokens), plan_for(64, 8), rng, o);
    });
    bwd.push_back(r.flops.backward() + r.flops.recompute());
    std::uint64_t rest = 0;
    for (std::size_t f = 0; f < kOpKindCount; ++f) {
      if (static_cast<OpKind>(f) != OpKind::attention) rest += r.flops.family(static_cast<OpKind>(f)).backward;
    }
    other.push_back(rest);
  }
  double spread = 0.0;
  for (auto b : bwd) {
    spread = std::max(spread, std::abs(static_cast<double>(b) / static_cast<double>(bwd[0]) - 1.0));
  }
  v.require(spread <= 0.01, "t=8 bwd FLOPs k=8/16/32: " + std::to_string(bwd[0]) + "/" + std::to_string(bwd[1]) + "/" +
                                std::to_string(bwd[2]) + " (max dev " + sci(spread) +
                                "); non-attention bwd " + std::to_string(other[0]) + "/" + std::to_string(other[1]) +
                                "/" + std::to_string(other[2]) + ", attention reads the whole prefix");
  return v;
}

Verdict criterion6() {
  Verdict v;
  for (std::size_t L : {1, 2, 4}) {
    ModelConfig cfg = kToy;
    cfg.layers = L;
    const auto params = init_params<double>(cfg, 2);
    const auto tokens = random_tokens(3, 256, cfg.vocab_size);
    const auto trace = trace_seco_chains(params, std::span<const Token>(tokens), 32);
    const auto longest = longest_cache_chain(trace);
    v.require(longest == L, "L=" + std::to_string(L) + " longest=" + std::to_string(longest));
  }
  return v;
}

Verdict criterion7() {
  bool paths_ok = true;
  for (std::size_t n = 1; n <= 8; ++n) {
    const auto dag = Dag::complete(n);
    for (std::size_t p = 0; p < n; ++p) paths_ok = paths_ok && enumerate_paths(dag, p) == path_count(n, p);
  }
  const auto ratio = path_ratio(6, 4, 1);
  bool survival_ok = true;
  for (std::size_t k = 1; k <= 10; ++k) {
    for (std::size_t p = 0; p < k; ++p) {
      survival_ok = survival_ok && survival_probability(k, k, p, SurvivalModel::independent) == 1 &&
                    survival_probability(k, k, p, SurvivalModel::exact) == 1;
    }
  }
  Verdict v;
  v.require(paths_ok, "path_count == enumerate_paths for n <= 8");
  v.require(ratio == Rational(5, 2), "path_ratio(6,4,1) = " + to_string(ratio));
  v.require(survival_ok, "both survival models = 1 at t = k for k <= 10");
  return v;
}

Verdict criterion8() {
  const auto spec = ChainOracleSpec::random(3, 2, 8, 2024);
  const auto e = exhaustive_spaco_expectation(spec, 4, kNoCap);
  bool orders_ok = true;
  for (const auto& o : e.orders) orders_ok = orders_ok && o.uniform && o.effective == o.exact_formula;
  const auto mc = monte_carlo_spaco(spec, 4, kNoCap, 10000, 2025);
  const auto check = compare_to_reference(mc, e.mean);
  Verdict v;
  v.require(e.cosine >= 0.99, "k=8 t=4 no cap, " + std::to_string(e.subsets) + " subsets, cosine " + num(e.cosine));
  v.require(orders_ok, "per-order effective scale == s^p C(k-p-1,t-p-1)/C(k,t) exactly (" +
                           to_string(e.orders[0].effective) + ", " + to_string(e.orders[1].effective) + ", " +
                           to_string(e.orders[2].effective) + ", " + to_string(e.orders[3].effective) + ", 0...)");
  v.require(std::abs(check.projection_z) <= 3.0, "10^4-trial MC mean vs exhaustive: z=" + sci(check.projection_z) +
                                                    " along the mean direction (max coordinate |z| " +
                                                    sci(check.max_coord_z) + ")");
  return v;
}

// Final value of an exponential moving average of the per-step loss.
double smoothed_final(const std::vector<double>& losses, double alpha = 0.1) {
  double ema = losses.front();
  for (double x : losses) ema = (1.0 - alpha) * ema + alpha * x;
  return ema;
}

Verdict criterion9() {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.d_model = 32;
  cfg.n_heads = 4;
  cfg.ffn_dim = 96;
  const std::size_t seq_len = 256;
  const std::size_t chunk = 16;  // k = 16
  const std::size_t budget = 2;  // t = k/8
  const std::size_t updates = 200;
  const std::vector<double> lrs{1e-3, 3e-3, 1e-2};
  const std::vector<std::uint64_t> seeds{1, 2, 3, 4};

  const auto t0 = Clock::now();
  auto run_mode = [&](TrainMode mode, double lr) {
    double total = 0.0;
    for (auto seed : seeds) {
      const auto corpus = synth_markov(seed, 2, 1 << 16);
      auto params = init_params<double>(cfg, seed);
      const auto tensors = params.tensors();
      std::mt19937_64 windows(trial_seed(seed, 0));
      std::mt19937_64 subsets(trial_seed(seed, 1));
      std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - seq_len);
      AdamState state;
      AdamHyper hyper;
      hyper.lr = lr;
      std::vector<double> losses;
      for (std::size_t step = 0; step < updates; ++step) {
        const std::span<const Token> window(corpus.data() + pick(windows), seq_len);
        const auto r = run_step(mode, params, window, plan_for(chunk, budget, 2.0), subsets);
        adam_update(tensors, r.grads, state, hyper);
        losses.push_back(r.loss);
      }
      total += smoothed_final(losses);
    }
    return total / static_cast<double>(seeds.size());
  };

  auto best = [&](TrainMode mode, double& lr_out) {
    double b = std::numeric_limits<double>::infinity();
    std::string all;
    for (double lr : lrs) {
      const double l = run_mode(mode, lr);
      if (!all.empty()) all += "/";
      all += sci(l);
      if (l < b) {
        b = l;
        lr_out = lr;
      }
    }
    return std::make_pair(b, all);
  };
  double lr_seco = 0.0, lr_spaco = 0.0;
  const auto [seco, seco_all] = best(TrainMode::seco, lr_seco);
  const auto [spaco, spaco_all] = best(TrainMode::spaco, lr_spaco);
  const double secs = seconds_since(t0);

  Verdict v;
  v.require(spaco - seco <= 0.1, "smoothed final loss SeCO " + sci(seco) + " (lr " + sci(lr_seco) + "; grid " +
                                     seco_all + "), SpaCO t=2/16 " + sci(spaco) + " (lr " + sci(lr_spaco) + "; grid " +
                                     spaco_all + "), gap " + sci(spaco - seco));
  v.require(secs < 600.0, "runtime " + sci(secs) + "s");
  return v;
}

}  // namespace

int main() {
  struct Entry {
    int id;
    const char* name;
    std::function<Verdict()> run;
  };
  std::vector<ExactnessRun> shared;
  auto exactness = [&]() -> const std::vector<ExactnessRun>& {
    if (shared.empty()) shared = exactness_runs();
    return shared;
  };
  const std::vector<Entry> entries{
      {1, "SeCO gradient exactness", [&] { return criterion1(exactness()); }},
      {2, "chunk-composition identity", criterion2},
      {3, "one-graph memory bound", criterion3},
      {4, "SeCO FLOP overhead", [&] { return criterion4(exactness()); }},
      {5, "SpaCO degeneracy and sparsity", criterion5},
      {6, "chain bound", criterion6},
      {7, "combinatorics", criterion7},
      {8, "compensation verification", criterion8},
      {9, "training smoke", criterion9},
  };

  int failed = 0;
  for (const auto& e : entries) {
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = e.run();
    } catch (const std::exception& ex) {
      v.pass = false;
      v.detail = std::string("exception: ") + ex.what();
    }
    if (!v.pass) ++failed;
    std::printf("%s criterion %d (%s): %s [%.1fs]\n", v.pass ? "PASS" : "FAIL", e.id, e.name, v.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(entries.size()) - failed, entries.size());
  return failed == 0 ? 0 : 1;
}
