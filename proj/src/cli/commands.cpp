#include "chunkgrad/cli/commands.hpp"

#include <chrono>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <random>
#include <stdexcept>

#include "CLI11.hpp"
#include "chunkgrad/checkpoint_io.hpp"
#include "chunkgrad/combinatorics.hpp"
#include "chunkgrad/linear_oracle.hpp"
#include "chunkgrad/optim.hpp"
#include "chunkgrad/profile.hpp"

namespace chunkgrad::cli {

namespace {

// CSV goes to --out when given, otherwise to the command's stream.
class Sink {
 public:
  Sink(const std::string& path, std::ostream& fallback) : os_(&fallback) {
    if (!path.empty()) {
      file_ = std::make_unique<std::ofstream>(path);
      if (!*file_) throw std::runtime_error("cannot open " + path + " for writing");
      os_ = file_.get();
    }
  }
  std::ostream& stream() { return *os_; }
  bool to_file() const { return file_ != nullptr; }

 private:
  std::unique_ptr<std::ofstream> file_;
  std::ostream* os_;
};

std::string cap_text(double cap) { return std::isinf(cap) ? "none" : format_number(cap); }

Rational scaler_rational(std::size_t k, std::size_t t, double cap) {
  const Rational ratio(static_cast<long long>(k), static_cast<long long>(t));
  if (std::isinf(cap)) return ratio;
  const Rational c(cap);
  return ratio < c ? ratio : c;
}

Rational power(const Rational& base, std::size_t p) {
  Rational r(1);
  for (std::size_t i = 0; i < p; ++i) r *= base;
  return r;
}

std::span<const Token> first_window(const std::vector<Token>& corpus, std::size_t seq_len) {
  if (seq_len < 2) throw std::invalid_argument("seq_len must be at least 2");
  if (corpus.size() < seq_len) {
    throw std::invalid_argument("data has " + std::to_string(corpus.size()) + " tokens, fewer than one sequence of " +
                                std::to_string(seq_len));
  }
  return std::span<const Token>(corpus.data(), seq_len);
}

void require_budget(TrainMode mode, const ChunkPlan& plan) {
  if (mode == TrainMode::spaco && plan.budget == 0) {
    throw std::invalid_argument("mode spaco needs a chunk budget (--budget t)");
  }
}

template <class T>
int train_impl(const RunConfig& cfg, std::ostream& out) {
  cfg.model.validate();
  require_budget(cfg.mode, cfg.plan);
  const auto corpus = load_corpus(cfg);
  first_window(corpus, cfg.seq_len);
  cfg.plan.resolve(cfg.seq_len);

  auto params = init_params<T>(cfg.model, cfg.seed);
  const auto tensors = params.tensors();
  std::mt19937_64 windows(trial_seed(cfg.seed, 0));
  std::mt19937_64 subsets(trial_seed(cfg.seed, 1));
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - cfg.seq_len);
  AdamState adam;
  AdamHyper hyper;
  hyper.lr = cfg.lr;

  Sink sink(cfg.out, out);
  auto& os = sink.stream();
  os << "step,loss,grad_norm,lr,elapsed_ms\n";
  const auto t0 = std::chrono::steady_clock::now();
  double last_loss = 0.0;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const std::span<const Token> window(corpus.data() + pick(windows), cfg.seq_len);
    const auto res = run_step(cfg.mode, params, window, cfg.plan, subsets);
    if (cfg.optimizer == Optimizer::sgd) {
      sgd_update(tensors, res.grads, cfg.lr);
    } else {
      adam_update(tensors, res.grads, adam, hyper);
    }
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    os << step << ',' << format_number(res.loss) << ',' << format_number(res.report.grad_norm) << ','
       << format_number(cfg.lr) << ',' << format_fixed(ms, 3) << '\n';
    last_loss = res.loss;
  }
  if (!cfg.checkpoint.empty()) save_checkpoint(cfg.checkpoint, params);
  if (sink.to_file()) {
    out << "trained " << cfg.steps << " steps (" << mode_name(cfg.mode) << ", " << dtype_name(cfg.dtype)
        << "), final loss " << format_number(last_loss) << '\n';
    out << "metrics: " << cfg.out << '\n';
    if (!cfg.checkpoint.empty()) out << "checkpoint: " << cfg.checkpoint << '\n';
  }
  return 0;
}

template <class T>
int bench_impl(const RunConfig& cfg, std::ostream& out) {
  cfg.model.validate();
  const auto params = init_params<T>(cfg.model, cfg.seed);
  std::vector<ScalingRow> rows;
  for (auto mode : cfg.modes) {
    require_budget(mode, cfg.plan);
    auto r = report_scaling(mode, params, std::span<const std::size_t>(cfg.seq_lens), cfg.plan.chunk_size,
                            cfg.plan.budget, cfg.plan.compensation_cap, cfg.seed);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  Sink sink(cfg.out, out);
  write_scaling_csv(sink.stream(), rows);
  return 0;
}

}  // namespace

int cmd_gradcheck(const RunConfig& cfg, std::ostream& out) {
  if (cfg.dtype != DType::float64) throw std::invalid_argument("gradcheck runs in float64 only");
  cfg.model.validate();
  const auto corpus = load_corpus(cfg);
  const auto window = first_window(corpus, cfg.seq_len);
  const std::size_t k = cfg.plan.resolve(cfg.seq_len);
  const auto params = init_params<double>(cfg.model, cfg.seed);

  const auto naive = naive_step(params, window);
  const auto seco = seco_step(params, window, cfg.plan);
  double max_abs = 0.0;
  double scale = 0.0;
  for (std::size_t i = 0; i < naive.grads.size(); ++i) {
    for (std::size_t e = 0; e < naive.grads[i].size(); ++e) {
      max_abs = std::max(max_abs, std::abs(naive.grads[i][e] - seco.grads[i][e]));
      scale = std::max(scale, std::abs(naive.grads[i][e]));
    }
  }
  const double max_rel = scale > 0.0 ? max_abs / scale : 0.0;
  const bool pass = max_abs <= cfg.threshold;
  out << "seq_len " << cfg.seq_len << '\n'
      << "chunk_size " << cfg.plan.chunk_size << '\n'
      << "chunks " << k << '\n'
      << "loss_naive " << format_number(naive.loss) << '\n'
      << "loss_seco " << format_number(seco.loss) << '\n'
      << "max_abs_diff " << format_number(max_abs) << '\n'
      << "max_rel_diff " << format_number(max_rel) << '\n'
      << "threshold " << format_number(cfg.threshold) << '\n'
      << (pass ? "PASS" : "FAIL") << '\n';
  return pass ? 0 : 1;
}

int cmd_train(const RunConfig& cfg, std::ostream& out) {
  return cfg.dtype == DType::float32 ? train_impl<float>(cfg, out) : train_impl<double>(cfg, out);
}

int cmd_bench(const RunConfig& cfg, std::ostream& out) {
  return cfg.dtype == DType::float32 ? bench_impl<float>(cfg, out) : bench_impl<double>(cfg, out);
}

int cmd_bias(const RunConfig& cfg, std::ostream& out) {
  const auto spec = ChainOracleSpec::random(cfg.oracle_dim, cfg.oracle_input, cfg.k, cfg.seed, cfg.oracle_a_norm);
  const double cap = cfg.plan.compensation_cap;
  if (cfg.t == 0 || cfg.t > cfg.k) throw std::invalid_argument("bias needs 1 <= t <= k");
  const auto s = scaler_rational(cfg.k, cfg.t, cap);

  struct OrderRow {
    std::string effective;
    Rational exact;
    Rational independent;
  };
  std::vector<OrderRow> orders;
  std::string method;
  std::size_t samples = 0;
  double cosine = 0.0;
  double bias = 0.0;
  double bias_scaled = 0.0;

  if (cfg.exhaustive) {
    const auto e = exhaustive_spaco_expectation(spec, cfg.t, cap);
    method = "exhaustive";
    samples = e.subsets;
    cosine = e.cosine;
    bias = e.relative_bias;
    bias_scaled = e.relative_bias_scaled;
    for (const auto& o : e.orders) {
      orders.push_back({o.uniform ? format_number(to_double(o.effective)) : "", o.exact_formula, o.independent_model});
    }
  } else {
    if (cfg.trials == 0) throw std::invalid_argument("bias needs at least one trial");
    const auto mc = monte_carlo_spaco(spec, cfg.t, cap, cfg.trials, cfg.seed, std::max<std::size_t>(1, cfg.parallel_trials));
    const auto exact = oracle_exact_gradient(spec).gradient;
    method = "monte_carlo";
    samples = mc.trials;
    cosine = cosine_similarity(mc.mean, exact);
    const double keep = static_cast<double>(cfg.t) / static_cast<double>(cfg.k);
    double num = 0.0, den = 0.0, num_s = 0.0;
    for (std::size_t q = 0; q < exact.size(); ++q) {
      num += (mc.mean[q] - exact[q]) * (mc.mean[q] - exact[q]);
      num_s += (mc.mean[q] - keep * exact[q]) * (mc.mean[q] - keep * exact[q]);
      den += exact[q] * exact[q];
    }
    bias = den > 0.0 ? std::sqrt(num / den) : 0.0;
    bias_scaled = den > 0.0 ? std::sqrt(num_s / (keep * keep * den)) : 0.0;
    for (std::size_t p = 0; p < cfg.k; ++p) {
      const auto sp = power(s, p);
      orders.push_back({"", sp * survival_probability(cfg.k, cfg.t, p, SurvivalModel::exact),
                        sp * survival_probability(cfg.k, cfg.t, p, SurvivalModel::independent)});
    }
  }

  Sink sink(cfg.out, out);
  auto& os = sink.stream();
  os << "k,t,cap,method,samples,order,effective_scale,exact_formula,independent_model,cosine,relative_bias,"
        "relative_bias_scaled\n";
  for (std::size_t p = 0; p < orders.size(); ++p) {
    os << cfg.k << ',' << cfg.t << ',' << cap_text(cap) << ',' << method << ',' << samples << ',' << p << ','
       << orders[p].effective << ',' << format_number(to_double(orders[p].exact)) << ','
       << format_number(to_double(orders[p].independent)) << ',' << format_number(cosine) << ','
       << format_number(bias) << ',' << format_number(bias_scaled) << '\n';
  }
  return 0;
}

int cmd_paths(const RunConfig& cfg, std::ostream& out) {
  if (cfg.n_max == 0 || cfg.n_max > 12) throw std::invalid_argument("paths needs 1 <= n_max <= 12");
  Sink sink(cfg.out, out);
  auto& os = sink.stream();
  os << "n,t,p,path_count,enumerated,path_ratio,ratio_approx,survival_independent,survival_exact\n";
  for (std::size_t n = 1; n <= cfg.n_max; ++n) {
    const auto dag = Dag::complete(n);
    std::vector<BigInt> enumerated;
    for (std::size_t p = 0; p < n; ++p) enumerated.push_back(enumerate_paths(dag, p));
    for (std::size_t t = 1; t <= n; ++t) {
      for (std::size_t p = 0; p < n; ++p) {
        os << n << ',' << t << ',' << p << ',' << path_count(n, p) << ',' << enumerated[p] << ',';
        if (t > p) os << format_number(to_double(path_ratio(n, t, p)));
        os << ',' << format_number(std::pow(static_cast<double>(n) / static_cast<double>(t), static_cast<double>(p + 1)))
           << ',' << format_number(to_double(survival_probability(n, t, p, SurvivalModel::independent))) << ','
           << format_number(to_double(survival_probability(n, t, p, SurvivalModel::exact))) << '\n';
      }
    }
  }
  return 0;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"chunkgrad: chunk-wise transformer training and gradient analysis"};
  app.require_subcommand(1);
  app.name("chunkgrad");
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  struct Command {
    CLI::App* app;
    int (*fn)(const RunConfig&, std::ostream&);
  };
  const std::vector<std::pair<std::string, std::string>> described{
      {"gradcheck", "compare chunk-wise gradients against the full graph (float64)"},
      {"train", "train on text or synthetic data; writes a metrics CSV and a checkpoint"},
      {"bench", "memory, FLOP, and time scaling across sequence lengths"},
      {"bias", "expectation of sparse gradients on the linear recurrence oracle"},
      {"paths", "path counts and survival probabilities"},
  };
  int (*fns[])(const RunConfig&, std::ostream&) = {cmd_gradcheck, cmd_train, cmd_bench, cmd_bias, cmd_paths};

  std::string config_path;
  std::map<std::string, std::string> values;
  std::map<std::string, std::vector<CLI::Option*>> given;
  std::vector<Command> commands;
  for (std::size_t i = 0; i < described.size(); ++i) {
    auto* sub = app.add_subcommand(described[i].first, described[i].second);
    sub->add_option("--config", config_path, "JSON file of settings; flags override it");
    for (const auto& name : setting_names()) {
      std::string flag = "--" + name;
      if (name.find('_') != std::string::npos) {
        std::string hyphen = name;
        std::replace(hyphen.begin(), hyphen.end(), '_', '-');
        flag += ",--" + hyphen;
      }
      CLI::Option* opt = nullptr;
      if (name == "exhaustive") {
        opt = sub->add_flag(flag, "enumerate every subset instead of sampling");
      } else {
        opt = sub->add_option(flag, values[name]);
      }
      opt->group("Settings");
      given[name].push_back(opt);
    }
    commands.push_back({sub, fns[i]});
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    RunConfig cfg;
    if (!config_path.empty()) apply_config_file(cfg, config_path);
    for (const auto& name : setting_names()) {
      for (auto* opt : given[name]) {
        if (opt->count() == 0) continue;
        apply_setting(cfg, name, name == "exhaustive" ? "true" : values[name]);
      }
    }
    apply_seed_env(cfg);
    for (const auto& c : commands) {
      if (c.app->parsed()) return c.fn(cfg, out);
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}

}  // namespace chunkgrad::cli
