#include "chunkgrad/cli/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <stdexcept>

#include "chunkgrad/data.hpp"

namespace chunkgrad::cli {

namespace {

using Setter = std::function<void(RunConfig&, std::string_view)>;

[[noreturn]] void bad_value(std::string_view what, std::string_view text) {
  throw std::invalid_argument("invalid value '" + std::string(text) + "' for " + std::string(what));
}

std::uint64_t parse_u64(std::string_view key, std::string_view text) {
  std::uint64_t v = 0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end || text.empty()) bad_value(key, text);
  return v;
}

std::size_t parse_size(std::string_view key, std::string_view text) {
  return static_cast<std::size_t>(parse_u64(key, text));
}

double parse_double(std::string_view key, std::string_view text) {
  double v = 0.0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end || text.empty()) bad_value(key, text);
  return v;
}

bool parse_bool(std::string_view key, std::string_view text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  bad_value(key, text);
}

std::vector<std::string_view> split_list(std::string_view text) {
  std::vector<std::string_view> out;
  while (!text.empty()) {
    const auto pos = text.find(',');
    auto item = text.substr(0, pos);
    while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
    while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
    if (!item.empty()) out.push_back(item);
    if (pos == std::string_view::npos) break;
    text.remove_prefix(pos + 1);
  }
  return out;
}

const std::map<std::string, Setter, std::less<>>& setters() {
  static const std::map<std::string, Setter, std::less<>> table = [] {
    std::map<std::string, Setter, std::less<>> m;
    auto sz = [&](const char* name, auto field) {
      m[name] = [name, field](RunConfig& c, std::string_view v) { field(c) = parse_size(name, v); };
    };
    auto dbl = [&](const char* name, auto field) {
      m[name] = [name, field](RunConfig& c, std::string_view v) { field(c) = parse_double(name, v); };
    };

    sz("layers", [](RunConfig& c) -> std::size_t& { return c.model.layers; });
    sz("d_model", [](RunConfig& c) -> std::size_t& { return c.model.d_model; });
    sz("n_heads", [](RunConfig& c) -> std::size_t& { return c.model.n_heads; });
    sz("vocab_size", [](RunConfig& c) -> std::size_t& { return c.model.vocab_size; });
    sz("ffn_dim", [](RunConfig& c) -> std::size_t& { return c.model.ffn_dim; });
    sz("max_position", [](RunConfig& c) -> std::size_t& { return c.model.max_position; });
    dbl("norm_eps", [](RunConfig& c) -> double& { return c.model.norm_eps; });
    dbl("rope_base", [](RunConfig& c) -> double& { return c.model.rope_base; });

    sz("chunk_size", [](RunConfig& c) -> std::size_t& { return c.plan.chunk_size; });
    sz("budget", [](RunConfig& c) -> std::size_t& { return c.plan.budget; });
    m["cap"] = [](RunConfig& c, std::string_view v) { c.plan.compensation_cap = parse_cap(v); };

    m["mode"] = [](RunConfig& c, std::string_view v) { c.mode = parse_mode(v); };
    m["dtype"] = [](RunConfig& c, std::string_view v) {
      if (v == "float32" || v == "f32") {
        c.dtype = DType::float32;
      } else if (v == "float64" || v == "f64") {
        c.dtype = DType::float64;
      } else {
        bad_value("dtype", v);
      }
    };
    sz("seq_len", [](RunConfig& c) -> std::size_t& { return c.seq_len; });

    sz("steps", [](RunConfig& c) -> std::size_t& { return c.steps; });
    dbl("lr", [](RunConfig& c) -> double& { return c.lr; });
    m["optimizer"] = [](RunConfig& c, std::string_view v) {
      if (v == "sgd") {
        c.optimizer = Optimizer::sgd;
      } else if (v == "adam") {
        c.optimizer = Optimizer::adam;
      } else {
        bad_value("optimizer", v);
      }
    };
    m["out"] = [](RunConfig& c, std::string_view v) { c.out = v; };
    m["checkpoint"] = [](RunConfig& c, std::string_view v) { c.checkpoint = v; };

    m["data"] = [](RunConfig& c, std::string_view v) { c.data = v; };
    sz("data_tokens", [](RunConfig& c) -> std::size_t& { return c.data_tokens; });
    sz("markov_order", [](RunConfig& c) -> std::size_t& { return c.markov_order; });
    sz("markov_alphabet", [](RunConfig& c) -> std::size_t& { return c.markov_alphabet; });
    dbl("markov_concentration", [](RunConfig& c) -> double& { return c.markov_concentration; });

    m["seed"] = [](RunConfig& c, std::string_view v) {
      c.seed = parse_u64("seed", v);
      c.seed_given = true;
    };
    dbl("threshold", [](RunConfig& c) -> double& { return c.threshold; });

    m["seq_lens"] = [](RunConfig& c, std::string_view v) {
      c.seq_lens.clear();
      for (auto item : split_list(v)) c.seq_lens.push_back(parse_size("seq_lens", item));
      if (c.seq_lens.empty()) bad_value("seq_lens", v);
    };
    m["modes"] = [](RunConfig& c, std::string_view v) {
      c.modes.clear();
      for (auto item : split_list(v)) c.modes.push_back(parse_mode(item));
      if (c.modes.empty()) bad_value("modes", v);
    };

    sz("k", [](RunConfig& c) -> std::size_t& { return c.k; });
    sz("t", [](RunConfig& c) -> std::size_t& { return c.t; });
    sz("trials", [](RunConfig& c) -> std::size_t& { return c.trials; });
    m["exhaustive"] = [](RunConfig& c, std::string_view v) { c.exhaustive = parse_bool("exhaustive", v); };
    sz("parallel_trials", [](RunConfig& c) -> std::size_t& { return c.parallel_trials; });
    sz("oracle_dim", [](RunConfig& c) -> std::size_t& { return c.oracle_dim; });
    sz("oracle_input", [](RunConfig& c) -> std::size_t& { return c.oracle_input; });
    dbl("oracle_a_norm", [](RunConfig& c) -> double& { return c.oracle_a_norm; });

    sz("n_max", [](RunConfig& c) -> std::size_t& { return c.n_max; });
    return m;
  }();
  return table;
}

std::string canonical(std::string_view key) {
  std::string s(key);
  while (!s.empty() && s.front() == '-') s.erase(s.begin());
  std::replace(s.begin(), s.end(), '-', '_');
  if (s == "compensation_cap") s = "cap";
  return s;
}

}  // namespace

const std::vector<std::string>& setting_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& [name, _] : setters()) out.push_back(name);
    return out;
  }();
  return names;
}

void apply_setting(RunConfig& cfg, std::string_view key, std::string_view value) {
  const auto name = canonical(key);
  const auto it = setters().find(name);
  if (it == setters().end()) throw std::invalid_argument("unknown setting '" + std::string(key) + "'");
  it->second(cfg, value);
  if (name == "seed") cfg.plan.seed = cfg.seed;
}

void apply_json(RunConfig& cfg, const nlohmann::json& doc) {
  if (!doc.is_object()) throw std::invalid_argument("config must be a JSON object");
  for (const auto& [key, value] : doc.items()) {
    std::string text;
    if (value.is_string()) {
      text = value.get<std::string>();
    } else if (value.is_boolean()) {
      text = value.get<bool>() ? "true" : "false";
    } else if (value.is_number()) {
      text = value.dump();
    } else if (value.is_array()) {
      for (const auto& item : value) {
        if (!text.empty()) text += ',';
        text += item.is_string() ? item.get<std::string>() : item.dump();
      }
    } else if (value.is_null() && canonical(key) == "cap") {
      text = "none";
    } else {
      throw std::invalid_argument("config key '" + key + "' has an unsupported value");
    }
    apply_setting(cfg, key, text);
  }
}

void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("config " + path.string() + ": " + e.what());
  }
  apply_json(cfg, doc);
}

void apply_seed_env(RunConfig& cfg) {
  if (cfg.seed_given) return;
  if (const char* env = std::getenv("CHUNKGRAD_SEED"); env && *env) {
    cfg.seed = parse_u64("CHUNKGRAD_SEED", env);
    cfg.plan.seed = cfg.seed;
  }
}

std::string_view optimizer_name(Optimizer o) { return o == Optimizer::sgd ? "sgd" : "adam"; }

double parse_cap(std::string_view text) {
  if (text == "none" || text == "off" || text == "inf") return kNoCap;
  const double v = parse_double("cap", text);
  if (!(v >= 1.0)) bad_value("cap (must be at least 1)", text);
  return v;
}

std::vector<Token> load_corpus(const RunConfig& cfg) {
  if (cfg.data == "markov") {
    MarkovSpec spec;
    spec.alphabet = cfg.markov_alphabet;
    spec.order = cfg.markov_order;
    spec.concentration = cfg.markov_concentration;
    return synth_markov(cfg.seed, cfg.markov_order, cfg.data_tokens, spec);
  }
  if (cfg.data == "random") return random_tokens(cfg.seed, cfg.data_tokens, cfg.model.vocab_size);
  return ingest_text(cfg.data, cfg.data_tokens);
}

}  // namespace chunkgrad::cli
