#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "chunkgrad/chunkwise.hpp"
#include "chunkgrad/kernels.hpp"
#include "chunkgrad/model.hpp"
#include "json.hpp"

namespace chunkgrad::cli {

enum class Optimizer { sgd, adam };

// Every knob of every command. Keys are the field names below; the CLI also
// accepts them with hyphens in place of underscores.
struct RunConfig {
  ModelConfig model;
  ChunkPlan plan;
  TrainMode mode = TrainMode::seco;
  DType dtype = DType::float64;
  std::size_t seq_len = 512;

  // train
  std::size_t steps = 100;
  double lr = 3e-3;
  Optimizer optimizer = Optimizer::adam;
  std::string out;  // CSV destination; empty writes to stdout
  std::string checkpoint = "chunkgrad_final.ckpt";

  // data: "markov", "random", or a path to a text file
  std::string data = "markov";
  std::size_t data_tokens = 65536;  // synthetic corpus length, or truncation for files (0 keeps all)
  std::size_t markov_order = 2;
  std::size_t markov_alphabet = 16;
  double markov_concentration = 0.1;

  std::uint64_t seed = 0;
  bool seed_given = false;

  // gradcheck
  double threshold = 1e-10;

  // bench
  std::vector<std::size_t> seq_lens{512, 1024, 2048};
  std::vector<TrainMode> modes{TrainMode::naive, TrainMode::seco, TrainMode::spaco};

  // bias, on the linear recurrence oracle
  std::size_t k = 8;
  std::size_t t = 4;
  std::size_t trials = 10000;
  bool exhaustive = false;
  std::size_t parallel_trials = 1;
  std::size_t oracle_dim = 3;
  std::size_t oracle_input = 2;
  double oracle_a_norm = 0.5;

  // paths
  std::size_t n_max = 8;
};

// Canonical (underscore) names of every setting.
const std::vector<std::string>& setting_names();

// Accepts either spelling of the key. Throws std::invalid_argument on unknown
// keys or unparsable values.
void apply_setting(RunConfig& cfg, std::string_view key, std::string_view value);

// Flat JSON object of settings; arrays are accepted for list-valued keys.
void apply_json(RunConfig& cfg, const nlohmann::json& doc);
void apply_config_file(RunConfig& cfg, const std::filesystem::path& path);

// Falls back to CHUNKGRAD_SEED when no seed was set explicitly.
void apply_seed_env(RunConfig& cfg);

std::string_view optimizer_name(Optimizer o);
// "none", "off", and "inf" disable the cap.
double parse_cap(std::string_view text);

// Training corpus for the data setting.
std::vector<Token> load_corpus(const RunConfig& cfg);

}  // namespace chunkgrad::cli
