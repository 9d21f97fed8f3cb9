#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "chunkgrad/cli/config.hpp"

namespace chunkgrad::cli {

// Exit codes: 0 success, 1 a check failed (gradcheck over threshold), 2 usage
// or runtime error.
int cmd_gradcheck(const RunConfig& cfg, std::ostream& out);
int cmd_train(const RunConfig& cfg, std::ostream& out);
int cmd_bench(const RunConfig& cfg, std::ostream& out);
int cmd_bias(const RunConfig& cfg, std::ostream& out);
int cmd_paths(const RunConfig& cfg, std::ostream& out);

// Full command line without the program name, e.g. {"train", "--steps", "10"}.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace chunkgrad::cli
