#include <iostream>
#include <string>
#include <vector>

#include "chunkgrad/cli/commands.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return chunkgrad::cli::run(args, std::cout, std::cerr);
}
