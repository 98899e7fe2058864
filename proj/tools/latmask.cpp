#include <iostream>
#include <string>
#include <vector>

#include "latmask/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return latmask::cli::run(args, std::cout, std::cerr);
}
