#include <iostream>

#include "refuseg/cli/cli.hpp"

int main(int argc, char** argv) {
  return refuseg::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
