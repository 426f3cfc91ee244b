#include <iostream>
#include <string>
#include <vector>

#include "facetune_cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return facetune::cli::run(args, std::cout, std::cerr);
}
