#include <iostream>

#include "mem4d/cli.hpp"

int main(int argc, char** argv) {
  return mem4d::cli::run(argc, argv, std::cout, std::cerr, mem4d::cli::RunConfig::process_environment());
}
