#include <iostream>

#include "memtrace/cli.hpp"

int main(int argc, char** argv) {
  return memtrace::cli::run({argv + 1, argv + argc}, std::cout, std::cerr);
}
