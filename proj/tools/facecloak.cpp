#include <iostream>

#include "facecloak/cli.hpp"

int main(int argc, char** argv) {
  return facecloak::run_cli({argv + 1, argv + argc}, std::cout, std::cerr);
}
