#include <string>
#include <vector>

#include "cot/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return cot::run_cli(args);
}
