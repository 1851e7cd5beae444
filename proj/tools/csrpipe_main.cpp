#include "csrpipe/cli.hpp"

int main(int argc, char** argv) {
  return csrpipe::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
