#include <iostream>
#include <string>
#include <vector>

#include "tslab/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  if (args.empty()) {
    std::cerr << "usage: tslab {train|sweep|probe|report} --config PATH [--set key=value]..."
                 " [--out DIR]\n"
                 "       tslab sweep --config PATH --experiment NAME [--out DIR]\n"
                 "       tslab probe --config PATH --checkpoint PATH [--out DIR]\n"
                 "       tslab report CSV [CSV...] [--out DIR]\n";
    return 2;
  }
  return tslab::run_cli(args, std::cout, std::cerr);
}
