#include "mixar/cli.hpp"

int main(int argc, char** argv) {
  mixar::cli::tune_allocator();
  return mixar::cli::run(argc, argv);
}
