#include "mdmm/cli.hpp"

int main(int argc, char** argv) {
  return mdmm::cli::run(argc, argv);
}
