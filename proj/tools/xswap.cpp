#include "xswap/cli.hpp"

int main(int argc, char** argv) { return xswap::cli::run(argc, argv); }
