#include "mmnet/cli.hpp"

int main(int argc, char** argv) { return mmnet::cli::run(argc, argv); }
