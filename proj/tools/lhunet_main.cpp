#include "lhunet/cli.hpp"

int main(int argc, char** argv) { return lhunet::cli::run(argc, argv); }
