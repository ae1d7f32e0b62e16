#include "hgen/cli.hpp"

int main(int argc, char** argv) { return hgen::cli::run_command(argc, argv); }
