#include "varcomp/cli.hpp"

int main(int argc, char** argv) { return varcomp::cli::run(argc, argv); }
