#include "feddpa/cli.hpp"

int main(int argc, char** argv) { return feddpa::cli::cli_main(argc, argv); }
