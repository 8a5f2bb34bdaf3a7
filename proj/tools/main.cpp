#include "rflow/cli.hpp"

int main(int argc, char** argv) { return rflow::cli_main(argc, argv); }
