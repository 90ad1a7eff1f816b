#include "consisid/cli.hpp"

int main(int argc, char** argv) { return csid::cli::run_cli(argc, argv); }
