#include "faug/cli.hpp"

int main(int argc, char** argv) { return faug::cli::run_main(argc, argv); }
