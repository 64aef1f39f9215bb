#include "mimo/cli.hpp"

int main(int argc, char** argv) { return mimo::cli::main(argc, argv); }
