#include "foamqc/cli.hpp"

int main(int argc, char** argv) { return foamqc::cli_main(argc, argv); }
