#include "omni/cli.hpp"

int main(int argc, char** argv) { return omni::cli_main(argc, argv); }
