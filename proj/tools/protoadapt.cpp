#include "protoadapt/cli.hpp"

int main(int argc, char** argv) { return protoadapt::cli_main(argc, argv); }
