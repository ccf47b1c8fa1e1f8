#include "csifall/cli.hpp"

int main(int argc, char** argv) { return csifall::run_command(argc, argv); }
