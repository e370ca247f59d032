#include "capiqa/cli.hpp"

int main(int argc, char** argv) { return capiqa::run_cli(argc, argv); }
