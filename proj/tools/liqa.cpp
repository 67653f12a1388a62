#include "latentiqa/cli.hpp"

int main(int argc, char** argv) { return liqa::run_cli(argc, argv); }
