#include <iostream>

#include "infrayolo/cli.hpp"

int main(int argc, char** argv) { return infrayolo::run_cli(argc, argv, std::cout, std::cerr); }
