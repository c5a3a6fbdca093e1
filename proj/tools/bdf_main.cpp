#include "bdf/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return bdf::run_cli(argc, argv, std::cout, std::cerr); }
