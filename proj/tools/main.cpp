#include <iostream>

#include "mcm/cli.hpp"

int main(int argc, char** argv) { return mcm::run_cli(argc, argv, std::cout, std::cerr); }
