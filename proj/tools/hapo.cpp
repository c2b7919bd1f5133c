#include <iostream>

#include "hapo/cli.hpp"

int main(int argc, char** argv) { return hapo::run_cli(argc, argv, std::cout, std::cerr); }
