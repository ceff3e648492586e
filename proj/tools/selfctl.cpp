#include "selfctl/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return selfctl::run_cli(argc, argv, std::cout, std::cerr); }
