#include <iostream>

#include "klctrl/cli/commands.hpp"

int main(int argc, char** argv) { return klctrl::cli::run(argc, argv, std::cout, std::cerr); }
