#include <iostream>

#include "triqdef/cli.hpp"

int main(int argc, char** argv) { return triqdef::run_cli(argc, argv, std::cout, std::cerr); }
