#include "mkup/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return mkup::run_cli(argc, argv, std::cerr); }
