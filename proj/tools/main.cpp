#include <iostream>

#include "msd/cli.hpp"

int main(int argc, char** argv) { return msd::cli::run(argc, argv, std::cout, std::cerr); }
