#include <iostream>

#include "madkin/cli.hpp"

int main(int argc, char** argv) { return madkin::cli::run(argc, argv, std::cout, std::cerr); }
