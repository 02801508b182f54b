#include <iostream>

#include "cli.hpp"

int main(int argc, char** argv) { return motion4d::cli::run(argc, argv, std::cerr); }
