#include <iostream>

#include "anodet/cli.hpp"

int main(int argc, char** argv) {
    return anodet::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
