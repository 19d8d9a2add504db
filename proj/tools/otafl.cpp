#include <iostream>

#include "otafl/experiments.hpp"

int main(int argc, char** argv) {
    return otafl::run_cli(argc, argv, std::cout, std::cerr);
}
