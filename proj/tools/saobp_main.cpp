// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "saobp/cli.hpp"

int main(int argc, char** argv) { return saobp::cli::run(argc, argv, std::cout, std::cerr); }
