// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "rcnnhw/cli.hpp"

int main(int argc, char** argv) { return rcnnhw::run_cli(argc, argv, std::cout, std::cerr); }
