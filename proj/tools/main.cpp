// Copyright (c) 2026, The mergebench authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "mergebench/cli.hpp"

int main(int argc, char** argv) { return mergebench::cli::run_cli(argc, argv, std::cout, std::cerr); }
