// SPDX-License-Identifier: Apache-2.0
#include "eloforge/cli.hpp"

int main(int argc, char** argv) { return eloforge::run_cli(argc, argv); }
