// SPDX-License-Identifier: Apache-2.0
#include "maskcycle/cli.hpp"

int main(int argc, char** argv) { return maskcycle::run_cli(argc, argv); }
