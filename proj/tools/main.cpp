#include "cli.hpp"

int main(int argc, char** argv) { return icepilot::cli_main(argc, argv); }
