#include "toon/cli.hpp"

int main(int argc, char** argv) { return toon::run_cli(argc, argv); }
