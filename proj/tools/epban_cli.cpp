#include "epban/cli.hpp"

int main(int argc, char** argv) { return epban::run_cli(argc, argv); }
