#include "ffact/cli.hpp"

int main(int argc, char** argv) { return ffact::run_cli(argc, argv); }
