#include "mpsae/cli.hpp"

int main(int argc, char** argv) { return mpsae::run_cli(argc, argv); }
