#include "kivaci/cli.hpp"

int main(int argc, char** argv) { return kivaci::cli::run(argc, argv); }
