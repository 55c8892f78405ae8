#include "hetmp/cli.hpp"

int main(int argc, char** argv) { return hetmp::cli::run(argc, argv); }
