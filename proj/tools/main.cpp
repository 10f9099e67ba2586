#include "cli.hpp"

int main(int argc, char** argv) { return pagnol::cli::run(argc, argv); }
