#include "t2i2t/cli.hpp"

int main(int argc, char** argv) { return t2i2t::cli::run(argc, argv); }
