#include "dpdepth/cli.hpp"

int main(int argc, char** argv) { return dpdepth::cli::dispatch(argc, argv); }
