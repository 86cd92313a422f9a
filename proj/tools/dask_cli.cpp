#include "dask/cli.hpp"

int main(int argc, char** argv) { return dask::cli_main(argc, argv); }
