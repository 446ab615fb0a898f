#include "wsdet_cli.hpp"

int main(int argc, char** argv) { return wsdet::cli::run_cli(argc, argv); }
