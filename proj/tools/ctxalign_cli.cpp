#include "ctxalign/cli.hpp"

int main(int argc, char** argv) { return ctxalign::cli_main(argc, argv); }
