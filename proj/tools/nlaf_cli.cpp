#include "nlaf/harness.hpp"

int main(int argc, char** argv) { return nlaf::run_cli(argc, argv); }
