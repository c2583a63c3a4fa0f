#include "reasonlens/cli.hpp"

int main(int argc, char** argv) { return reasonlens::cli::run(argc, argv); }
