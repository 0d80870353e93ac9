#include <abq/cli.hpp>

int main(int argc, char** argv) { return abq::run_cli(argc, argv); }
