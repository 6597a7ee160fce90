#include "dbfusion/cli.hpp"

int main(int argc, char** argv) { return dbf::cli::run(argc, argv); }
