#include <string>
#include <vector>

#include "voxrel/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return voxrel::cli_run(args);
}
