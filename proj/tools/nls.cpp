#include <malloc.h>

#include "nls/cli.hpp"

int main(int argc, char** argv) {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return nls::cli::run(argc, argv);
}
