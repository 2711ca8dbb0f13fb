// Copyright 2026 The ctvr Authors
// SPDX-License-Identifier: Apache-2.0

#include <malloc.h>

#include <iostream>

#include "ctvr/cli.hpp"

int main(int argc, char** argv) {
  // Training allocates and frees many mid-sized buffers; keep them off mmap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return ctvr::cli::run_cli(argc, argv, std::cout, std::cerr);
}
