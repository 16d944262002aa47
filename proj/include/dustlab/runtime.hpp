// Copyright 2026 The dustlab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <omp.h>

#include <Eigen/Core>
#include <cstdlib>
#include <string>

#include "dustlab/errors.hpp"

namespace dustlab {

/// Sets the worker count for the parallel GEMM kernels. One thread gives
/// bitwise-reproducible results.
inline void set_num_threads(int n) {
  if (n < 1) throw ConfigError("thread count must be >= 1");
  omp_set_num_threads(n);
  Eigen::setNbThreads(n);
}

/// Thread count from an explicit flag (> 0), else DUSTLAB_THREADS, else 1.
inline int resolve_thread_count(int flag_value) {
  if (flag_value > 0) return flag_value;
  if (const char* env = std::getenv("DUSTLAB_THREADS"); env && *env) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1 || v > 4096) throw ConfigError(std::string("DUSTLAB_THREADS must be a positive integer, got '") + env + "'");
    return static_cast<int>(v);
  }
  return 1;
}

}  // namespace dustlab
