// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>

namespace bitformer {

/// Worker cap from BITFORMER_THREADS, defaulting to hardware concurrency.
std::size_t worker_threads();

/// Runs fn(i) for i in [0, n). Work items must not share mutable state;
/// results must be combined by the caller in index order.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace bitformer
