#pragma once

#include <cstddef>
#include <functional>

namespace stal {

/// Caps the number of worker threads used by internal kernels. 0 restores the
/// default (all available cores). Results never depend on this value: every
/// parallel kernel writes disjoint outputs with a fixed per-element order.
void set_max_threads(std::size_t n);
std::size_t max_threads();

/// Runs body(begin, end) over [0, count) split into chunks of at most `grain`.
void parallel_for(std::size_t count, std::size_t grain,
                  const std::function<void(std::size_t, std::size_t)>& body);

}  // namespace stal
