#pragma once

namespace stal {

inline constexpr const char* kVersion = "1.0.0";

/// Keeps freed tensor buffers in the heap instead of returning them to the
/// kernel after every batch. No-op outside glibc.
void tune_allocator();

}  // namespace stal
