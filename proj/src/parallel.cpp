#include "stal/parallel.hpp"

#include <tbb/blocked_range.h>
#include <tbb/global_control.h>
#include <tbb/info.h>
#include <tbb/parallel_for.h>

#include <memory>
#include <mutex>

namespace stal {
namespace {

std::mutex g_control_mutex;
std::unique_ptr<tbb::global_control> g_control;
std::size_t g_threads = 0;

}  // namespace

void set_max_threads(std::size_t n) {
  std::lock_guard<std::mutex> lock(g_control_mutex);
  g_control.reset();
  g_threads = n;
  if (n > 0) {
    g_control = std::make_unique<tbb::global_control>(tbb::global_control::max_allowed_parallelism, n);
  }
}

std::size_t max_threads() {
  std::lock_guard<std::mutex> lock(g_control_mutex);
  if (g_threads > 0) return g_threads;
  return static_cast<std::size_t>(tbb::info::default_concurrency());
}

void parallel_for(std::size_t count, std::size_t grain,
                  const std::function<void(std::size_t, std::size_t)>& body) {
  if (count == 0) return;
  if (grain == 0) grain = 1;
  if (count <= grain) {
    body(0, count);
    return;
  }
  tbb::parallel_for(tbb::blocked_range<std::size_t>(0, count, grain),
                    [&](const tbb::blocked_range<std::size_t>& r) { body(r.begin(), r.end()); },
                    tbb::simple_partitioner());
}

}  // namespace stal
