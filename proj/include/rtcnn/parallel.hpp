#pragma once

#include <cstddef>
#include <functional>

namespace rtcnn {

/// Worker count: RTCNN_THREADS when set to a positive integer, else hardware parallelism.
std::size_t thread_count();

/// Override the worker count for this process (0 restores the default). Not thread-safe
/// with respect to in-flight parallel_for calls.
void set_thread_count(std::size_t n);

/// Runs body(i) for every i in [0, count). Indices are independent units of work, so the
/// result never depends on scheduling. Nested calls run inline on the calling thread.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body);

}  // namespace rtcnn
