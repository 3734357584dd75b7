#include "curate/parallel.hpp"

#include <atomic>

namespace curate {
namespace {
std::atomic<unsigned> g_workers{1};
}

void set_worker_count(unsigned workers) { g_workers.store(std::max(1u, workers)); }
unsigned worker_count() { return g_workers.load(); }

}  // namespace curate
