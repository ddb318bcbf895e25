#include "fca/macs.hpp"

namespace fca::macs {

namespace {
thread_local int64_t g_total = 0;
thread_local bool g_enabled = false;
}  // namespace

void reset() { g_total = 0; }
void set_enabled(bool on) { g_enabled = on; }
bool enabled() { return g_enabled; }
int64_t total() { return g_total; }
void add(int64_t n) {
  if (g_enabled) g_total += n;
}

CounterScope::CounterScope() : prev_(g_enabled) {
  g_total = 0;
  g_enabled = true;
}

CounterScope::~CounterScope() { g_enabled = prev_; }

}  // namespace fca::macs
