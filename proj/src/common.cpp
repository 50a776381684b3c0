#include "membart/common.hpp"

namespace membart {

namespace {
bool g_finite_checks = false;
}

bool finite_checks_enabled() { return g_finite_checks; }
void set_finite_checks(bool on) { g_finite_checks = on; }

}  // namespace membart
