#pragma once

#include "membart/config.hpp"

namespace membart {

int cmd_train(const RunConfig& cfg);
int cmd_eval(const RunConfig& cfg);
int cmd_bench(const RunConfig& cfg);
int cmd_compare_variants(const RunConfig& cfg);

}  // namespace membart
