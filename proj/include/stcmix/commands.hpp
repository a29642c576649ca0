// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>

#include "stcmix/config.hpp"

namespace stcmix {

/// Dispatches one CLI command (gen-data, pretrain, cmmc, schedule, probe,
/// retrieve, gradcheck, compare-operators) against a resolved config. All
/// relative paths are interpreted under workdir. Returns the process exit
/// code; throws on invalid input or internal contract violations.
int run_command(const std::string& command, const Config& cfg,
                const std::string& workdir);

const char* build_id();

} // namespace stcmix
