// Copyright Contributors to the nsmae Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

namespace nsmae::par {

/// Worker threads OpenMP kernels will use (1 when built without OpenMP).
int max_threads();

/// Caps kernel worker threads. n < 1 restores the runtime default.
void set_threads(int n);

}  // namespace nsmae::par
