/* Copyright 2026 The PST Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// Umbrella header. The command-line front end (pst/cli.hpp) is separate
// because it needs CLI11.

#pragma once

#include "pst/tensor.hpp"
#include "pst/ops.hpp"
#include "pst/autodiff.hpp"
#include "pst/gradcheck.hpp"
#include "pst/graph.hpp"
#include "pst/params.hpp"
#include "pst/psa.hpp"
#include "pst/pst_block.hpp"
#include "pst/networks.hpp"
#include "pst/tensor_file.hpp"
#include "pst/checkpoint.hpp"
#include "pst/cost.hpp"
#include "pst/bench.hpp"
#include "pst/heatmap.hpp"
#include "pst/gradcheck_suite.hpp"
